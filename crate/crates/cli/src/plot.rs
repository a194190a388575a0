//! PNG figures: the recall@k curve, radar-over-LiDAR overlays and flow fields.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ralf_core::evaluation::RecallReport;
use ralf_core::geometry::{BevImage, Modality};
use ralf_core::pose_solver::warp_image;

use crate::config::RalfConfig;
use crate::pipeline::{describe, load_model, register, MapStore, RECALL_JSON};
use crate::{create_dir, read_json, CliError};

pub const RECALL_PNG: &str = "recall_at_k.png";

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const LINE: Rgb<u8> = Rgb([31, 119, 180]);

fn save(img: &RgbImage, path: &Path) -> Result<(), CliError> {
    img.save(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn segment(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (x, y) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
        for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            let (px, py) = (x.round() as i64 + dx, y.round() as i64 + dy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
    }
}

fn marker(img: &mut RgbImage, c: (f64, f64), color: Rgb<u8>) {
    for dy in -3i64..=3 {
        for dx in -3i64..=3 {
            let (px, py) = (c.0.round() as i64 + dx, c.1.round() as i64 + dy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
    }
}

/// Recall against k on a unit-height axis with gridlines every 0.1.
pub fn recall_curve(report: &RecallReport) -> RgbImage {
    let (w, h, m) = (640u32, 400u32, 40.0);
    let mut img = RgbImage::from_pixel(w, h, WHITE);
    let (x0, x1, y0, y1) = (m, w as f64 - m, h as f64 - m, m);
    let k_max = report.k_values.iter().copied().max().unwrap_or(1).max(2) as f64;
    let k_min = report.k_values.iter().copied().min().unwrap_or(1) as f64;
    let span = (k_max - k_min).max(1.0);
    let px = |k: f64| x0 + (k - k_min) / span * (x1 - x0);
    let py = |r: f64| y0 + r.clamp(0.0, 1.0) * (y1 - y0);
    for i in 0..=10 {
        let y = py(i as f64 / 10.0);
        segment(&mut img, (x0, y), (x1, y), GRID);
    }
    segment(&mut img, (x0, y0), (x1, y0), AXIS);
    segment(&mut img, (x0, y0), (x0, y1), AXIS);
    let pts: Vec<(f64, f64)> = report
        .k_values
        .iter()
        .zip(&report.recall_at_k)
        .map(|(&k, &r)| (px(k as f64), py(r)))
        .collect();
    for w in pts.windows(2) {
        segment(&mut img, w[0], w[1], LINE);
    }
    for &p in &pts {
        marker(&mut img, p, LINE);
    }
    img
}

/// Writes the recall curve of an `evaluate` report directory.
pub fn plot(_cfg: &RalfConfig, report_dir: &Path, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let report: RecallReport = read_json(&report_dir.join(RECALL_JSON))?;
    create_dir(out)?;
    let path = out.join(RECALL_PNG);
    save(&recall_curve(&report), &path)?;
    Ok(vec![path])
}

/// Radar in red over LiDAR in green; overlap reads yellow.
pub fn overlay(radar: &BevImage, lidar: &BevImage) -> RgbImage {
    let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    RgbImage::from_fn(radar.width() as u32, radar.height() as u32, |c, r| {
        let (r, c) = (r as usize, c as usize);
        Rgb([to_u8(radar.get(r, c)), to_u8(lidar.get(r, c)), 0])
    })
}

fn side_by_side(a: &RgbImage, b: &RgbImage) -> RgbImage {
    let gap = 4;
    let mut img = RgbImage::from_pixel(a.width() + gap + b.width(), a.height().max(b.height()), WHITE);
    image::imageops::overlay(&mut img, a, 0, 0);
    image::imageops::overlay(&mut img, b, (a.width() + gap) as i64, 0);
    img
}

fn upscale(img: &RgbImage, factor: u32) -> RgbImage {
    image::imageops::resize(
        img,
        img.width() * factor,
        img.height() * factor,
        image::imageops::FilterType::Nearest,
    )
}

/// For the first `count` queries: the radar over the retrieved submap before and after
/// warping the submap by the predicted flow, and the flow as a color wheel.
pub fn overlays(
    cfg: &RalfConfig,
    map_dir: &Path,
    queries_dir: &Path,
    checkpoint: &Path,
    out: &Path,
    count: usize,
) -> Result<Vec<PathBuf>, CliError> {
    let store = MapStore::open(map_dir, cfg)?;
    let model = load_model(checkpoint, cfg)?;
    let queries = crate::data::load_frames(queries_dir, &cfg.bev)?;
    let queries = &queries[..count.min(queries.len())];
    let radar: Vec<&BevImage> = queries.iter().map(|q| &q.radar).collect();
    let descs = describe(&model, &radar, Modality::Radar)?;
    let mut submaps = Vec::with_capacity(queries.len());
    for d in &descs {
        submaps.push(store.submap_bev(store.db.query(d)?.id)?);
    }
    let pairs: Vec<(&BevImage, &BevImage)> = radar.iter().copied().zip(submaps.iter()).collect();
    let regs = register(&model, cfg, &pairs)?;
    create_dir(out)?;
    let scale = (256 / cfg.bev.width.max(1)).max(1) as u32;
    let mut written = Vec::new();
    for ((q, sub), reg) in queries.iter().zip(&submaps).zip(&regs) {
        let warped = warp_image(sub, &reg.flow).map_err(|e| CliError::Runtime(e.to_string()))?;
        let fig = side_by_side(&overlay(&q.radar, sub), &overlay(&q.radar, &warped));
        let path = out.join(format!("overlay_{}.png", ralf_core::dataset::frame_stem(q.id)));
        save(&upscale(&fig, scale), &path)?;
        written.push(path);
        let colors = reg.flow.to_color_wheel(None);
        let flow_img = RgbImage::from_fn(reg.flow.width() as u32, reg.flow.height() as u32, |c, r| {
            Rgb(colors[r as usize * reg.flow.width() + c as usize])
        });
        let path = out.join(format!("flow_{}.png", ralf_core::dataset::frame_stem(q.id)));
        save(&upscale(&flow_img, scale), &path)?;
        written.push(path);
    }
    Ok(written)
}
