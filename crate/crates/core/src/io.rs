//! On-disk formats: `RLFC` point clouds, 16-bit PGM rasters and pose tables.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BevConfig, BevImage, GeometryError, Modality, PointCloud2, Pose2};

pub const RLFC_MAGIC: &[u8; 4] = b"RLFC";

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic, expected RLFC")]
    BadMagic,
    #[error("truncated file: expected {expected} bytes of payload, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("malformed PGM: {0}")]
    Pgm(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Writes a cloud as `RLFC`, u32 count, then `count x (x, y, z, intensity)` f32, all little-endian.
/// Missing heights are written as 0 and missing intensities as 1.
pub fn write_rlfc(path: impl AsRef<Path>, cloud: &PointCloud2<f64>) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(RLFC_MAGIC)?;
    w.write_all(&(cloud.len() as u32).to_le_bytes())?;
    for (i, p) in cloud.points.iter().enumerate() {
        let z = cloud.heights.as_ref().map_or(0.0, |h| h[i]);
        let s = cloud.intensity.as_ref().map_or(1.0, |v| v[i]);
        for v in [p[0], p[1], z, s] {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_rlfc(path: impl AsRef<Path>) -> Result<PointCloud2<f64>, IoError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode_rlfc(&bytes)
}

pub fn decode_rlfc(bytes: &[u8]) -> Result<PointCloud2<f64>, IoError> {
    if bytes.len() < 8 || &bytes[..4] != RLFC_MAGIC {
        return Err(IoError::BadMagic);
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let payload = &bytes[8..];
    let expected = count * 16;
    if payload.len() < expected {
        return Err(IoError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    let mut points = Vec::with_capacity(count);
    let mut heights = Vec::with_capacity(count);
    let mut intensity = Vec::with_capacity(count);
    for rec in payload[..expected].chunks_exact(16) {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap()) as f64;
        points.push([f(0), f(1)]);
        heights.push(f(2));
        intensity.push(f(3));
    }
    Ok(PointCloud2 {
        points,
        heights: Some(heights),
        intensity: Some(intensity),
    })
}

/// Writes a raster as binary 16-bit PGM (`P5`, maxval 65535, big-endian samples).
pub fn write_pgm16(path: impl AsRef<Path>, img: &BevImage) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n65535\n", img.width(), img.height())?;
    for &v in img.pixels() {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        w.write_all(&q.to_be_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a binary PGM (8 or 16 bit) into a raster with the given resolution.
pub fn read_pgm(path: impl AsRef<Path>, resolution: f64, modality: Modality) -> Result<BevImage, IoError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(IoError::Pgm("unexpected end of header".into()));
        }
        let content = line.split('#').next().unwrap_or("");
        tokens.extend(content.split_whitespace().map(str::to_owned));
    }
    if tokens[0] != "P5" {
        return Err(IoError::Pgm(format!("unsupported magic {}", tokens[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|e| IoError::Pgm(e.to_string()));
    let (width, height, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(IoError::Pgm(format!("bad maxval {maxval}")));
    }
    let bytes_per = if maxval > 255 { 2 } else { 1 };
    let mut data = vec![0u8; width * height * bytes_per];
    r.read_exact(&mut data)?;
    let pixels = if bytes_per == 2 {
        data.chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / maxval as f32)
            .collect()
    } else {
        data.iter().map(|&b| b as f32 / maxval as f32).collect()
    };
    let cfg = BevConfig::new(height, width, resolution)?;
    Ok(BevImage::from_pixels(cfg, pixels, modality)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub frame_id: u64,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl PoseRecord {
    pub fn pose(&self) -> Pose2<f64> {
        Pose2::new(self.x, self.y, self.theta)
    }
}

/// Writes `frame_id,x,y,theta`.
pub fn write_poses_csv(path: impl AsRef<Path>, poses: &[(u64, Pose2<f64>)]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path)?;
    for &(frame_id, p) in poses {
        w.serialize(PoseRecord {
            frame_id,
            x: p.x,
            y: p.y,
            theta: p.theta,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_poses_csv(path: impl AsRef<Path>) -> Result<Vec<(u64, Pose2<f64>)>, IoError> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<PoseRecord>()
        .map(|rec| rec.map(|p| (p.frame_id, p.pose())).map_err(IoError::from))
        .collect()
}
