//! Dense flow fields between LiDAR and radar rasters, and their ground truth.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::geometry::{rasterize, world_to_pixel, BevConfig, PointCloud2, Pose2};
use crate::io::IoError;
use crate::scalar::Scalar;

/// Per-pixel displacement `(du, dv)` in pixels (rows, cols), with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMap {
    height: usize,
    width: usize,
    u: Vec<f32>,
    v: Vec<f32>,
    valid: Vec<bool>,
}

impl FlowMap {
    /// All-zero, all-invalid map.
    pub fn empty(height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            u: vec![0.0; n],
            v: vec![0.0; n],
            valid: vec![false; n],
        }
    }

    /// Builds a map from planes; non-finite entries are marked invalid.
    pub fn from_planes(height: usize, width: usize, u: Vec<f32>, v: Vec<f32>, valid: Vec<bool>) -> Self {
        let n = height * width;
        assert!(u.len() == n && v.len() == n && valid.len() == n, "plane size mismatch");
        let valid = valid
            .iter()
            .zip(u.iter().zip(&v))
            .map(|(&m, (a, b))| m && a.is_finite() && b.is_finite())
            .collect();
        Self {
            height,
            width,
            u,
            v,
            valid,
        }
    }

    /// Same flow on every pixel, all valid.
    pub fn uniform(height: usize, width: usize, du: f32, dv: f32) -> Self {
        let n = height * width;
        Self::from_planes(height, width, vec![du; n], vec![dv; n], vec![true; n])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn u_plane(&self) -> &[f32] {
        &self.u
    }

    pub fn v_plane(&self) -> &[f32] {
        &self.v
    }

    pub fn mask(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> (f32, f32) {
        let i = row * self.width + col;
        (self.u[i], self.v[i])
    }

    #[inline]
    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.valid[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, du: f32, dv: f32) {
        let i = row * self.width + col;
        self.u[i] = du;
        self.v[i] = dv;
        self.valid[i] = du.is_finite() && dv.is_finite();
    }

    pub fn invalidate(&mut self, row: usize, col: usize) {
        self.valid[row * self.width + col] = false;
    }

    pub fn count_valid(&self) -> usize {
        self.valid.iter().filter(|&&m| m).count()
    }

    /// Largest flow magnitude over valid pixels (0 when none are valid).
    pub fn max_magnitude(&self) -> f32 {
        (0..self.u.len())
            .filter(|&i| self.valid[i])
            .map(|i| self.u[i].hypot(self.v[i]))
            .fold(0.0, f32::max)
    }

    /// Raw dump: u plane (f32 LE), v plane (f32 LE), then the mask as one byte per pixel.
    pub fn write_dump(&self, path: impl AsRef<Path>) -> Result<(), IoError> {
        let mut w = BufWriter::new(File::create(path)?);
        for plane in [&self.u, &self.v] {
            for x in plane.iter() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.write_all(&self.valid.iter().map(|&m| m as u8).collect::<Vec<_>>())?;
        w.flush()?;
        Ok(())
    }

    pub fn read_dump(path: impl AsRef<Path>, height: usize, width: usize) -> Result<Self, IoError> {
        let n = height * width;
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() != 9 * n {
            return Err(IoError::Truncated {
                expected: 9 * n,
                found: bytes.len(),
            });
        }
        let plane = |off: usize| -> Vec<f32> {
            bytes[off..off + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        let (u, v) = (plane(0), plane(4 * n));
        let valid = bytes[8 * n..].iter().map(|&b| b != 0).collect();
        Ok(Self::from_planes(height, width, u, v, valid))
    }

    /// RGB rendering on the standard optical-flow color wheel, normalized by `max_flow`
    /// (the largest valid magnitude when `None`). Invalid pixels are black.
    pub fn to_color_wheel(&self, max_flow: Option<f32>) -> Vec<[u8; 3]> {
        let wheel = color_wheel();
        let max = max_flow.unwrap_or_else(|| self.max_magnitude()).max(1e-6);
        (0..self.u.len())
            .map(|i| {
                if !self.valid[i] {
                    return [0, 0, 0];
                }
                // image "x" is the column axis, "y" the row axis
                let (fx, fy) = (self.v[i] / max, self.u[i] / max);
                let rad = fx.hypot(fy);
                let a = (-fy).atan2(-fx) / std::f32::consts::PI;
                let fk = (a + 1.0) / 2.0 * (wheel.len() - 1) as f32;
                let k0 = fk.floor() as usize % wheel.len();
                let k1 = (k0 + 1) % wheel.len();
                let f = fk - fk.floor();
                let mut out = [0u8; 3];
                for ch in 0..3 {
                    let c0 = wheel[k0][ch] as f32 / 255.0;
                    let c1 = wheel[k1][ch] as f32 / 255.0;
                    let mut col = (1.0 - f) * c0 + f * c1;
                    if rad <= 1.0 {
                        col = 1.0 - rad * (1.0 - col);
                    } else {
                        col *= 0.75;
                    }
                    out[ch] = (255.0 * col).round().clamp(0.0, 255.0) as u8;
                }
                out
            })
            .collect()
    }
}

fn color_wheel() -> Vec<[u8; 3]> {
    let (ry, yg, gc, cb, bm, mr) = (15, 6, 4, 11, 13, 6);
    let mut w = Vec::with_capacity(ry + yg + gc + cb + bm + mr);
    let ramp = |i: usize, n: usize| (255 * i / n) as u8;
    w.extend((0..ry).map(|i| [255, ramp(i, ry), 0]));
    w.extend((0..yg).map(|i| [255 - ramp(i, yg), 255, 0]));
    w.extend((0..gc).map(|i| [0, 255, ramp(i, gc)]));
    w.extend((0..cb).map(|i| [0, 255 - ramp(i, cb), 255]));
    w.extend((0..bm).map(|i| [ramp(i, bm), 0, 255]));
    w.extend((0..mr).map(|i| [255, 0, 255 - ramp(i, mr)]));
    w
}

/// Ground-truth flow for a world-frame map cloud: each point is projected into the raster
/// centered at `t_init` and into the raster centered at `t_gt`; the displacement is written
/// at the `t_init` pixel. When several points share a pixel the one nearest the sensor wins.
pub fn gt_flow<T: Scalar>(map_cloud: &PointCloud2<T>, t_init: &Pose2<T>, t_gt: &Pose2<T>, cfg: &BevConfig) -> FlowMap {
    let mut flow = FlowMap::empty(cfg.height, cfg.width);
    let mut best_range = vec![T::infinity(); cfg.num_pixels()];
    let (init_inv, gt_inv) = (t_init.inverse(), t_gt.inverse());
    for &m in &map_cloud.points {
        let p_init = init_inv.transform_point(m);
        let Some((r, c)) = rasterize(p_init, cfg) else {
            continue;
        };
        let range = p_init[0].hypot(p_init[1]);
        let i = r * cfg.width + c;
        if range >= best_range[i] {
            continue;
        }
        best_range[i] = range;
        let (u0, v0) = world_to_pixel(p_init, cfg);
        let (u1, v1) = world_to_pixel(gt_inv.transform_point(m), cfg);
        flow.set(
            r,
            c,
            (u1 - u0).to_f32().unwrap_or(f32::NAN),
            (v1 - v0).to_f32().unwrap_or(f32::NAN),
        );
    }
    flow
}
