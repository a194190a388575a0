//! Planar rigid transforms, point clouds and the bird's-eye-view raster.
//!
//! Raster convention: the sensor sits at the image center, `+x` points up
//! (decreasing row) and `+y` points right (increasing column). Continuous
//! pixel coordinates `(u, v)` are `(row, col)`; a point rasterizes into the
//! pixel `(floor(u), floor(v))` and pixel `(r, c)` has its center at
//! `(r + 0.5, c + 0.5)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{wrap_angle, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid BEV config: {0}")]
    InvalidConfig(String),
    #[error("pixel value {value} at index {index} outside [0, 1]")]
    PixelRange { index: usize, value: f32 },
    #[error("raster has {got} pixels, config expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// 3-DoF rigid transform `(x, y, theta)`; `theta` is kept in `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2<T> {
    pub x: T,
    pub y: T,
    pub theta: T,
}

impl<T: Scalar> Default for Pose2<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Scalar> Pose2<T> {
    pub fn new(x: T, y: T, theta: T) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn identity() -> Self {
        Self {
            x: T::zero(),
            y: T::zero(),
            theta: T::zero(),
        }
    }

    pub fn from_degrees(x: T, y: T, theta_deg: T) -> Self {
        Self::new(x, y, theta_deg.to_radians())
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        let (s, c) = self.theta.sin_cos();
        Self::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )
    }

    pub fn inverse(&self) -> Self {
        let (s, c) = self.theta.sin_cos();
        Self::new(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.theta)
    }

    #[inline]
    pub fn transform_point(&self, p: [T; 2]) -> [T; 2] {
        let (s, c) = self.theta.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    /// Euclidean distance between the translation parts.
    pub fn distance(&self, other: &Self) -> T {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Wrapped heading difference `other.theta - self.theta`.
    pub fn heading_delta(&self, other: &Self) -> T {
        wrap_angle(other.theta - self.theta)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }

    pub fn cast<U: Scalar>(&self) -> Pose2<U> {
        Pose2::new(
            U::lit(self.x.to_f64_lossy()),
            U::lit(self.y.to_f64_lossy()),
            U::lit(self.theta.to_f64_lossy()),
        )
    }
}

/// Planar point set with optional per-point height and intensity channels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud2<T> {
    pub points: Vec<[T; 2]>,
    /// Height above the sensor, used by the z-band filter before projection.
    pub heights: Option<Vec<T>>,
    /// Unitless return strength in `[0, 1]`.
    pub intensity: Option<Vec<T>>,
}

impl<T: Scalar> PointCloud2<T> {
    pub fn new(points: Vec<[T; 2]>) -> Self {
        Self {
            points,
            heights: None,
            intensity: None,
        }
    }

    pub fn with_intensity(mut self, intensity: Vec<T>) -> Self {
        assert_eq!(intensity.len(), self.points.len());
        self.intensity = Some(intensity);
        self
    }

    pub fn with_heights(mut self, heights: Vec<T>) -> Self {
        assert_eq!(heights.len(), self.points.len());
        self.heights = Some(heights);
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p[0].is_finite() && p[1].is_finite())
    }

    /// Keeps the points for which `keep(index, point)` holds, with their channels.
    pub fn filter(&self, mut keep: impl FnMut(usize, &[T; 2]) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.points.len()).filter(|&i| keep(i, &self.points[i])).collect();
        self.select(&idx)
    }

    /// Points at `indices`, in that order, with their channels.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            heights: self.heights.as_ref().map(|h| indices.iter().map(|&i| h[i]).collect()),
            intensity: self.intensity.as_ref().map(|v| indices.iter().map(|&i| v[i]).collect()),
        }
    }

    /// Appends `other`; a channel survives only if both clouds carry it.
    pub fn extend(&mut self, other: &Self) {
        let n_self = self.points.len();
        self.points.extend_from_slice(&other.points);
        merge_channel(&mut self.heights, &other.heights, n_self);
        merge_channel(&mut self.intensity, &other.intensity, n_self);
    }

    pub fn cast<U: Scalar>(&self) -> PointCloud2<U> {
        let conv = |v: &Vec<T>| v.iter().map(|&a| U::lit(a.to_f64_lossy())).collect();
        PointCloud2 {
            points: self
                .points
                .iter()
                .map(|p| [U::lit(p[0].to_f64_lossy()), U::lit(p[1].to_f64_lossy())])
                .collect(),
            heights: self.heights.as_ref().map(conv),
            intensity: self.intensity.as_ref().map(conv),
        }
    }
}

fn merge_channel<T: Clone>(dst: &mut Option<Vec<T>>, src: &Option<Vec<T>>, n_dst: usize) {
    match (dst.as_mut(), src) {
        (Some(d), Some(s)) => d.extend_from_slice(s),
        (None, Some(_)) if n_dst == 0 => *dst = src.clone(),
        _ => *dst = None,
    }
}

/// Raster geometry: `height x width` pixels at `resolution` meters per pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevConfig {
    pub height: usize,
    pub width: usize,
    pub resolution: f64,
}

impl Default for BevConfig {
    fn default() -> Self {
        Self {
            height: 256,
            width: 256,
            resolution: 0.5,
        }
    }
}

impl BevConfig {
    pub fn new(height: usize, width: usize, resolution: f64) -> Result<Self, GeometryError> {
        let cfg = Self {
            height,
            width,
            resolution,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.height == 0 || self.width == 0 || self.height % 2 != 0 || self.width % 2 != 0 {
            return Err(GeometryError::InvalidConfig(format!(
                "dimensions must be even and positive, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.resolution > 0.0) || !self.resolution.is_finite() {
            return Err(GeometryError::InvalidConfig(format!(
                "resolution must be positive, got {}",
                self.resolution
            )));
        }
        Ok(())
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    /// Distance from the center to the farthest raster corner, in meters.
    pub fn half_diagonal(&self) -> f64 {
        0.5 * self.resolution * ((self.height * self.height + self.width * self.width) as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Radar,
    Lidar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RasterMode {
    /// 1 where at least one point lands, 0 elsewhere.
    #[default]
    Occupancy,
    /// `ln(1 + n) / ln(1 + n_max)` of the per-pixel point count.
    LogCount,
}

/// Height band (relative to the sensor) kept before projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZBand {
    pub min: f64,
    pub max: f64,
}

impl Default for ZBand {
    fn default() -> Self {
        Self { min: -1.0, max: 4.0 }
    }
}

/// Single-channel raster with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BevImage {
    config: BevConfig,
    pixels: Vec<f32>,
    modality: Modality,
}

impl BevImage {
    pub fn zeros(config: BevConfig, modality: Modality) -> Self {
        Self {
            config,
            pixels: vec![0.0; config.num_pixels()],
            modality,
        }
    }

    pub fn from_pixels(config: BevConfig, pixels: Vec<f32>, modality: Modality) -> Result<Self, GeometryError> {
        config.validate()?;
        if pixels.len() != config.num_pixels() {
            return Err(GeometryError::DimensionMismatch {
                expected: config.num_pixels(),
                got: pixels.len(),
            });
        }
        if let Some((index, &value)) = pixels.iter().enumerate().find(|(_, v)| !(**v >= 0.0 && **v <= 1.0)) {
            return Err(GeometryError::PixelRange { index, value });
        }
        Ok(Self {
            config,
            pixels,
            modality,
        })
    }

    pub fn config(&self) -> &BevConfig {
        &self.config
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.config.height
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.config.width + col]
    }

    /// Sets a pixel, clamping into `[0, 1]`.
    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        let w = self.config.width;
        self.pixels[row * w + col] = value.clamp(0.0, 1.0);
    }

    pub fn count_nonzero(&self) -> usize {
        self.pixels.iter().filter(|&&v| v > 0.0).count()
    }

    pub fn with_modality(mut self, modality: Modality) -> Self {
        self.modality = modality;
        self
    }
}

/// Continuous `(row, col)` coordinates of a metric point.
#[inline]
pub fn world_to_pixel<T: Scalar>(p: [T; 2], cfg: &BevConfig) -> (T, T) {
    let rho = T::lit(cfg.resolution);
    let half_h = T::lit(cfg.height as f64 * 0.5);
    let half_w = T::lit(cfg.width as f64 * 0.5);
    (half_h - p[0] / rho, half_w + p[1] / rho)
}

/// Inverse of [`world_to_pixel`] for continuous coordinates.
#[inline]
pub fn pixel_to_world<T: Scalar>(u: T, v: T, cfg: &BevConfig) -> [T; 2] {
    let rho = T::lit(cfg.resolution);
    let half_h = T::lit(cfg.height as f64 * 0.5);
    let half_w = T::lit(cfg.width as f64 * 0.5);
    [(half_h - u) * rho, (v - half_w) * rho]
}

/// Metric position of the center of pixel `(row, col)`.
#[inline]
pub fn pixel_center_to_world<T: Scalar>(row: usize, col: usize, cfg: &BevConfig) -> [T; 2] {
    let half = T::lit(0.5);
    pixel_to_world(T::lit(row as f64) + half, T::lit(col as f64) + half, cfg)
}

/// Pixel a metric point falls into, if inside the raster.
#[inline]
pub fn rasterize<T: Scalar>(p: [T; 2], cfg: &BevConfig) -> Option<(usize, usize)> {
    let (u, v) = world_to_pixel(p, cfg);
    let (u, v) = (u.floor(), v.floor());
    if !(u >= T::zero() && v >= T::zero()) {
        return None;
    }
    let (r, c) = (u.to_usize()?, v.to_usize()?);
    (r < cfg.height && c < cfg.width).then_some((r, c))
}

/// Projects a cloud with the default z-band.
pub fn project_bev<T: Scalar>(cloud: &PointCloud2<T>, cfg: &BevConfig, mode: RasterMode) -> BevImage {
    project_bev_with_band(cloud, cfg, mode, ZBand::default())
}

pub fn project_bev_with_band<T: Scalar>(
    cloud: &PointCloud2<T>,
    cfg: &BevConfig,
    mode: RasterMode,
    band: ZBand,
) -> BevImage {
    let mut counts = vec![0u32; cfg.num_pixels()];
    let (zmin, zmax) = (T::lit(band.min), T::lit(band.max));
    for (i, p) in cloud.points.iter().enumerate() {
        if let Some(h) = &cloud.heights {
            if !(h[i] >= zmin && h[i] <= zmax) {
                continue;
            }
        }
        if let Some((r, c)) = rasterize(*p, cfg) {
            counts[r * cfg.width + c] += 1;
        }
    }
    let pixels = match mode {
        RasterMode::Occupancy => counts.iter().map(|&n| if n > 0 { 1.0 } else { 0.0 }).collect(),
        RasterMode::LogCount => {
            let n_max = counts.iter().copied().max().unwrap_or(0);
            if n_max == 0 {
                vec![0.0; counts.len()]
            } else {
                let denom = (n_max as f64).ln_1p();
                counts.iter().map(|&n| ((n as f64).ln_1p() / denom) as f32).collect()
            }
        }
    };
    BevImage {
        config: *cfg,
        pixels,
        modality: Modality::Lidar,
    }
}

/// Rotates every point by `t.theta`, then translates by `(t.x, t.y)`. Channels are kept.
pub fn transform_cloud<T: Scalar>(t: &Pose2<T>, cloud: &PointCloud2<T>) -> PointCloud2<T> {
    PointCloud2 {
        points: cloud.points.iter().map(|&p| t.transform_point(p)).collect(),
        heights: cloud.heights.clone(),
        intensity: cloud.intensity.clone(),
    }
}
