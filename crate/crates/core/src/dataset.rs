//! Frames, LiDAR maps and submaps, triplet sampling and pose augmentation.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project_bev, BevConfig, BevImage, Modality, PointCloud2, Pose2, RasterMode};
use crate::io::{self, IoError};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("no frames")]
    Empty,
    #[error("no sample within {tau_p} m of the anchor")]
    NoPositive { tau_p: f64 },
    #[error("no sample farther than {tau_n} m from the anchor")]
    NoNegative { tau_n: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("descriptor count {descs} does not match pose count {poses}")]
    LengthMismatch { descs: usize, poses: usize },
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Anything anchored at a map pose.
pub trait Located {
    fn id(&self) -> u64;
    fn pose(&self) -> Pose2<f64>;
}

/// One query-side observation: ground truth pose, radar raster, LiDAR scan in the sensor frame.
#[derive(Debug, Clone)]
pub struct Frame {
    pub id: u64,
    pub pose: Pose2<f64>,
    pub radar: BevImage,
    pub lidar_cloud: Arc<PointCloud2<f64>>,
}

impl Located for Frame {
    fn id(&self) -> u64 {
        self.id
    }
    fn pose(&self) -> Pose2<f64> {
        self.pose
    }
}

/// Pose-anchored aggregation of map points, in the submap frame.
#[derive(Debug, Clone)]
pub struct Submap {
    pub id: u64,
    pub pose: Pose2<f64>,
    pub cloud: PointCloud2<f64>,
    pub bev: BevImage,
}

impl Located for Submap {
    fn id(&self) -> u64 {
        self.id
    }
    fn pose(&self) -> Pose2<f64> {
        self.pose
    }
}

/// World-frame LiDAR map with a uniform grid index for radius queries.
#[derive(Debug, Clone)]
pub struct MapCloud {
    cloud: PointCloud2<f64>,
    cell: f64,
    origin: [f64; 2],
    dims: [usize; 2],
    buckets: Vec<Vec<u32>>,
}

impl MapCloud {
    const CELL: f64 = 8.0;

    pub fn new(cloud: PointCloud2<f64>) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in &cloud.points {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        if cloud.is_empty() {
            lo = [0.0; 2];
            hi = [0.0; 2];
        }
        let cell = Self::CELL;
        let dims = [
            ((hi[0] - lo[0]) / cell).floor() as usize + 1,
            ((hi[1] - lo[1]) / cell).floor() as usize + 1,
        ];
        let mut buckets = vec![Vec::new(); dims[0] * dims[1]];
        for (i, p) in cloud.points.iter().enumerate() {
            let cx = ((p[0] - lo[0]) / cell).floor() as usize;
            let cy = ((p[1] - lo[1]) / cell).floor() as usize;
            buckets[cx * dims[1] + cy].push(i as u32);
        }
        Self {
            cloud,
            cell,
            origin: lo,
            dims,
            buckets,
        }
    }

    /// Aggregates every frame's scan into the world frame, optionally thinning to one point per voxel.
    pub fn from_frames(frames: &[Frame], voxel: Option<f64>) -> Self {
        let mut all = PointCloud2::default();
        for f in frames {
            all.extend(&crate::geometry::transform_cloud(&f.pose, &f.lidar_cloud));
        }
        if let Some(v) = voxel.filter(|v| *v > 0.0) {
            let mut seen = std::collections::HashSet::new();
            all = all.filter(|_, p| seen.insert(((p[0] / v).floor() as i64, (p[1] / v).floor() as i64)));
        }
        Self::new(all)
    }

    pub fn cloud(&self) -> &PointCloud2<f64> {
        &self.cloud
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    fn indices_within(&self, center: [f64; 2], radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        if self.cloud.is_empty() {
            return out;
        }
        let range = |c: f64, o: f64, n: usize| {
            let lo = ((c - radius - o) / self.cell).floor().max(0.0) as usize;
            let hi = (((c + radius - o) / self.cell).floor().max(-1.0) as isize).min(n as isize - 1);
            (lo, hi)
        };
        let (x0, x1) = range(center[0], self.origin[0], self.dims[0]);
        let (y0, y1) = range(center[1], self.origin[1], self.dims[1]);
        let r2 = radius * radius;
        for cx in x0 as isize..=x1 {
            for cy in y0 as isize..=y1 {
                for &i in &self.buckets[cx as usize * self.dims[1] + cy as usize] {
                    let p = self.cloud.points[i as usize];
                    let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
                    if dx * dx + dy * dy <= r2 {
                        out.push(i as usize);
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Points within `radius` of `pose`, in world coordinates.
    pub fn within(&self, center: [f64; 2], radius: f64) -> PointCloud2<f64> {
        self.cloud.select(&self.indices_within(center, radius))
    }

    /// Points within `radius` of `pose`, expressed in the `pose` frame.
    pub fn local_view(&self, pose: &Pose2<f64>, radius: f64) -> PointCloud2<f64> {
        crate::geometry::transform_cloud(&pose.inverse(), &self.within([pose.x, pose.y], radius))
    }

    /// LiDAR raster centered at `pose`.
    pub fn render(&self, pose: &Pose2<f64>, cfg: &BevConfig, mode: RasterMode) -> BevImage {
        project_bev(&self.local_view(pose, cfg.half_diagonal() + cfg.resolution), cfg, mode)
    }
}

/// Splits the map along the trajectory: one submap per `spacing` meters of travel.
pub fn build_submaps(
    frames: &[Frame],
    spacing: f64,
    radius: f64,
    cfg: &BevConfig,
    mode: RasterMode,
) -> Result<Vec<Submap>, DatasetError> {
    if frames.is_empty() {
        return Err(DatasetError::Empty);
    }
    if !(spacing > 0.0 && radius > 0.0) {
        return Err(DatasetError::Config(format!(
            "spacing and radius must be positive, got {spacing} and {radius}"
        )));
    }
    let map = MapCloud::from_frames(frames, None);
    let centers = resample_trajectory(&frames.iter().map(|f| f.pose).collect::<Vec<_>>(), spacing);
    Ok(centers
        .into_iter()
        .enumerate()
        .map(|(id, pose)| {
            let cloud = map.local_view(&pose, radius);
            let bev = project_bev(&cloud, cfg, mode);
            Submap {
                id: id as u64,
                pose,
                cloud,
                bev,
            }
        })
        .collect())
}

/// Poses at arc lengths `0, spacing, 2 spacing, ...` along the polyline, linearly interpolated.
pub fn resample_trajectory(poses: &[Pose2<f64>], spacing: f64) -> Vec<Pose2<f64>> {
    let Some(first) = poses.first() else {
        return Vec::new();
    };
    let mut out = vec![*first];
    let mut next = spacing;
    let mut travelled = 0.0;
    // tolerate float drift so a 100 m track at 2 m spacing ends exactly on its last pose
    let eps = 1e-9 * spacing.max(1.0);
    for w in poses.windows(2) {
        let seg = w[0].distance(&w[1]);
        while travelled + seg + eps >= next && seg > 0.0 {
            let t = ((next - travelled) / seg).clamp(0.0, 1.0);
            let theta = w[0].theta + t * w[0].heading_delta(&w[1]);
            out.push(Pose2::new(
                w[0].x + t * (w[1].x - w[0].x),
                w[0].y + t * (w[1].y - w[0].y),
                theta,
            ));
            next += spacing;
        }
        travelled += seg;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletConfig {
    pub margin: f64,
    /// Positive radius, meters.
    pub tau_p: f64,
    /// Negative radius, meters.
    pub tau_n: f64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin: 0.5,
            tau_p: 2.0,
            tau_n: 80.0,
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if !(self.margin > 0.0) {
            return Err(DatasetError::Config("triplet margin must be positive".into()));
        }
        if !(self.tau_p > 0.0 && self.tau_p < self.tau_n) {
            return Err(DatasetError::Config("need 0 < tau_p < tau_n".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    /// Degrees.
    pub max_rot: f64,
    /// Meters.
    pub max_trans: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            max_rot: 30.0,
            max_trans: 5.0,
        }
    }
}

/// Uniformly picks a pool member within `tau_p` of the anchor.
pub fn sample_positive<'a, A: Located, P: Located, R: Rng + ?Sized>(
    anchor: &A,
    pool: &'a [P],
    cfg: &TripletConfig,
    rng: &mut R,
) -> Result<&'a P, DatasetError> {
    let a = anchor.pose();
    let eligible: Vec<&P> = pool.iter().filter(|p| p.pose().distance(&a) <= cfg.tau_p).collect();
    eligible
        .choose(rng)
        .copied()
        .ok_or(DatasetError::NoPositive { tau_p: cfg.tau_p })
}

fn squared_l2<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
}

/// Index of the batch sample with the smallest descriptor distance among those
/// farther than `tau_n` from the anchor. Ties resolve to the lowest index.
pub fn mine_hardest_negative<T: Scalar, D: AsRef<[T]>>(
    anchor_desc: &[T],
    anchor_pose: &Pose2<f64>,
    batch_descs: &[D],
    poses: &[Pose2<f64>],
    cfg: &TripletConfig,
) -> Result<usize, DatasetError> {
    if batch_descs.len() != poses.len() {
        return Err(DatasetError::LengthMismatch {
            descs: batch_descs.len(),
            poses: poses.len(),
        });
    }
    let mut best: Option<(usize, T)> = None;
    for (i, (d, p)) in batch_descs.iter().zip(poses).enumerate() {
        if p.distance(anchor_pose) <= cfg.tau_n {
            continue;
        }
        let dist = squared_l2(anchor_desc, d.as_ref());
        if best.map_or(true, |(_, b)| dist < b) {
            best = Some((i, dist));
        }
    }
    best.map(|(i, _)| i)
        .ok_or(DatasetError::NoNegative { tau_n: cfg.tau_n })
}

/// `T_GT ∘ Δ` with `Δ` uniform in `±max_trans` (x and y) and `±max_rot` degrees.
pub fn perturb_pose<R: Rng + ?Sized>(t_gt: &Pose2<f64>, spec: &AugmentSpec, rng: &mut R) -> Pose2<f64> {
    let u = |rng: &mut R, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let dx = u(rng, spec.max_trans);
    let dy = u(rng, spec.max_trans);
    let dtheta = u(rng, spec.max_rot).to_radians();
    t_gt.compose(&Pose2::new(dx, dy, dtheta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub resolution: f64,
}

/// Frame file stem: zero-padded id.
pub fn frame_stem(id: u64) -> String {
    format!("{id:04}")
}

/// Writes `poses.csv`, `lidar/NNNN.rlfc`, `radar/NNNN.pgm` and `meta.json`.
pub fn write_sequence(dir: &Path, frames: &[Frame]) -> Result<(), DatasetError> {
    let mkdir = |p: &Path| {
        fs::create_dir_all(p).map_err(|source| DatasetError::File {
            path: p.display().to_string(),
            source,
        })
    };
    mkdir(&dir.join("lidar"))?;
    mkdir(&dir.join("radar"))?;
    let poses: Vec<(u64, Pose2<f64>)> = frames.iter().map(|f| (f.id, f.pose)).collect();
    io::write_poses_csv(dir.join("poses.csv"), &poses)?;
    for f in frames {
        let stem = frame_stem(f.id);
        io::write_rlfc(dir.join("lidar").join(format!("{stem}.rlfc")), &f.lidar_cloud)?;
        io::write_pgm16(dir.join("radar").join(format!("{stem}.pgm")), &f.radar)?;
    }
    if let Some(f) = frames.first() {
        let meta = SequenceMeta {
            resolution: f.radar.config().resolution,
        };
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?).map_err(|source| {
            DatasetError::File {
                path: dir.join("meta.json").display().to_string(),
                source,
            }
        })?;
    }
    Ok(())
}

/// Loads a sequence written by [`write_sequence`]; without `meta.json` the resolution defaults to 0.5 m.
pub fn load_sequence(dir: &Path) -> Result<Vec<Frame>, DatasetError> {
    let resolution = match fs::read_to_string(dir.join("meta.json")) {
        Ok(s) => serde_json::from_str::<SequenceMeta>(&s)?.resolution,
        Err(_) => BevConfig::default().resolution,
    };
    let poses = io::read_poses_csv(dir.join("poses.csv"))?;
    if poses.is_empty() {
        return Err(DatasetError::Empty);
    }
    poses
        .into_iter()
        .map(|(id, pose)| {
            let stem = frame_stem(id);
            let radar = io::read_pgm(
                dir.join("radar").join(format!("{stem}.pgm")),
                resolution,
                Modality::Radar,
            )?;
            let lidar = io::read_rlfc(dir.join("lidar").join(format!("{stem}.rlfc")))?;
            Ok(Frame {
                id,
                pose,
                radar,
                lidar_cloud: Arc::new(lidar),
            })
        })
        .collect()
}
