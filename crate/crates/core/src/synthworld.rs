//! Deterministic planar worlds of walls and poles, with LiDAR and radar renderers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BevConfig, BevImage, Modality, PointCloud2, Pose2};

#[derive(Debug, Error, PartialEq)]
pub enum WorldError {
    #[error("world needs at least one wall or pole")]
    EmptyWorld,
    #[error("extent must be positive, got {0}")]
    BadExtent(f64),
    #[error("trajectory pose {index} at ({x:.2}, {y:.2}) lies outside the world")]
    PoseOutside { index: usize, x: f64, y: f64 },
    #[error("invalid noise parameter: {0}")]
    BadNoise(&'static str),
}

/// Minimum distance kept between landmarks and the trajectory.
pub const TRAJECTORY_CLEARANCE: f64 = 2.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub seed: u64,
    /// Side of the square `[0, extent]^2`, meters.
    pub extent: f64,
    pub n_walls: usize,
    pub n_poles: usize,
    pub trajectory: Vec<Pose2<f64>>,
}

impl WorldSpec {
    pub fn validate(&self) -> Result<(), WorldError> {
        if !(self.extent > 0.0) {
            return Err(WorldError::BadExtent(self.extent));
        }
        if self.n_walls + self.n_poles == 0 {
            return Err(WorldError::EmptyWorld);
        }
        for (index, p) in self.trajectory.iter().enumerate() {
            if !(p.x >= 0.0 && p.x <= self.extent && p.y >= 0.0 && p.y <= self.extent) {
                return Err(WorldError::PoseOutside { index, x: p.x, y: p.y });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorNoise {
    pub lidar_dropout: f64,
    /// Range jitter standard deviation, meters.
    pub lidar_jitter: f64,
    /// Multiplicative speckle standard deviation.
    pub radar_speckle: f64,
    /// Gaussian blur of the polar image, in bins.
    pub radar_blur: f64,
    /// Per-azimuth probability of a spurious return.
    pub radar_ghost_prob: f64,
}

impl SensorNoise {
    pub fn none() -> Self {
        Self {
            lidar_dropout: 0.0,
            lidar_jitter: 0.0,
            radar_speckle: 0.0,
            radar_blur: 0.0,
            radar_ghost_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.lidar_dropout) || !prob(self.radar_ghost_prob) {
            return Err(WorldError::BadNoise("probabilities must lie in [0, 1]"));
        }
        if !(self.lidar_jitter >= 0.0 && self.radar_speckle >= 0.0 && self.radar_blur >= 0.0) {
            return Err(WorldError::BadNoise("standard deviations must be non-negative"));
        }
        Ok(())
    }
}

impl Default for SensorNoise {
    fn default() -> Self {
        Self {
            lidar_dropout: 0.1,
            lidar_jitter: 0.03,
            radar_speckle: 0.3,
            radar_blur: 1.0,
            radar_ghost_prob: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: [f64; 2],
    pub b: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pole {
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub extent: f64,
    pub walls: Vec<Segment>,
    pub poles: Vec<Pole>,
}

fn point_segment_distance(p: [f64; 2], s: &Segment) -> f64 {
    let d = [s.b[0] - s.a[0], s.b[1] - s.a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 > 0.0 {
        (((p[0] - s.a[0]) * d[0] + (p[1] - s.a[1]) * d[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p[0] - s.a[0] - t * d[0]).hypot(p[1] - s.a[1] - t * d[1])
}

/// Samples landmarks uniformly in the extent, rejecting any that crowd the trajectory.
pub fn generate_world(spec: &WorldSpec) -> Result<World, WorldError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let e = spec.extent;
    let traj: Vec<[f64; 2]> = spec.trajectory.iter().map(|p| [p.x, p.y]).collect();
    let clear = |dist: &dyn Fn([f64; 2]) -> f64| traj.iter().all(|&t| dist(t) >= TRAJECTORY_CLEARANCE);
    const MAX_TRIES: usize = 200;

    let mut walls = Vec::with_capacity(spec.n_walls);
    for _ in 0..spec.n_walls {
        for _ in 0..MAX_TRIES {
            let c = [rng.random_range(0.0..e), rng.random_range(0.0..e)];
            let len = rng.random_range(3.0..15.0);
            let phi: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let h = [0.5 * len * phi.cos(), 0.5 * len * phi.sin()];
            let s = Segment {
                a: [c[0] - h[0], c[1] - h[1]],
                b: [c[0] + h[0], c[1] + h[1]],
            };
            if clear(&|t| point_segment_distance(t, &s)) {
                walls.push(s);
                break;
            }
        }
    }
    let mut poles = Vec::with_capacity(spec.n_poles);
    for _ in 0..spec.n_poles {
        for _ in 0..MAX_TRIES {
            let c = [rng.random_range(0.0..e), rng.random_range(0.0..e)];
            let radius = rng.random_range(0.15..0.5);
            if clear(&|t| (t[0] - c[0]).hypot(t[1] - c[1]) - radius) {
                poles.push(Pole { center: c, radius });
                break;
            }
        }
    }
    Ok(World {
        extent: e,
        walls,
        poles,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub n_frames: usize,
    /// Distance between consecutive poses, meters.
    pub step: f64,
    /// Curvature bound, 1/m.
    pub max_curvature: f64,
    /// Distance from the border at which the walk turns back inward.
    pub margin: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            n_frames: 300,
            step: 1.0,
            max_curvature: 0.08,
            margin: 20.0,
        }
    }
}

/// Smooth random walk with bounded curvature, starting at the center of the extent.
pub fn generate_trajectory(seed: u64, extent: f64, spec: &TrajectorySpec) -> Vec<Pose2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7472_616a);
    let kappa_noise = Normal::new(0.0, 0.25 * spec.max_curvature).unwrap();
    let center = 0.5 * extent;
    let margin = spec.margin.min(0.25 * extent);
    let mut x = center;
    let mut y = center;
    let mut heading: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let mut kappa = 0.0f64;
    let mut out = Vec::with_capacity(spec.n_frames);
    for _ in 0..spec.n_frames {
        out.push(Pose2::new(x, y, heading));
        let near_edge = x < margin || y < margin || x > extent - margin || y > extent - margin;
        if near_edge {
            let to_center = (center - y).atan2(center - x);
            let err = crate::scalar::wrap_angle(to_center - heading);
            kappa = spec.max_curvature * err.signum();
        } else {
            kappa = (kappa + kappa_noise.sample(&mut rng)).clamp(-spec.max_curvature, spec.max_curvature);
        }
        heading = crate::scalar::wrap_angle(heading + kappa * spec.step);
        x = (x + spec.step * heading.cos()).clamp(0.0, extent);
        y = (y + spec.step * heading.sin()).clamp(0.0, extent);
    }
    out
}

/// Offsets every pose sideways (`+` is to the left of the heading) and along its heading.
pub fn retraverse(trajectory: &[Pose2<f64>], lateral: f64, along: f64) -> Vec<Pose2<f64>> {
    trajectory
        .iter()
        .map(|p| p.compose(&Pose2::new(along, lateral, 0.0)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LidarParams {
    pub beams: usize,
    pub max_range: f64,
}

impl Default for LidarParams {
    fn default() -> Self {
        Self {
            beams: 900,
            max_range: 60.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadarParams {
    pub azimuth_bins: usize,
    /// Range bin size as a fraction of the raster resolution.
    pub range_bin_fraction: f64,
}

impl Default for RadarParams {
    fn default() -> Self {
        Self {
            azimuth_bins: 400,
            range_bin_fraction: 0.5,
        }
    }
}

/// Landmarks near a sensor, for repeated ray casts from one origin.
struct LocalScene<'a> {
    origin: [f64; 2],
    walls: Vec<&'a Segment>,
    poles: Vec<&'a Pole>,
}

impl<'a> LocalScene<'a> {
    fn new(world: &'a World, origin: [f64; 2], range: f64) -> Self {
        Self {
            origin,
            walls: world
                .walls
                .iter()
                .filter(|s| point_segment_distance(origin, s) <= range)
                .collect(),
            poles: world
                .poles
                .iter()
                .filter(|p| (p.center[0] - origin[0]).hypot(p.center[1] - origin[1]) - p.radius <= range)
                .collect(),
        }
    }

    /// First hit along the unit direction `d`: `(range, |cos incidence|)`.
    fn cast(&self, d: [f64; 2], max_range: f64) -> Option<(f64, f64)> {
        let o = self.origin;
        let mut best: Option<(f64, f64)> = None;
        let mut consider = |t: f64, normal: [f64; 2]| {
            if t > 1e-9 && t <= max_range && best.map_or(true, |(b, _)| t < b) {
                let nn = normal[0].hypot(normal[1]).max(1e-12);
                best = Some((t, ((d[0] * normal[0] + d[1] * normal[1]) / nn).abs()));
            }
        };
        for s in &self.walls {
            let e = [s.b[0] - s.a[0], s.b[1] - s.a[1]];
            let denom = d[0] * e[1] - d[1] * e[0];
            if denom.abs() < 1e-12 {
                continue;
            }
            let w = [s.a[0] - o[0], s.a[1] - o[1]];
            let t = (w[0] * e[1] - w[1] * e[0]) / denom;
            let u = (w[0] * d[1] - w[1] * d[0]) / denom;
            if (0.0..=1.0).contains(&u) {
                consider(t, [-e[1], e[0]]);
            }
        }
        for p in &self.poles {
            let w = [o[0] - p.center[0], o[1] - p.center[1]];
            let b = w[0] * d[0] + w[1] * d[1];
            let c = w[0] * w[0] + w[1] * w[1] - p.radius * p.radius;
            let disc = b * b - c;
            if disc < 0.0 {
                continue;
            }
            let t = -b - disc.sqrt();
            let hit = [o[0] + t * d[0] - p.center[0], o[1] + t * d[1] - p.center[1]];
            consider(t, hit);
        }
        best
    }
}

/// 360 degree planar scan from `pose`, returned in the sensor frame.
pub fn render_lidar(
    world: &World,
    pose: &Pose2<f64>,
    noise: &SensorNoise,
    params: &LidarParams,
    seed: u64,
) -> PointCloud2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, noise.lidar_jitter.max(0.0)).unwrap();
    let scene = LocalScene::new(world, [pose.x, pose.y], params.max_range);
    let mut points = Vec::new();
    let mut intensity = Vec::new();
    for k in 0..params.beams {
        let a = -std::f64::consts::PI + std::f64::consts::TAU * k as f64 / params.beams as f64;
        let wa = pose.theta + a;
        // noise draws happen for every beam so the stream does not depend on hits
        let dropped = rng.random::<f64>() < noise.lidar_dropout;
        let dr = jitter.sample(&mut rng);
        let Some((r, cos_inc)) = scene.cast([wa.cos(), wa.sin()], params.max_range) else {
            continue;
        };
        if dropped {
            continue;
        }
        let r = (r + dr).max(0.0);
        points.push([r * a.cos(), r * a.sin()]);
        intensity.push(cos_inc.clamp(0.0, 1.0));
    }
    PointCloud2::new(points).with_intensity(intensity)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let half = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable blur; azimuth (rows) wraps around, range (columns) clamps.
fn blur_polar(img: &mut [f64], n_az: usize, n_rng: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let k = gaussian_kernel(sigma);
    let half = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; img.len()];
    for a in 0..n_az {
        for r in 0..n_rng {
            let mut acc = 0.0;
            for (j, w) in k.iter().enumerate() {
                let rr = (r as isize + j as isize - half).clamp(0, n_rng as isize - 1) as usize;
                acc += w * img[a * n_rng + rr];
            }
            tmp[a * n_rng + r] = acc;
        }
    }
    for a in 0..n_az {
        for r in 0..n_rng {
            let mut acc = 0.0;
            for (j, w) in k.iter().enumerate() {
                let aa = (a as isize + j as isize - half).rem_euclid(n_az as isize) as usize;
                acc += w * tmp[aa * n_rng + r];
            }
            img[a * n_rng + r] = acc;
        }
    }
}

/// Polar power image resampled onto the BEV raster in the sensor frame.
pub fn render_radar(
    world: &World,
    pose: &Pose2<f64>,
    noise: &SensorNoise,
    cfg: &BevConfig,
    params: &RadarParams,
    seed: u64,
) -> BevImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speckle = Normal::new(0.0, noise.radar_speckle.max(0.0)).unwrap();
    let bin = cfg.resolution * params.range_bin_fraction;
    let max_range = cfg.half_diagonal();
    let n_rng = (max_range / bin).ceil() as usize + 1;
    let n_az = params.azimuth_bins;
    let scene = LocalScene::new(world, [pose.x, pose.y], max_range);

    let mut polar = vec![0.0f64; n_az * n_rng];
    for a in 0..n_az {
        let az = -std::f64::consts::PI + std::f64::consts::TAU * (a as f64 + 0.5) / n_az as f64;
        let wa = pose.theta + az;
        if let Some((r, _)) = scene.cast([wa.cos(), wa.sin()], max_range) {
            let b = (r / bin).floor() as usize;
            if b < n_rng {
                polar[a * n_rng + b] = 1.0;
            }
        }
        if rng.random::<f64>() < noise.radar_ghost_prob {
            let b = rng.random_range(0..n_rng);
            let p = rng.random_range(0.3..1.0);
            polar[a * n_rng + b] = f64::max(polar[a * n_rng + b], p);
        }
    }
    if noise.radar_speckle > 0.0 {
        for v in polar.iter_mut().filter(|v| **v > 0.0) {
            *v *= (1.0 + speckle.sample(&mut rng)).max(0.0);
        }
    }
    blur_polar(&mut polar, n_az, n_rng, noise.radar_blur);

    let mut pixels = vec![0.0f32; cfg.num_pixels()];
    for row in 0..cfg.height {
        for col in 0..cfg.width {
            let p: [f64; 2] = crate::geometry::pixel_center_to_world(row, col, cfg);
            let r = p[0].hypot(p[1]);
            let az = p[1].atan2(p[0]);
            let fa = (az + std::f64::consts::PI) / std::f64::consts::TAU * n_az as f64 - 0.5;
            let fr = r / bin - 0.5;
            if fr > n_rng as f64 - 1.0 {
                continue;
            }
            let a0 = fa.floor();
            let wa = fa - a0;
            let a0 = (a0 as isize).rem_euclid(n_az as isize) as usize;
            let a1 = (a0 + 1) % n_az;
            let (r0, wr) = if fr < 0.0 {
                (0usize, 0.0)
            } else {
                (fr.floor() as usize, fr - fr.floor())
            };
            let r1 = (r0 + 1).min(n_rng - 1);
            let s = |a: usize, r: usize| polar[a * n_rng + r];
            let v =
                (1.0 - wa) * ((1.0 - wr) * s(a0, r0) + wr * s(a0, r1)) + wa * ((1.0 - wr) * s(a1, r0) + wr * s(a1, r1));
            pixels[row * cfg.width + col] = v as f32;
        }
    }
    let max = pixels.iter().copied().fold(0.0f32, f32::max);
    if max > 0.0 {
        pixels.iter_mut().for_each(|v| *v = (*v / max).clamp(0.0, 1.0));
    }
    BevImage::from_pixels(*cfg, pixels, Modality::Radar).expect("normalized raster")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project_bev, RasterMode};

    fn spec(seed: u64) -> WorldSpec {
        let trajectory = generate_trajectory(
            seed,
            120.0,
            &TrajectorySpec {
                n_frames: 60,
                ..Default::default()
            },
        );
        WorldSpec {
            seed,
            extent: 120.0,
            n_walls: 40,
            n_poles: 80,
            trajectory,
        }
    }

    #[test]
    fn same_seed_same_world() {
        assert_eq!(generate_world(&spec(3)).unwrap(), generate_world(&spec(3)).unwrap());
    }

    #[test]
    fn different_seed_different_world() {
        assert_ne!(generate_world(&spec(3)).unwrap(), generate_world(&spec(4)).unwrap());
    }

    #[test]
    fn empty_world_rejected() {
        let mut s = spec(1);
        s.n_walls = 0;
        s.n_poles = 0;
        assert_eq!(generate_world(&s), Err(WorldError::EmptyWorld));
    }

    #[test]
    fn trajectory_stays_inside_with_unit_steps() {
        let t = generate_trajectory(9, 150.0, &TrajectorySpec::default());
        assert_eq!(t.len(), 300);
        for w in t.windows(2) {
            assert!((w[0].distance(&w[1]) - 1.0).abs() < 1e-9);
        }
        assert!(t
            .iter()
            .all(|p| p.x >= 0.0 && p.x <= 150.0 && p.y >= 0.0 && p.y <= 150.0));
    }

    #[test]
    fn landmarks_keep_clear_of_trajectory() {
        let s = spec(5);
        let w = generate_world(&s).unwrap();
        for p in &s.trajectory {
            for seg in &w.walls {
                assert!(point_segment_distance([p.x, p.y], seg) >= TRAJECTORY_CLEARANCE);
            }
        }
    }

    fn single_pole() -> World {
        World {
            extent: 100.0,
            walls: vec![],
            poles: vec![Pole {
                center: [5.0, 0.0],
                radius: 0.2,
            }],
        }
    }

    #[test]
    fn lidar_sees_pole_ahead() {
        let cloud = render_lidar(
            &single_pole(),
            &Pose2::identity(),
            &SensorNoise::none(),
            &LidarParams::default(),
            0,
        );
        assert!(!cloud.is_empty());
        for p in &cloud.points {
            let r = p[0].hypot(p[1]);
            assert!((4.8..=5.0).contains(&r), "range {r}");
            assert!(p[0] > 4.7 && p[1].abs() < 0.25);
        }
    }

    #[test]
    fn full_dropout_gives_empty_cloud() {
        let noise = SensorNoise {
            lidar_dropout: 1.0,
            ..SensorNoise::none()
        };
        let cloud = render_lidar(&single_pole(), &Pose2::identity(), &noise, &LidarParams::default(), 0);
        assert!(cloud.is_empty());
    }

    #[test]
    fn renderers_are_deterministic() {
        let s = spec(2);
        let w = generate_world(&s).unwrap();
        let pose = s.trajectory[10];
        let noise = SensorNoise::default();
        let cfg = BevConfig::new(64, 64, 0.5).unwrap();
        assert_eq!(
            render_lidar(&w, &pose, &noise, &LidarParams::default(), 11),
            render_lidar(&w, &pose, &noise, &LidarParams::default(), 11)
        );
        assert_eq!(
            render_radar(&w, &pose, &noise, &cfg, &RadarParams::default(), 11),
            render_radar(&w, &pose, &noise, &cfg, &RadarParams::default(), 11)
        );
    }

    #[test]
    fn radar_pixels_normalized() {
        let s = spec(2);
        let w = generate_world(&s).unwrap();
        let cfg = BevConfig::new(64, 64, 0.5).unwrap();
        let img = render_radar(
            &w,
            &s.trajectory[0],
            &SensorNoise::default(),
            &cfg,
            &RadarParams::default(),
            1,
        );
        assert!(img.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(img.pixels().iter().any(|&v| v == 1.0));
    }

    #[test]
    fn radar_pole_sits_where_lidar_sees_it() {
        let cfg = BevConfig::new(64, 64, 0.5).unwrap();
        let img = render_radar(
            &single_pole(),
            &Pose2::identity(),
            &SensorNoise::none(),
            &cfg,
            &RadarParams::default(),
            0,
        );
        let lidar = project_bev(
            &render_lidar(
                &single_pole(),
                &Pose2::identity(),
                &SensorNoise::none(),
                &LidarParams::default(),
                0,
            ),
            &cfg,
            RasterMode::Occupancy,
        );
        let bright: Vec<usize> = (0..cfg.num_pixels()).filter(|&i| img.pixels()[i] > 0.5).collect();
        assert!(!bright.is_empty());
        assert!(bright.iter().any(|&i| lidar.pixels()[i] > 0.0));
    }
}
