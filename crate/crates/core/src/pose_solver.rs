//! Flow-to-pose: correspondences, forward warping and RANSAC rigid fitting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::FlowMap;
use crate::geometry::{pixel_to_world, BevConfig, BevImage, Pose2};
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum PoseError {
    #[error("need at least 2 correspondences, got {0}")]
    TooFewPairs(usize),
    #[error("best hypothesis has {found} inliers, {required} required")]
    InsufficientInliers { found: usize, required: usize },
    #[error("image is {image:?} but flow is {flow:?}")]
    DimensionMismatch {
        image: (usize, usize),
        flow: (usize, usize),
    },
}

/// Point pairs `(source in the submap frame, target in the radar frame)`, meters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrespondenceSet<T> {
    pub pairs: Vec<([T; 2], [T; 2])>,
}

impl<T: Scalar> CorrespondenceSet<T> {
    pub fn new(pairs: Vec<([T; 2], [T; 2])>) -> Self {
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Correspondences `(p, t(p))` for the given source points.
    pub fn from_transform(t: &Pose2<T>, sources: &[[T; 2]]) -> Self {
        Self {
            pairs: sources.iter().map(|&s| (s, t.transform_point(s))).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    /// Meters.
    pub inlier_threshold: f64,
    pub max_iterations: usize,
    pub min_inliers: usize,
    pub rng_seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            inlier_threshold: 0.75,
            max_iterations: 1000,
            min_inliers: 10,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseEstimate<T> {
    /// Maps sources onto targets: `target ≈ pose · source`.
    pub pose: Pose2<T>,
    pub inliers: usize,
}

fn check_dims(img: &BevImage, flow: &FlowMap) -> Result<(), PoseError> {
    if img.height() != flow.height() || img.width() != flow.width() {
        return Err(PoseError::DimensionMismatch {
            image: (img.height(), img.width()),
            flow: (flow.height(), flow.width()),
        });
    }
    Ok(())
}

/// One pair per non-zero LiDAR pixel with valid flow: the pixel center and its flowed position.
pub fn flow_to_correspondences<T: Scalar>(
    lidar: &BevImage,
    flow: &FlowMap,
    cfg: &BevConfig,
) -> Result<CorrespondenceSet<T>, PoseError> {
    check_dims(lidar, flow)?;
    let half = T::lit(0.5);
    let mut pairs = Vec::new();
    for r in 0..lidar.height() {
        for c in 0..lidar.width() {
            if lidar.get(r, c) <= 0.0 || !flow.is_valid(r, c) {
                continue;
            }
            let (du, dv) = flow.get(r, c);
            let (u, v) = (T::lit(r as f64) + half, T::lit(c as f64) + half);
            let src = pixel_to_world(u, v, cfg);
            let dst = pixel_to_world(u + T::lit(du as f64), v + T::lit(dv as f64), cfg);
            pairs.push((src, dst));
        }
    }
    Ok(CorrespondenceSet { pairs })
}

/// Forward-splats every non-zero pixel to its rounded flowed position; collisions keep the max.
pub fn warp_image(lidar: &BevImage, flow: &FlowMap) -> Result<BevImage, PoseError> {
    check_dims(lidar, flow)?;
    let (h, w) = (lidar.height() as i64, lidar.width() as i64);
    let mut out = BevImage::zeros(*lidar.config(), lidar.modality());
    for r in 0..lidar.height() {
        for c in 0..lidar.width() {
            let val = lidar.get(r, c);
            if val <= 0.0 || !flow.is_valid(r, c) {
                continue;
            }
            let (du, dv) = flow.get(r, c);
            let tr = (r as f32 + du).round() as i64;
            let tc = (c as f32 + dv).round() as i64;
            if (0..h).contains(&tr) && (0..w).contains(&tc) {
                let (tr, tc) = (tr as usize, tc as usize);
                if val > out.get(tr, tc) {
                    out.set(tr, tc, val);
                }
            }
        }
    }
    Ok(out)
}

/// Exact rigid transform from two pairs; `None` when either point pair is (nearly) coincident.
pub fn solve_two_point<T: Scalar>(a: ([T; 2], [T; 2]), b: ([T; 2], [T; 2])) -> Option<Pose2<T>> {
    let ds = [b.0[0] - a.0[0], b.0[1] - a.0[1]];
    let dt = [b.1[0] - a.1[0], b.1[1] - a.1[1]];
    let eps = T::lit(1e-9);
    if ds[0].hypot(ds[1]) < eps || dt[0].hypot(dt[1]) < eps {
        return None;
    }
    let theta = dt[1].atan2(dt[0]) - ds[1].atan2(ds[0]);
    let half = T::lit(0.5);
    let cs = [(a.0[0] + b.0[0]) * half, (a.0[1] + b.0[1]) * half];
    let ct = [(a.1[0] + b.1[0]) * half, (a.1[1] + b.1[1]) * half];
    Some(translation_from_centroids(theta, cs, ct))
}

fn translation_from_centroids<T: Scalar>(theta: T, cs: [T; 2], ct: [T; 2]) -> Pose2<T> {
    let (s, c) = theta.sin_cos();
    Pose2::new(ct[0] - (c * cs[0] - s * cs[1]), ct[1] - (s * cs[0] + c * cs[1]), theta)
}

/// Closed-form least-squares rigid fit: the rotation is the orthogonal polar factor of the
/// 2x2 cross-covariance of the centered point sets.
pub fn fit_rigid<'a, T: Scalar, I>(pairs: I) -> Option<Pose2<T>>
where
    I: IntoIterator<Item = &'a ([T; 2], [T; 2])> + Clone,
{
    let mut n = 0usize;
    let (mut cs, mut ct) = ([T::zero(); 2], [T::zero(); 2]);
    for (s, t) in pairs.clone() {
        n += 1;
        for k in 0..2 {
            cs[k] = cs[k] + s[k];
            ct[k] = ct[k] + t[k];
        }
    }
    if n < 2 {
        return None;
    }
    let nf = T::lit(n as f64);
    cs = [cs[0] / nf, cs[1] / nf];
    ct = [ct[0] / nf, ct[1] / nf];
    // h[i][j] = sum (s - cs)_i (t - ct)_j
    let mut h = [[T::zero(); 2]; 2];
    for (s, t) in pairs {
        let a = [s[0] - cs[0], s[1] - cs[1]];
        let b = [t[0] - ct[0], t[1] - ct[1]];
        for i in 0..2 {
            for j in 0..2 {
                h[i][j] = h[i][j] + a[i] * b[j];
            }
        }
    }
    let sin_part = h[0][1] - h[1][0];
    let cos_part = h[0][0] + h[1][1];
    if sin_part.abs() + cos_part.abs() < T::lit(1e-12) {
        return None;
    }
    Some(translation_from_centroids(sin_part.atan2(cos_part), cs, ct))
}

#[inline]
fn residual<T: Scalar>(pose: &Pose2<T>, pair: &([T; 2], [T; 2])) -> T {
    let p = pose.transform_point(pair.0);
    (p[0] - pair.1[0]).hypot(p[1] - pair.1[1])
}

/// Inlier indices and the sum of their residuals.
fn score<T: Scalar>(pose: &Pose2<T>, c: &CorrespondenceSet<T>, thr: T) -> (Vec<usize>, T) {
    let mut idx = Vec::new();
    let mut sum = T::zero();
    for (i, pair) in c.pairs.iter().enumerate() {
        let r = residual(pose, pair);
        if r < thr {
            idx.push(i);
            sum = sum + r;
        }
    }
    (idx, sum)
}

fn mean_residual<T: Scalar>(pose: &Pose2<T>, c: &CorrespondenceSet<T>, idx: &[usize]) -> T {
    let sum = idx.iter().fold(T::zero(), |acc, &i| acc + residual(pose, &c.pairs[i]));
    sum / T::lit(idx.len().max(1) as f64)
}

/// Iteration `i` always draws from its own stream, so results do not depend on evaluation order.
fn sample_pair(seed: u64, iteration: usize, n: usize) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    let a = rng.random_range(0..n);
    let mut b = rng.random_range(0..n - 1);
    if b >= a {
        b += 1;
    }
    (a, b)
}

/// Best 2-point hypothesis (most inliers, then lowest inlier residual sum) and its inliers.
fn ransac_search<T: Scalar>(c: &CorrespondenceSet<T>, cfg: &RansacConfig) -> Option<(Pose2<T>, Vec<usize>)> {
    let n = c.len();
    let thr = T::lit(cfg.inlier_threshold);
    let mut best: Option<(Pose2<T>, Vec<usize>, T)> = None;
    for it in 0..cfg.max_iterations.max(1) {
        let (a, b) = sample_pair(cfg.rng_seed, it, n);
        let Some(hyp) = solve_two_point(c.pairs[a], c.pairs[b]) else {
            continue;
        };
        let (idx, sum) = score(&hyp, c, thr);
        let better = match &best {
            None => true,
            Some((_, bi, bs)) => idx.len() > bi.len() || (idx.len() == bi.len() && sum < *bs),
        };
        if better {
            let all = idx.len() == n;
            best = Some((hyp, idx, sum));
            if all {
                break;
            }
        }
    }
    best.map(|(h, idx, _)| (h, idx))
}

/// The least-squares refit is kept only if it lowers the mean inlier residual.
fn refine<T: Scalar>(c: &CorrespondenceSet<T>, hyp: Pose2<T>, idx: &[usize]) -> Pose2<T> {
    match fit_rigid(idx.iter().map(|&i| &c.pairs[i]).collect::<Vec<_>>()) {
        Some(refit) if mean_residual(&refit, c, idx) <= mean_residual(&hyp, c, idx) => refit,
        _ => hyp,
    }
}

/// RANSAC over 2-point rigid hypotheses, then a least-squares refit on the consensus set.
pub fn estimate_pose<T: Scalar>(c: &CorrespondenceSet<T>, cfg: &RansacConfig) -> Result<PoseEstimate<T>, PoseError> {
    let n = c.len();
    if n < 2 {
        return Err(PoseError::TooFewPairs(n));
    }
    let Some((hyp, idx)) = ransac_search(c, cfg) else {
        return Err(PoseError::InsufficientInliers {
            found: 0,
            required: cfg.min_inliers,
        });
    };
    let pose = refine(c, hyp, &idx);
    let inliers = score(&pose, c, T::lit(cfg.inlier_threshold)).0.len();
    if inliers < cfg.min_inliers {
        return Err(PoseError::InsufficientInliers {
            found: inliers,
            required: cfg.min_inliers,
        });
    }
    Ok(PoseEstimate { pose, inliers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Modality;
    use proptest::prelude::*;

    fn grid_points(n: usize) -> Vec<[f64; 2]> {
        (0..n)
            .map(|i| [((i * 37) % 61) as f64 * 0.5 - 15.0, ((i * 53) % 47) as f64 * 0.6 - 14.0])
            .collect()
    }

    fn cfg() -> BevConfig {
        BevConfig::new(16, 16, 0.5).unwrap()
    }

    #[test]
    fn two_point_solver_is_exact() {
        let t = Pose2::<f64>::from_degrees(1.0, -0.5, 10.0);
        let (a, b) = ([1.0, 2.0], [-3.0, 0.5]);
        let est = solve_two_point((a, t.transform_point(a)), (b, t.transform_point(b))).unwrap();
        assert!((est.x - t.x).abs() < 1e-12 && (est.y - t.y).abs() < 1e-12);
        assert!((est.theta - t.theta).abs() < 1e-12);
        assert!(solve_two_point((a, a), (a, b)).is_none());
    }

    #[test]
    fn recovers_known_transform() {
        let t = Pose2::from_degrees(1.0, -0.5, 10.0);
        let c = CorrespondenceSet::from_transform(&t, &grid_points(200));
        let est = estimate_pose(&c, &RansacConfig::default()).unwrap();
        assert!((est.pose.x - 1.0).abs() < 1e-6 && (est.pose.y + 0.5).abs() < 1e-6);
        assert!((est.pose.theta - 10f64.to_radians()).abs() < 1e-6);
        assert_eq!(est.inliers, 200);
    }

    #[test]
    fn identity_correspondences() {
        let c = CorrespondenceSet::from_transform(&Pose2::identity(), &grid_points(50));
        let est = estimate_pose(&c, &RansacConfig::default()).unwrap();
        assert!(est.pose.x.abs() < 1e-9 && est.pose.y.abs() < 1e-9 && est.pose.theta.abs() < 1e-9);
        assert_eq!(est.inliers, 50);
    }

    #[test]
    fn error_paths() {
        let one = CorrespondenceSet::new(vec![([0.0, 0.0], [1.0, 1.0])]);
        assert_eq!(
            estimate_pose(&one, &RansacConfig::default()),
            Err(PoseError::TooFewPairs(1))
        );
        let few = CorrespondenceSet::from_transform(&Pose2::identity(), &grid_points(5));
        assert!(matches!(
            estimate_pose(&few, &RansacConfig::default()),
            Err(PoseError::InsufficientInliers { found: 5, required: 10 })
        ));
        // every source coincides: all samples degenerate
        let same = CorrespondenceSet::new(vec![([1.0, 1.0], [2.0, 2.0]); 20]);
        assert!(matches!(
            estimate_pose(&same, &RansacConfig::default()),
            Err(PoseError::InsufficientInliers { found: 0, .. })
        ));
    }

    #[test]
    fn outliers_are_rejected() {
        use rand::{Rng, SeedableRng};
        let t = Pose2::from_degrees(-2.0, 3.0, -25.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let mut pairs = CorrespondenceSet::from_transform(&t, &grid_points(700)).pairs;
        for _ in 0..300 {
            let s = [rng.random_range(-32.0..32.0), rng.random_range(-32.0..32.0)];
            let d = [rng.random_range(-32.0..32.0), rng.random_range(-32.0..32.0)];
            pairs.push((s, d));
        }
        let est = estimate_pose(&CorrespondenceSet::new(pairs), &RansacConfig::default()).unwrap();
        assert!((est.pose.x - t.x).abs() < 1e-3 && (est.pose.y - t.y).abs() < 1e-3);
        assert!((est.pose.theta - t.theta).abs() < 1e-4);
        assert!((est.inliers as f64 - 700.0).abs() <= 5.0, "{}", est.inliers);
    }

    #[test]
    fn deterministic_given_seed() {
        let t = Pose2::from_degrees(0.3, 0.1, 5.0);
        let mut pairs = CorrespondenceSet::from_transform(&t, &grid_points(100)).pairs;
        for (i, p) in pairs.iter_mut().enumerate().take(30) {
            p.1 = [i as f64, -(i as f64)];
        }
        let c = CorrespondenceSet::new(pairs);
        let cfg = RansacConfig {
            rng_seed: 7,
            ..Default::default()
        };
        assert_eq!(estimate_pose(&c, &cfg), estimate_pose(&c, &cfg));
    }

    #[test]
    fn zero_flow_pairs_coincide() {
        let mut img = BevImage::zeros(cfg(), Modality::Lidar);
        img.set(3, 4, 1.0);
        img.set(10, 12, 0.5);
        let flow = FlowMap::uniform(16, 16, 0.0, 0.0);
        let c: CorrespondenceSet<f64> = flow_to_correspondences(&img, &flow, &cfg()).unwrap();
        assert_eq!(c.len(), 2);
        assert!(c.pairs.iter().all(|(s, t)| s == t));
    }

    #[test]
    fn two_pixel_flow_moves_targets_one_meter() {
        let mut img = BevImage::zeros(cfg(), Modality::Lidar);
        img.set(5, 5, 1.0);
        img.set(8, 2, 1.0);
        for (du, dv) in [(2.0, 0.0), (0.0, -2.0)] {
            let flow = FlowMap::uniform(16, 16, du, dv);
            let c: CorrespondenceSet<f64> = flow_to_correspondences(&img, &flow, &cfg()).unwrap();
            for (s, t) in &c.pairs {
                assert!(((t[0] - s[0]).hypot(t[1] - s[1]) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn correspondence_count_matches_nonzero_valid_pixels() {
        let mut img = BevImage::zeros(cfg(), Modality::Lidar);
        let mut flow = FlowMap::uniform(16, 16, 1.0, 1.0);
        for k in 0..10 {
            img.set(k, k + 1, 1.0);
        }
        flow.invalidate(0, 1);
        flow.invalidate(15, 15);
        let c: CorrespondenceSet<f32> = flow_to_correspondences(&img, &flow, &cfg()).unwrap();
        assert_eq!(c.len(), 9);
        let bad = FlowMap::uniform(8, 8, 0.0, 0.0);
        assert!(flow_to_correspondences::<f64>(&img, &bad, &cfg()).is_err());
    }

    #[test]
    fn warp_examples() {
        let mut img = BevImage::zeros(cfg(), Modality::Lidar);
        img.set(3, 4, 1.0);
        img.set(7, 7, 0.5);
        assert_eq!(warp_image(&img, &FlowMap::uniform(16, 16, 0.0, 0.0)).unwrap(), img);

        let shifted = warp_image(&img, &FlowMap::uniform(16, 16, 2.0, -3.0)).unwrap();
        assert_eq!(shifted.get(5, 1), 1.0);
        assert_eq!(shifted.get(9, 4), 0.5);
        assert_eq!(shifted.count_nonzero(), 2);

        let gone = warp_image(&img, &FlowMap::uniform(16, 16, 100.0, 0.0)).unwrap();
        assert_eq!(gone.count_nonzero(), 0);

        // collision keeps the larger value
        let mut two = BevImage::zeros(cfg(), Modality::Lidar);
        two.set(0, 0, 0.25);
        two.set(0, 1, 0.75);
        let mut flow = FlowMap::uniform(16, 16, 0.0, 0.0);
        flow.set(0, 0, 0.0, 1.0);
        assert_eq!(warp_image(&two, &flow).unwrap().get(0, 1), 0.75);
    }

    fn pose_strategy() -> impl Strategy<Value = Pose2<f64>> {
        (-5.0..5.0f64, -5.0..5.0f64, -0.6..0.6f64).prop_map(|(x, y, t)| Pose2::new(x, y, t))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn equivariant_under_target_rotation(t in pose_strategy(), q in pose_strategy()) {
            let c = CorrespondenceSet::from_transform(&t, &grid_points(60));
            let rotated = CorrespondenceSet::new(
                c.pairs.iter().map(|(s, d)| (*s, q.transform_point(*d))).collect());
            let base = estimate_pose(&c, &RansacConfig::default()).unwrap().pose;
            let moved = estimate_pose(&rotated, &RansacConfig::default()).unwrap().pose;
            let expected = q.compose(&base);
            prop_assert!((moved.x - expected.x).abs() < 1e-6 && (moved.y - expected.y).abs() < 1e-6);
            prop_assert!(crate::scalar::wrap_angle(moved.theta - expected.theta).abs() < 1e-6);
        }

        #[test]
        fn noiseless_inputs_are_all_inliers(t in pose_strategy()) {
            let c = CorrespondenceSet::from_transform(&t, &grid_points(40));
            prop_assert_eq!(estimate_pose(&c, &RansacConfig::default()).unwrap().inliers, 40);
        }

        #[test]
        fn refit_does_not_increase_mean_residual(
            t in pose_strategy(),
            noise in prop::collection::vec((-0.2..0.2f64, -0.2..0.2f64), 40))
        {
            let pts = grid_points(40);
            let pairs: Vec<_> = pts.iter().zip(&noise).map(|(&s, &(nx, ny))| {
                let d = t.transform_point(s);
                (s, [d[0] + nx, d[1] + ny])
            }).collect();
            let c = CorrespondenceSet::new(pairs);
            let (hyp, idx) = ransac_search(&c, &RansacConfig::default()).unwrap();
            let refined = refine(&c, hyp, &idx);
            prop_assert!(mean_residual(&refined, &c, &idx) <= mean_residual(&hyp, &c, &idx));
        }
    }
}
