//! Shared descriptor head and the cross-modal triplet objective.

use candle_core::{Result, Tensor, D};
use ralf_core::dataset::{mine_hardest_negative, TripletConfig};
use ralf_core::geometry::{Modality, Pose2};

use crate::ops::{l2_normalize, relu};
use crate::params::{Conv2d, Norm, NormKind, ParamStore};
use crate::NetError;

pub const HEAD_WIDTHS: [usize; 4] = [256, 128, 128, 128];

/// Four stride-2 conv/BN/ReLU layers, global average pooling and L2 normalization.
/// One instance serves both modalities.
#[derive(Debug, Clone)]
pub struct DescriptorHead {
    layers: Vec<(Conv2d, Norm)>,
}

impl DescriptorHead {
    pub fn new(ps: &mut ParamStore, name: &str, in_dim: usize, widths: [usize; 4]) -> Result<Self> {
        let mut cin = in_dim;
        let mut layers = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            layers.push((
                Conv2d::square(ps, &format!("{name}.conv{i}"), cin, w, 3, 2)?,
                Norm::new(ps, &format!("{name}.norm{i}"), NormKind::Batch, w)?,
            ));
            cin = w;
        }
        Ok(Self { layers })
    }

    pub fn dim(&self) -> usize {
        self.layers.last().map_or(0, |(c, _)| c.weight.dims()[0])
    }

    /// `(B, D, h, w)` features to `(B, K)` unit descriptors.
    pub fn forward(&self, f: &Tensor, train: bool) -> Result<Tensor> {
        let mut x = f.clone();
        for (conv, norm) in &self.layers {
            x = relu(&norm.forward(&conv.forward(&x)?, train)?)?;
        }
        l2_normalize(&x.mean(D::Minus1)?.mean(D::Minus1)?)
    }
}

/// Row-wise L2 distance; the small constant keeps the gradient finite at zero.
pub fn l2_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    ((a - b)?.sqr()?.sum(D::Minus1)? + 1e-12)?.sqrt()
}

/// Per-row `max(d(a, p) - d(a, n) + margin, 0)`.
pub fn triplet_loss(a: &Tensor, p: &Tensor, n: &Tensor, margin: f64) -> Result<Tensor> {
    ((l2_distance(a, p)? - l2_distance(a, n)?)? + margin)?.relu()
}

/// The eight (anchor, positive, negative) modality combinations, in a fixed order.
pub const COMBINATIONS: [[Modality; 3]; 8] = {
    use Modality::{Lidar as L, Radar as R};
    [
        [R, R, R],
        [R, L, L],
        [R, L, R],
        [R, R, L],
        [L, L, L],
        [L, R, R],
        [L, R, L],
        [L, L, R],
    ]
};

pub fn combination_name(c: &[Modality; 3]) -> String {
    c.iter()
        .map(|m| match m {
            Modality::Radar => 'R',
            Modality::Lidar => 'L',
        })
        .collect()
}

/// Descriptors of a batch of (anchor, positive) pairs in both modalities, each `(B, K)`.
#[derive(Debug, Clone)]
pub struct PairDescriptors<'a> {
    pub radar_anchor: &'a Tensor,
    pub lidar_anchor: &'a Tensor,
    pub radar_positive: &'a Tensor,
    pub lidar_positive: &'a Tensor,
    pub anchor_poses: &'a [Pose2<f64>],
    pub positive_poses: &'a [Pose2<f64>],
}

impl PairDescriptors<'_> {
    fn anchors(&self, m: Modality) -> &Tensor {
        match m {
            Modality::Radar => self.radar_anchor,
            Modality::Lidar => self.lidar_anchor,
        }
    }

    fn positives(&self, m: Modality) -> &Tensor {
        match m {
            Modality::Radar => self.radar_positive,
            Modality::Lidar => self.lidar_positive,
        }
    }
}

/// One batch-mean triplet term per combination, in [`COMBINATIONS`] order.
///
/// Negatives for anchor `i` are mined among all anchors and positives of the
/// batch (in the negative modality) lying farther than `tau_n` from it.
pub fn pr_loss_terms(batch: &PairDescriptors<'_>, cfg: &TripletConfig) -> std::result::Result<Vec<Tensor>, NetError> {
    let b = batch.anchor_poses.len();
    if batch.positive_poses.len() != b {
        return Err(NetError::Shape("anchor and positive pose counts differ".into()));
    }
    let pool_poses: Vec<_> = batch.anchor_poses.iter().chain(batch.positive_poses).copied().collect();
    let mut terms = Vec::with_capacity(COMBINATIONS.len());
    for [ma, mp, mn] in COMBINATIONS {
        let anchors = batch.anchors(ma);
        let pool = Tensor::cat(&[batch.anchors(mn), batch.positives(mn)], 0)?;
        let anchor_vals: Vec<Vec<f64>> = anchors.detach().to_dtype(candle_core::DType::F64)?.to_vec2()?;
        let pool_vals: Vec<Vec<f64>> = pool.detach().to_dtype(candle_core::DType::F64)?.to_vec2()?;
        let mut idx = Vec::with_capacity(b);
        for (i, a) in anchor_vals.iter().enumerate() {
            idx.push(mine_hardest_negative(a, &batch.anchor_poses[i], &pool_vals, &pool_poses, cfg)? as u32);
        }
        let idx = Tensor::from_vec(idx, b, pool.device())?;
        let negatives = pool.index_select(&idx, 0)?;
        terms.push(triplet_loss(anchors, batch.positives(mp), &negatives, cfg.margin)?.mean_all()?);
    }
    Ok(terms)
}

/// Sum of the eight triplet terms.
pub fn pr_loss(batch: &PairDescriptors<'_>, cfg: &TripletConfig) -> std::result::Result<Tensor, NetError> {
    pr_loss_weighted(batch, cfg, &[1.0; 8])
}

/// `sum_i weights[i] * term_i`.
pub fn pr_loss_weighted(
    batch: &PairDescriptors<'_>,
    cfg: &TripletConfig,
    weights: &[f64; 8],
) -> std::result::Result<Tensor, NetError> {
    let terms = pr_loss_terms(batch, cfg)?;
    let mut total = (terms[0].clone() * weights[0])?;
    for (t, &w) in terms.iter().zip(weights).skip(1) {
        total = (total + (t * w)?)?;
    }
    Ok(total)
}
