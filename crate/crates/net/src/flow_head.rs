//! Correlation pyramid, recurrent flow refinement and the sequence loss.

use std::sync::Arc;

use candle_core::{DType, Result, Tensor};
use serde::{Deserialize, Serialize};

use crate::encoders::EncoderSize;
use crate::ops::{corr_lookup, relu, sigmoid, upsample_flow};
use crate::params::{Conv2d, ParamStore};
use crate::NetError;

pub const CORR_LEVELS: usize = 4;
pub const CORR_RADIUS: usize = 4;
pub const UPSAMPLE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowLossConfig {
    pub gamma: f64,
    pub train_iterations: usize,
    pub eval_iterations: usize,
}

impl Default for FlowLossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.8,
            train_iterations: 8,
            eval_iterations: 12,
        }
    }
}

impl FlowLossConfig {
    pub fn validate(&self) -> std::result::Result<(), NetError> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(NetError::Config("gamma must lie in (0, 1]".into()));
        }
        if self.train_iterations == 0 || self.eval_iterations == 0 {
            return Err(NetError::Config("flow iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// All-pairs correlation between LiDAR and radar features, average-pooled over the radar grid.
#[derive(Debug, Clone)]
pub struct CorrelationPyramid {
    /// Level `l` has shape `(B*h*w, h_l, w_l)`.
    pub levels: Vec<Tensor>,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl CorrelationPyramid {
    /// Level 0 entry `(b, i*w + j, k, l)` is `<f_l(i, j), f_r(k, l)> / sqrt(D)`. Pooling
    /// stops halving a dimension once it reaches 1.
    pub fn new(f_lidar: &Tensor, f_radar: &Tensor, num_levels: usize) -> std::result::Result<Self, NetError> {
        if f_lidar.dims() != f_radar.dims() {
            return Err(NetError::Shape(format!(
                "feature maps differ: {:?} vs {:?}",
                f_lidar.dims(),
                f_radar.dims()
            )));
        }
        let (b, d, h, w) = f_lidar.dims4()?;
        let l = f_lidar.reshape((b, d, h * w))?.transpose(1, 2)?;
        let r = f_radar.reshape((b, d, h * w))?;
        let corr = (l.matmul(&r)? / (d as f64).sqrt())?;
        let mut cur = corr.reshape((b * h * w, 1, h, w))?;
        let mut levels = Vec::with_capacity(num_levels);
        for _ in 0..num_levels {
            let (_, _, hl, wl) = cur.dims4()?;
            levels.push(cur.reshape((b * h * w, hl, wl))?);
            let (kh, kw) = (if hl >= 2 { 2 } else { 1 }, if wl >= 2 { 2 } else { 1 });
            cur = cur.avg_pool2d_with_stride((kh, kw), (kh, kw))?;
        }
        Ok(Self {
            levels,
            batch: b,
            height: h,
            width: w,
        })
    }

    /// Concatenated lookups `(B, levels*(2r+1)^2, h, w)` around `coords` (`B*h*w` row/col pairs).
    pub fn lookup(&self, coords: Arc<Vec<f64>>, radius: usize) -> Result<Tensor> {
        let grid = (self.batch, self.height, self.width);
        let parts = self
            .levels
            .iter()
            .enumerate()
            .map(|(i, lvl)| corr_lookup(lvl, coords.clone(), grid, i, radius))
            .collect::<Result<Vec<_>>>()?;
        Tensor::cat(&parts, 1)
    }

    pub fn channels(&self, radius: usize) -> usize {
        self.levels.len() * (2 * radius + 1).pow(2)
    }
}

/// One refinement step: `(hidden, context, correlation features, current flow) -> (hidden', delta)`.
pub trait UpdateBlock {
    fn step(&self, hidden: &Tensor, context: &Tensor, corr: &Tensor, flow: &Tensor) -> Result<(Tensor, Tensor)>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GruKind {
    /// 1x5 then 5x1 gates.
    Separable,
    /// A single 3x3 gate set.
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateConfig {
    pub corr_channels: usize,
    pub hidden: usize,
    pub context: usize,
    pub corr_conv1: usize,
    pub corr_conv2: Option<usize>,
    pub flow_conv1: usize,
    pub flow_conv2: usize,
    /// Motion feature channels, including the two raw flow channels.
    pub motion: usize,
    pub gru: GruKind,
    pub head_hidden: usize,
}

impl UpdateConfig {
    pub fn for_size(size: EncoderSize, corr_channels: usize) -> Self {
        let (hidden, context) = size.context_split();
        let base = Self {
            corr_channels,
            hidden,
            context,
            corr_conv1: 256,
            corr_conv2: Some(192),
            flow_conv1: 128,
            flow_conv2: 64,
            motion: 128,
            gru: GruKind::Separable,
            head_hidden: 256,
        };
        match size {
            EncoderSize::Full => base,
            EncoderSize::Small => Self {
                corr_conv1: 96,
                corr_conv2: None,
                flow_conv1: 64,
                flow_conv2: 32,
                motion: 82,
                gru: GruKind::Square,
                head_hidden: 128,
                ..base
            },
            EncoderSize::Tiny => Self {
                corr_conv1: 64,
                corr_conv2: None,
                flow_conv1: 32,
                flow_conv2: 16,
                motion: 48,
                gru: GruKind::Square,
                head_hidden: 64,
                ..base
            },
        }
    }
}

#[derive(Debug, Clone)]
struct ConvGru {
    z: Conv2d,
    r: Conv2d,
    q: Conv2d,
}

impl ConvGru {
    fn new(ps: &mut ParamStore, name: &str, hidden: usize, input: usize, kernel: (usize, usize)) -> Result<Self> {
        let cin = hidden + input;
        Ok(Self {
            z: Conv2d::fan_in_uniform(ps, &format!("{name}.convz"), cin, hidden, kernel, 1)?,
            r: Conv2d::fan_in_uniform(ps, &format!("{name}.convr"), cin, hidden, kernel, 1)?,
            q: Conv2d::fan_in_uniform(ps, &format!("{name}.convq"), cin, hidden, kernel, 1)?,
        })
    }

    fn forward(&self, h: &Tensor, x: &Tensor) -> Result<Tensor> {
        let hx = Tensor::cat(&[h, x], 1)?;
        let z = sigmoid(&self.z.forward(&hx)?)?;
        let r = sigmoid(&self.r.forward(&hx)?)?;
        let q = self.q.forward(&Tensor::cat(&[&(&r * h)?, x], 1)?)?.tanh()?;
        // (1 - z) h + z q
        h + (&z * (q - h)?)?
    }
}

/// Motion encoder, convolutional GRU and two-layer flow head.
#[derive(Debug, Clone)]
pub struct BasicUpdateBlock {
    cfg: UpdateConfig,
    convc1: Conv2d,
    convc2: Option<Conv2d>,
    convf1: Conv2d,
    convf2: Conv2d,
    conv: Conv2d,
    grus: Vec<ConvGru>,
    head1: Conv2d,
    head2: Conv2d,
}

impl BasicUpdateBlock {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: UpdateConfig) -> Result<Self> {
        let c_out = cfg.corr_conv2.unwrap_or(cfg.corr_conv1);
        let convc2 = match cfg.corr_conv2 {
            Some(c2) => Some(Conv2d::fan_in_uniform(
                ps,
                &format!("{name}.convc2"),
                cfg.corr_conv1,
                c2,
                (3, 3),
                1,
            )?),
            None => None,
        };
        let gru_in = cfg.context + cfg.motion;
        let kernels: &[(usize, usize)] = match cfg.gru {
            GruKind::Separable => &[(1, 5), (5, 1)],
            GruKind::Square => &[(3, 3)],
        };
        let grus = kernels
            .iter()
            .enumerate()
            .map(|(i, &k)| ConvGru::new(ps, &format!("{name}.gru{i}"), cfg.hidden, gru_in, k))
            .collect::<Result<_>>()?;
        Ok(Self {
            convc1: Conv2d::fan_in_uniform(
                ps,
                &format!("{name}.convc1"),
                cfg.corr_channels,
                cfg.corr_conv1,
                (1, 1),
                1,
            )?,
            convc2,
            convf1: Conv2d::fan_in_uniform(ps, &format!("{name}.convf1"), 2, cfg.flow_conv1, (7, 7), 1)?,
            convf2: Conv2d::fan_in_uniform(ps, &format!("{name}.convf2"), cfg.flow_conv1, cfg.flow_conv2, (3, 3), 1)?,
            conv: Conv2d::fan_in_uniform(
                ps,
                &format!("{name}.conv"),
                c_out + cfg.flow_conv2,
                cfg.motion - 2,
                (3, 3),
                1,
            )?,
            grus,
            head1: Conv2d::fan_in_uniform(ps, &format!("{name}.head1"), cfg.hidden, cfg.head_hidden, (3, 3), 1)?,
            head2: Conv2d::fan_in_uniform(ps, &format!("{name}.head2"), cfg.head_hidden, 2, (3, 3), 1)?,
            cfg,
        })
    }

    pub fn config(&self) -> &UpdateConfig {
        &self.cfg
    }

    fn motion(&self, corr: &Tensor, flow: &Tensor) -> Result<Tensor> {
        let mut c = relu(&self.convc1.forward(corr)?)?;
        if let Some(c2) = &self.convc2 {
            c = relu(&c2.forward(&c)?)?;
        }
        let f = relu(&self.convf2.forward(&relu(&self.convf1.forward(flow)?)?)?)?;
        let m = relu(&self.conv.forward(&Tensor::cat(&[c, f], 1)?)?)?;
        Tensor::cat(&[&m, flow], 1)
    }
}

impl UpdateBlock for BasicUpdateBlock {
    fn step(&self, hidden: &Tensor, context: &Tensor, corr: &Tensor, flow: &Tensor) -> Result<(Tensor, Tensor)> {
        let x = Tensor::cat(&[context, &self.motion(corr, flow)?], 1)?;
        let mut h = hidden.clone();
        for g in &self.grus {
            h = g.forward(&h, &x)?;
        }
        let delta = self.head2.forward(&relu(&self.head1.forward(&h)?)?)?;
        Ok((h, delta))
    }
}

/// Grid coordinates plus flow, laid out as `B*h*w` (row, col) pairs.
fn coords_from_flow(flow: &Tensor) -> Result<Arc<Vec<f64>>> {
    let (b, _, h, w) = flow.dims4()?;
    let vals = flow.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let hw = h * w;
    let mut out = Vec::with_capacity(b * hw * 2);
    for bi in 0..b {
        for p in 0..hw {
            out.push((p / w) as f64 + vals[(bi * 2) * hw + p]);
            out.push((p % w) as f64 + vals[(bi * 2 + 1) * hw + p]);
        }
    }
    Ok(Arc::new(out))
}

/// Runs `iterations` refinement steps from zero flow. Each iteration's flow
/// (in 1/8-resolution cells) is upsampled to full resolution in pixels.
/// The lookup position of every step is treated as a constant.
pub fn refine_flow(
    pyramid: &CorrelationPyramid,
    hidden: &Tensor,
    context: &Tensor,
    block: &dyn UpdateBlock,
    iterations: usize,
    radius: usize,
) -> Result<Vec<Tensor>> {
    let (b, h, w) = (pyramid.batch, pyramid.height, pyramid.width);
    let mut flow = Tensor::zeros((b, 2, h, w), context.dtype(), context.device())?;
    let mut hid = hidden.clone();
    let mut out = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let fixed = flow.detach();
        let corr = pyramid.lookup(coords_from_flow(&fixed)?, radius)?;
        let (nh, delta) = block.step(&hid, context, &corr, &fixed)?;
        hid = nh;
        flow = (fixed + delta)?;
        out.push(upsample_flow(&flow, UPSAMPLE)?);
    }
    Ok(out)
}

/// `sum_i gamma^(N-i) * mean over valid pixels of |gt - pred_i|_1`.
/// `gt: (B, 2, H, W)`, `mask: (B, 1, H, W)` with 1 on valid pixels.
pub fn flow_loss(preds: &[Tensor], gt: &Tensor, mask: &Tensor, gamma: f64) -> std::result::Result<Tensor, NetError> {
    if preds.is_empty() {
        return Err(NetError::Config("flow_loss needs at least one prediction".into()));
    }
    let count = mask.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if count <= 0.0 {
        return Err(NetError::EmptyMask);
    }
    let n = preds.len();
    let mut total: Option<Tensor> = None;
    for (i, p) in preds.iter().enumerate() {
        let err = (gt - p)?.abs()?.sum_keepdim(1)?;
        let mean = (err.broadcast_mul(mask)?.sum_all()? / count)?;
        let term = (mean * gamma.powi((n - 1 - i) as i32))?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Unweighted sum of the two objectives.
pub fn total_loss(pr: &Tensor, flow: &Tensor) -> Result<Tensor> {
    pr + flow
}

/// Per-pixel flow channels `(du, dv)` of one batch element as flat vectors.
pub fn flow_planes(flow: &Tensor, index: usize) -> Result<(Vec<f32>, Vec<f32>)> {
    let f = flow.get(index)?.to_dtype(DType::F32)?;
    let u = f.get(0)?.flatten_all()?.to_vec1::<f32>()?;
    let v = f.get(1)?.flatten_all()?.to_vec1::<f32>()?;
    Ok((u, v))
}
