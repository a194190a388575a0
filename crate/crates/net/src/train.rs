//! Joint loss evaluation and the optimization step.

use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ralf_core::dataset::TripletConfig;
use ralf_core::geometry::Pose2;
use serde::{Deserialize, Serialize};

use crate::flow_head::{flow_loss, total_loss, FlowLossConfig};
use crate::model::Ralf;
use crate::place::{pr_loss, PairDescriptors};
use crate::NetError;

/// One optimization batch of `B` (anchor, positive) pairs.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    /// `(B, 1, H, W)` each.
    pub radar_anchor: Tensor,
    pub lidar_anchor: Tensor,
    pub radar_positive: Tensor,
    pub lidar_positive: Tensor,
    /// LiDAR rendered at the perturbed anchor pose.
    pub lidar_init: Tensor,
    /// `(B, 2, H, W)` ground-truth flow and `(B, 1, H, W)` validity mask.
    pub gt_flow: Tensor,
    pub flow_mask: Tensor,
    pub anchor_poses: Vec<Pose2<f64>>,
    pub positive_poses: Vec<Pose2<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pr: f64,
    pub flow: f64,
    pub total: f64,
}

/// Returns the differentiable total and its parts.
pub fn joint_loss(
    model: &Ralf,
    batch: &TrainBatch,
    triplet: &TripletConfig,
    flow_cfg: &FlowLossConfig,
    train: bool,
) -> Result<(Tensor, LossBreakdown), NetError> {
    let b = batch.anchor_poses.len();
    let radar = model.encode_radar(&Tensor::cat(&[&batch.radar_anchor, &batch.radar_positive], 0)?, train)?;
    let lidar = model.encode_lidar(
        &Tensor::cat(&[&batch.lidar_anchor, &batch.lidar_positive, &batch.lidar_init], 0)?,
        train,
    )?;
    let desc = model.describe(&Tensor::cat(&[&radar, &lidar.narrow(0, 0, 2 * b)?], 0)?, train)?;
    let pairs = PairDescriptors {
        radar_anchor: &desc.narrow(0, 0, b)?,
        radar_positive: &desc.narrow(0, b, b)?,
        lidar_anchor: &desc.narrow(0, 2 * b, b)?,
        lidar_positive: &desc.narrow(0, 3 * b, b)?,
        anchor_poses: &batch.anchor_poses,
        positive_poses: &batch.positive_poses,
    };
    let pr = pr_loss(&pairs, triplet)?;
    let preds = model.flow(
        &lidar.narrow(0, 2 * b, b)?,
        &radar.narrow(0, 0, b)?,
        &batch.lidar_init,
        flow_cfg.train_iterations,
        train,
    )?;
    let flow = flow_loss(&preds, &batch.gt_flow, &batch.flow_mask, flow_cfg.gamma)?;
    let total = total_loss(&pr, &flow)?;
    let scalar = |t: &Tensor| -> Result<f64, NetError> { Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?) };
    let breakdown = LossBreakdown {
        pr: scalar(&pr)?,
        flow: scalar(&flow)?,
        total: scalar(&total)?,
    };
    Ok((total, breakdown))
}

/// Cosine one-cycle schedule: warm up from `max_lr / div` to `max_lr`, then anneal to
/// `max_lr / (div * final_div)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total_steps: usize,
    pub warmup_fraction: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl OneCycle {
    pub fn new(max_lr: f64, total_steps: usize, warmup_fraction: f64) -> Self {
        Self {
            max_lr,
            total_steps,
            warmup_fraction,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        let cos = |from: f64, to: f64, t: f64| to + (from - to) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        let start = self.max_lr / self.div_factor;
        let end = start / self.final_div_factor;
        let warm = ((self.total_steps as f64 * self.warmup_fraction).round() as usize).max(1);
        if step < warm {
            cos(start, self.max_lr, step as f64 / warm as f64)
        } else {
            let rest = self.total_steps.saturating_sub(warm).max(1);
            let t = ((step - warm) as f64 / rest as f64).min(1.0);
            cos(self.max_lr, end, t)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub total_steps: usize,
    pub warmup_fraction: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            total_steps: 200_000,
            warmup_fraction: 0.1,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if !(self.lr > 0.0) {
            return Err(NetError::Config("lr must be positive".into()));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(NetError::Config("warmup fraction must lie in (0, 1)".into()));
        }
        if self.total_steps == 0 || !(self.clip_norm > 0.0) || self.weight_decay < 0.0 {
            return Err(NetError::Config("total_steps, clip_norm must be positive".into()));
        }
        Ok(())
    }
}

pub struct Trainer {
    vars: Vec<Var>,
    opt: AdamW,
    schedule: OneCycle,
    clip_norm: f64,
    step: usize,
}

impl Trainer {
    pub fn new(model: &Ralf, cfg: &OptimConfig) -> Result<Self, NetError> {
        cfg.validate()?;
        let vars = model.store().trainable_vars();
        let opt = AdamW::new(
            vars.clone(),
            ParamsAdamW {
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
                ..Default::default()
            },
        )?;
        Ok(Self {
            vars,
            opt,
            schedule: OneCycle::new(cfg.lr, cfg.total_steps, cfg.warmup_fraction),
            clip_norm: cfg.clip_norm,
            step: 0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr(self.step)
    }

    /// Backpropagates `loss`, clips the global gradient norm and applies one AdamW update.
    /// Returns the pre-clipping gradient norm.
    pub fn apply(&mut self, loss: &Tensor) -> Result<f64, NetError> {
        let mut grads = loss.backward()?;
        let mut sq = 0.0;
        for v in &self.vars {
            if let Some(g) = grads.get(v) {
                sq += g
                    .sqr()?
                    .sum_all()?
                    .to_dtype(candle_core::DType::F64)?
                    .to_scalar::<f64>()?;
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(NetError::NonFinite("gradient norm".into()));
        }
        if norm > self.clip_norm {
            let scale = self.clip_norm / norm;
            for v in &self.vars {
                if let Some(g) = grads.remove(v) {
                    grads.insert(v, (g * scale)?);
                }
            }
        }
        self.opt.set_learning_rate(self.schedule.lr(self.step));
        self.opt.step(&grads)?;
        self.step += 1;
        Ok(norm)
    }

    /// One full training step on `batch`.
    pub fn train_step(
        &mut self,
        model: &Ralf,
        batch: &TrainBatch,
        triplet: &TripletConfig,
        flow_cfg: &FlowLossConfig,
    ) -> Result<LossBreakdown, NetError> {
        let (loss, parts) = joint_loss(model, batch, triplet, flow_cfg, true)?;
        if !parts.total.is_finite() {
            return Err(NetError::NonFinite("loss".into()));
        }
        self.apply(&loss)?;
        Ok(parts)
    }
}
