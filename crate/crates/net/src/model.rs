//! The joint place-recognition and metric-localization network and its checkpoint format.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ralf_core::geometry::BevImage;
use serde::{Deserialize, Serialize};

use crate::encoders::{ContextEncoder, EncoderConfig, ResidualEncoder};
use crate::flow_head::{refine_flow, BasicUpdateBlock, CorrelationPyramid, UpdateConfig, CORR_LEVELS, CORR_RADIUS};
use crate::params::{NormKind, ParamStore};
use crate::place::{DescriptorHead, HEAD_WIDTHS};
use crate::NetError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Descriptor head widths; the last one is the descriptor length.
    pub head_widths: [usize; 4],
    pub corr_levels: usize,
    pub corr_radius: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(EncoderConfig::default())
    }
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig) -> Self {
        Self {
            encoder,
            head_widths: HEAD_WIDTHS,
            corr_levels: CORR_LEVELS,
            corr_radius: CORR_RADIUS,
        }
    }

    pub fn descriptor_dim(&self) -> usize {
        self.head_widths[3]
    }

    pub fn validate(&self) -> Result<(), NetError> {
        self.encoder.validate()?;
        if self.corr_levels == 0 || self.head_widths.contains(&0) {
            return Err(NetError::Config(
                "correlation levels and head widths must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct Ralf {
    cfg: ModelConfig,
    store: ParamStore,
    radar: ResidualEncoder,
    lidar: ResidualEncoder,
    context: ContextEncoder,
    head: DescriptorHead,
    update: BasicUpdateBlock,
}

pub const RADAR_ENCODER: &str = "radar_encoder";
pub const LIDAR_ENCODER: &str = "lidar_encoder";
pub const CONTEXT_ENCODER: &str = "context_encoder";
pub const DESCRIPTOR_HEAD: &str = "descriptor_head";
pub const UPDATE_BLOCK: &str = "update_block";

impl Ralf {
    pub fn new(cfg: ModelConfig, seed: u64, dtype: DType) -> Result<Self, NetError> {
        cfg.validate()?;
        let mut ps = ParamStore::new(seed, dtype)?;
        let size = cfg.encoder.size;
        let d = cfg.encoder.feature_dim;
        let radar = ResidualEncoder::new(&mut ps, RADAR_ENCODER, size, d, NormKind::Instance)?;
        let lidar = ResidualEncoder::new(&mut ps, LIDAR_ENCODER, size, d, NormKind::Instance)?;
        let context = ContextEncoder::new(&mut ps, CONTEXT_ENCODER, size)?;
        let head = DescriptorHead::new(&mut ps, DESCRIPTOR_HEAD, d, cfg.head_widths)?;
        let corr_channels = cfg.corr_levels * (2 * cfg.corr_radius + 1).pow(2);
        let update = BasicUpdateBlock::new(&mut ps, UPDATE_BLOCK, UpdateConfig::for_size(size, corr_channels))?;
        Ok(Self {
            cfg,
            store: ps,
            radar,
            lidar,
            context,
            head,
            update,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn encode_radar(&self, x: &Tensor, train: bool) -> Result<Tensor, NetError> {
        self.radar.forward(x, train)
    }

    pub fn encode_lidar(&self, x: &Tensor, train: bool) -> Result<Tensor, NetError> {
        self.lidar.forward(x, train)
    }

    /// `(hidden, context)` from a LiDAR image.
    pub fn encode_context(&self, x: &Tensor, train: bool) -> Result<(Tensor, Tensor), NetError> {
        self.context.forward(x, train)
    }

    pub fn describe(&self, features: &Tensor, train: bool) -> Result<Tensor, NetError> {
        Ok(self.head.forward(features, train)?)
    }

    /// Full-resolution flow predictions mapping LiDAR pixels to radar pixels, one per iteration.
    pub fn flow(
        &self,
        f_lidar: &Tensor,
        f_radar: &Tensor,
        lidar_image: &Tensor,
        iterations: usize,
        train: bool,
    ) -> Result<Vec<Tensor>, NetError> {
        let pyramid = CorrelationPyramid::new(f_lidar, f_radar, self.cfg.corr_levels)?;
        let (hidden, context) = self.encode_context(lidar_image, train)?;
        Ok(refine_flow(
            &pyramid,
            &hidden,
            &context,
            &self.update,
            iterations,
            self.cfg.corr_radius,
        )?)
    }

    /// Stacks single-channel rasters into `(B, 1, H, W)`.
    pub fn images_to_tensor(&self, images: &[&BevImage]) -> Result<Tensor, NetError> {
        images_to_tensor(images, self.dtype())
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: &CheckpointMeta) -> Result<(), NetError> {
        let manifest = Manifest {
            config: self.cfg,
            dtype: dtype_name(self.dtype()).into(),
            meta: meta.clone(),
        };
        let metadata = HashMap::from([("manifest".to_owned(), serde_json::to_string(&manifest)?)]);
        self.store
            .save_safetensors(path.as_ref(), metadata)
            .map_err(NetError::Checkpoint)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, CheckpointMeta), NetError> {
        let bytes = std::fs::read(path.as_ref())?;
        let (_, header) =
            safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| NetError::Checkpoint(e.to_string()))?;
        let manifest_json = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get("manifest"))
            .ok_or_else(|| NetError::Checkpoint("checkpoint has no manifest".into()))?;
        let manifest: Manifest = serde_json::from_str(manifest_json)?;
        let dtype = match manifest.dtype.as_str() {
            "f32" => DType::F32,
            "f64" => DType::F64,
            other => return Err(NetError::Checkpoint(format!("unsupported dtype {other}"))),
        };
        let model = Self::new(manifest.config, 0, dtype)?;
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        model.store.assign(&tensors).map_err(NetError::Checkpoint)?;
        Ok((model, manifest.meta))
    }
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F64 => "f64",
        _ => "f32",
    }
}

pub fn images_to_tensor(images: &[&BevImage], dtype: DType) -> Result<Tensor, NetError> {
    let first = images
        .first()
        .ok_or_else(|| NetError::Shape("no images to stack".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if (img.height(), img.width()) != (h, w) {
            return Err(NetError::Shape(format!(
                "image {}x{} differs from {h}x{w}",
                img.height(),
                img.width()
            )));
        }
        data.extend_from_slice(img.pixels());
    }
    Ok(Tensor::from_vec(data, (images.len(), 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Free-form information stored next to the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    #[serde(default)]
    pub metrics: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    dtype: String,
    meta: CheckpointMeta,
}
