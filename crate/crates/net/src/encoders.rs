//! Residual feature encoders (one per modality) and the LiDAR context encoder.

use candle_core::{Result, Tensor};
use serde::{Deserialize, Serialize};

use crate::ops::relu;
use crate::params::{Conv2d, Norm, NormKind, ParamStore};
use crate::NetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderSize {
    Full,
    Small,
    /// Quarter widths, for CPU-scale experiments.
    Tiny,
}

impl EncoderSize {
    /// Stem and stage widths.
    pub fn widths(self) -> [usize; 3] {
        match self {
            EncoderSize::Full => [64, 96, 128],
            EncoderSize::Small => [32, 48, 64],
            EncoderSize::Tiny => [16, 24, 32],
        }
    }

    pub fn default_feature_dim(self) -> usize {
        match self {
            EncoderSize::Full => 256,
            EncoderSize::Small => 128,
            EncoderSize::Tiny => 64,
        }
    }

    /// Hidden-state and context channels of the context encoder.
    pub fn context_split(self) -> (usize, usize) {
        match self {
            EncoderSize::Full => (128, 128),
            EncoderSize::Small => (64, 64),
            EncoderSize::Tiny => (32, 32),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Correlation feature channels `D`.
    pub feature_dim: usize,
    pub size: EncoderSize,
    /// Radar and LiDAR encoders sharing weights is not supported.
    pub shared: bool,
}

impl EncoderConfig {
    pub fn new(size: EncoderSize) -> Self {
        Self {
            feature_dim: size.default_feature_dim(),
            size,
            shared: false,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), NetError> {
        if self.feature_dim == 0 {
            return Err(NetError::Config("feature_dim must be positive".into()));
        }
        if self.shared {
            return Err(NetError::Config(
                "radar and LiDAR encoders must not share weights".into(),
            ));
        }
        Ok(())
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::new(EncoderSize::Full)
    }
}

#[derive(Debug, Clone)]
struct ResidualBlock {
    conv1: Conv2d,
    norm1: Norm,
    conv2: Conv2d,
    norm2: Norm,
    down: Option<(Conv2d, Norm)>,
}

impl ResidualBlock {
    fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize, norm: NormKind) -> Result<Self> {
        let down = if stride != 1 || cin != cout {
            Some((
                Conv2d::square(ps, &format!("{name}.down"), cin, cout, 1, stride)?,
                Norm::new(ps, &format!("{name}.down_norm"), norm, cout)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::square(ps, &format!("{name}.conv1"), cin, cout, 3, stride)?,
            norm1: Norm::new(ps, &format!("{name}.norm1"), norm, cout)?,
            conv2: Conv2d::square(ps, &format!("{name}.conv2"), cout, cout, 3, 1)?,
            norm2: Norm::new(ps, &format!("{name}.norm2"), norm, cout)?,
            down,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = relu(&self.norm1.forward(&self.conv1.forward(x)?, train)?)?;
        let y = relu(&self.norm2.forward(&self.conv2.forward(&y)?, train)?)?;
        let skip = match &self.down {
            Some((conv, norm)) => norm.forward(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        relu(&(skip + y)?)
    }
}

/// Stride-2 7x7 stem, six residual blocks (downsampling at the third and fifth),
/// then a 1x1 projection: output is 1/8 of the input resolution.
#[derive(Debug, Clone)]
pub struct ResidualEncoder {
    stem: Conv2d,
    stem_norm: Norm,
    blocks: Vec<ResidualBlock>,
    head: Conv2d,
    out_dim: usize,
}

impl ResidualEncoder {
    pub fn new(ps: &mut ParamStore, name: &str, size: EncoderSize, out_dim: usize, norm: NormKind) -> Result<Self> {
        let [w1, w2, w3] = size.widths();
        let plan = [
            (w1, w1, 1),
            (w1, w1, 1),
            (w1, w2, 2),
            (w2, w2, 1),
            (w2, w3, 2),
            (w3, w3, 1),
        ];
        let blocks = plan
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, s))| ResidualBlock::new(ps, &format!("{name}.block{i}"), cin, cout, s, norm))
            .collect::<Result<_>>()?;
        Ok(Self {
            stem: Conv2d::square(ps, &format!("{name}.stem"), 1, w1, 7, 2)?,
            stem_norm: Norm::new(ps, &format!("{name}.stem_norm"), norm, w1)?,
            blocks,
            head: Conv2d::square(ps, &format!("{name}.head"), w3, out_dim, 1, 1)?,
            out_dim,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// `x: (B, 1, H, W)` with `H` and `W` divisible by 8.
    pub fn forward(&self, x: &Tensor, train: bool) -> std::result::Result<Tensor, NetError> {
        let (_, c, h, w) = x.dims4()?;
        if c != 1 || h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(NetError::Shape(format!(
                "encoder input must be (B, 1, H, W) with H, W divisible by 8, got {:?}",
                x.dims()
            )));
        }
        let mut y = relu(&self.stem_norm.forward(&self.stem.forward(x)?, train)?)?;
        for b in &self.blocks {
            y = b.forward(&y, train)?;
        }
        Ok(self.head.forward(&y)?)
    }
}

/// The LiDAR-only context encoder: batch-normalized, output split into
/// `tanh` hidden state and `relu` context.
#[derive(Debug, Clone)]
pub struct ContextEncoder {
    inner: ResidualEncoder,
    hidden: usize,
}

impl ContextEncoder {
    pub fn new(ps: &mut ParamStore, name: &str, size: EncoderSize) -> Result<Self> {
        let (hidden, ctx) = size.context_split();
        Ok(Self {
            inner: ResidualEncoder::new(ps, name, size, hidden + ctx, NormKind::Batch)?,
            hidden,
        })
    }

    pub fn split(&self) -> (usize, usize) {
        (self.hidden, self.inner.out_dim() - self.hidden)
    }

    /// Returns `(hidden, context)`.
    pub fn forward(&self, x: &Tensor, train: bool) -> std::result::Result<(Tensor, Tensor), NetError> {
        let y = self.inner.forward(x, train)?;
        let (h, c) = self.split();
        Ok((y.narrow(1, 0, h)?.tanh()?, relu(&y.narrow(1, h, c)?)?))
    }
}
