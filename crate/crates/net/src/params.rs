//! Named parameters with seeded initialization, plus the building-block layers.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Result, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::ops;

/// Trainable variables and non-trainable buffers, keyed by dotted path.
///
/// Initialization draws from one seeded stream in registration order, so a
/// model built twice from the same seed is bit-identical.
#[derive(Debug)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
    trainable: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Result<Self> {
        ops::check_float(dtype)?;
        Ok(Self {
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
            trainable: BTreeMap::new(),
            buffers: BTreeMap::new(),
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn make(&self, data: Vec<f64>, shape: &[usize]) -> Result<Var> {
        Var::from_tensor(&Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    fn register(&mut self, name: &str, var: Var, trainable: bool) -> Var {
        let map = if trainable {
            &mut self.trainable
        } else {
            &mut self.buffers
        };
        assert!(
            map.insert(name.to_owned(), var.clone()).is_none(),
            "parameter {name} registered twice"
        );
        var
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        let v = self.make(data, shape)?;
        Ok(self.register(name, v, true))
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        let v = self.make(data, shape)?;
        Ok(self.register(name, v, true))
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, trainable: bool) -> Result<Var> {
        let n: usize = shape.iter().product();
        let v = self.make(vec![value; n], shape)?;
        Ok(self.register(name, v, trainable))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.trainable.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.trainable.values().cloned().collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable.values().map(|v| v.elem_count()).sum()
    }

    /// Names of trainable parameters under `prefix`.
    pub fn names_under(&self, prefix: &str) -> Vec<&str> {
        self.trainable
            .keys()
            .filter(|k| k.starts_with(prefix))
            .map(String::as_str)
            .collect()
    }

    /// Every tensor (trainable and buffer) by name.
    pub fn tensors(&self) -> HashMap<String, Tensor> {
        self.trainable
            .iter()
            .chain(&self.buffers)
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites every registered tensor from `src`; all names must be present with matching shapes.
    pub fn assign(&self, src: &HashMap<String, Tensor>) -> std::result::Result<(), String> {
        for (name, var) in self.trainable.iter().chain(&self.buffers) {
            let t = src.get(name).ok_or_else(|| format!("missing tensor {name}"))?;
            if t.dims() != var.dims() {
                return Err(format!("{name}: shape {:?}, expected {:?}", t.dims(), var.dims()));
            }
            let t = t
                .to_dtype(self.dtype)
                .and_then(|t| t.copy())
                .map_err(|e| e.to_string())?;
            var.set(&t).map_err(|e| e.to_string())?;
        }
        if src.len() != self.trainable.len() + self.buffers.len() {
            return Err(format!(
                "checkpoint has {} tensors, model has {}",
                src.len(),
                self.trainable.len() + self.buffers.len()
            ));
        }
        Ok(())
    }

    pub fn save_safetensors(&self, path: &Path, metadata: HashMap<String, String>) -> std::result::Result<(), String> {
        let tensors: BTreeMap<String, Tensor> = self
            .trainable
            .iter()
            .chain(&self.buffers)
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        safetensors::serialize_to_file(tensors.iter().map(|(k, v)| (k.as_str(), v)), Some(metadata), path)
            .map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub pad: (usize, usize),
}

impl Conv2d {
    /// Kaiming-normal (fan-out) weights and zero bias.
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: usize,
    ) -> Result<Self> {
        let std = (2.0 / (cout * kernel.0 * kernel.1) as f64).sqrt();
        let weight = ps.normal(&format!("{name}.weight"), &[cout, cin, kernel.0, kernel.1], std)?;
        let bias = Some(ps.constant(&format!("{name}.bias"), &[cout], 0.0, true)?);
        Ok(Self {
            weight,
            bias,
            stride,
            pad: (kernel.0 / 2, kernel.1 / 2),
        })
    }

    pub fn square(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        Self::new(ps, name, cin, cout, (k, k), stride)
    }

    /// Weights and bias uniform in `±1/sqrt(fan_in)`, which keeps small output layers near zero.
    pub fn fan_in_uniform(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((cin * kernel.0 * kernel.1) as f64).sqrt();
        let weight = ps.uniform(&format!("{name}.weight"), &[cout, cin, kernel.0, kernel.1], bound)?;
        let bias = Some(ps.uniform(&format!("{name}.bias"), &[cout], bound)?);
        Ok(Self {
            weight,
            bias,
            stride,
            pad: (kernel.0 / 2, kernel.1 / 2),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv2d(
            x,
            &self.weight,
            self.bias.as_ref().map(|b| b.as_tensor()),
            self.stride,
            self.pad,
        )
    }
}

const BN_MOMENTUM: f64 = 0.1;
const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Instance,
    Batch,
}

#[derive(Debug, Clone)]
pub enum Norm {
    Instance,
    Batch {
        gamma: Var,
        beta: Var,
        running_mean: Var,
        running_var: Var,
    },
}

impl Norm {
    pub fn new(ps: &mut ParamStore, name: &str, kind: NormKind, channels: usize) -> Result<Self> {
        Ok(match kind {
            NormKind::Instance => Norm::Instance,
            NormKind::Batch => Norm::Batch {
                gamma: ps.constant(&format!("{name}.weight"), &[channels], 1.0, true)?,
                beta: ps.constant(&format!("{name}.bias"), &[channels], 0.0, true)?,
                running_mean: ps.constant(&format!("{name}.running_mean"), &[channels], 0.0, false)?,
                running_var: ps.constant(&format!("{name}.running_var"), &[channels], 1.0, false)?,
            },
        })
    }

    /// Batch statistics (and a running-stat update) in training mode, running stats otherwise.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            Norm::Instance => ops::instance_norm(x, NORM_EPS),
            Norm::Batch {
                gamma,
                beta,
                running_mean,
                running_var,
            } => {
                let (b, c, h, w) = x.dims4()?;
                let (mean, var) = if train {
                    let flat = x.transpose(0, 1)?.reshape((c, b * h * w))?;
                    let mean = flat.mean(D::Minus1)?;
                    let var = flat.broadcast_sub(&mean.unsqueeze(1)?)?.sqr()?.mean(D::Minus1)?;
                    let n = (b * h * w) as f64;
                    let unbiased = if n > 1.0 {
                        (var.detach() * (n / (n - 1.0)))?
                    } else {
                        var.detach()
                    };
                    running_mean
                        .set(&((running_mean.as_tensor() * (1.0 - BN_MOMENTUM))? + (mean.detach() * BN_MOMENTUM)?)?)?;
                    running_var
                        .set(&((running_var.as_tensor() * (1.0 - BN_MOMENTUM))? + (unbiased * BN_MOMENTUM)?)?)?;
                    (mean, var)
                } else {
                    (running_mean.as_tensor().clone(), running_var.as_tensor().clone())
                };
                let shape = (1, c, 1, 1);
                let scale = (gamma.as_tensor() / (var + NORM_EPS)?.sqrt()?)?;
                let shift = (beta.as_tensor() - (&mean * &scale)?)?;
                x.broadcast_mul(&scale.reshape(shape)?)?
                    .broadcast_add(&shift.reshape(shape)?)
            }
        }
    }
}
