//! Pipeline configuration: a JSON document, named presets, and command-line overrides.

use std::path::Path;

use ralf_core::dataset::{AugmentSpec, TripletConfig};
use ralf_core::geometry::{BevConfig, RasterMode};
use ralf_core::pose_solver::RansacConfig;
use ralf_core::synthworld::{LidarParams, RadarParams, SensorNoise, TrajectorySpec};
use ralf_net::encoders::{EncoderConfig, EncoderSize};
use ralf_net::flow_head::FlowLossConfig;
use ralf_net::train::OptimConfig;
use ralf_net::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "RALF_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RalfConfig {
    /// Master seed; world, initialization, batches and evaluation perturbations derive from it.
    pub seed: u64,
    pub bev: BevConfig,
    pub raster_mode: RasterMode,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ransac: RansacConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// Side of the square world, meters.
    pub extent: f64,
    pub n_walls: usize,
    pub n_poles: usize,
    pub trajectory: TrajectorySpec,
    pub noise: SensorNoise,
    pub lidar: LidarParams,
    pub radar: RadarParams,
    /// Sideways offset of the query traversal, meters.
    pub query_lateral: f64,
    /// Distance between consecutive submap centers along the map trajectory, meters.
    pub submap_spacing: f64,
    /// Radius of map points kept per submap, meters.
    pub submap_radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    /// Anchor/positive pairs per batch.
    pub batch_pairs: usize,
    /// Perturbation of the initial pose for the flow branch.
    pub augment: AugmentSpec,
    pub triplet: TripletConfig,
    pub flow: FlowLossConfig,
    pub log_every: usize,
    /// Steps between intermediate checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Retrieval success radius, meters.
    pub threshold: f64,
    pub k_values: Vec<usize>,
    /// Initial-pose perturbation for the metric localization experiment.
    pub augment: AugmentSpec,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            extent: 240.0,
            n_walls: 220,
            n_poles: 500,
            trajectory: TrajectorySpec {
                n_frames: 1200,
                ..TrajectorySpec::default()
            },
            noise: SensorNoise::default(),
            lidar: LidarParams::default(),
            radar: RadarParams::default(),
            query_lateral: 1.0,
            submap_spacing: 6.0,
            submap_radius: 100.0,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig::default(),
            batch_pairs: 15,
            augment: AugmentSpec::default(),
            triplet: TripletConfig::default(),
            flow: FlowLossConfig::default(),
            log_every: 10,
            checkpoint_every: 5000,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 3.0,
            k_values: vec![1, 5, 10],
            augment: AugmentSpec::default(),
        }
    }
}

impl Default for RalfConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            bev: BevConfig::default(),
            raster_mode: RasterMode::Occupancy,
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            ransac: RansacConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Named starting points for a configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Full-size model, 256 x 256 rasters, 2e5 steps.
    Full,
    /// CPU-sized run: 64 x 64 rasters, tiny encoders, about 300 frames and 50 places.
    Desk,
}

impl RalfConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Full => Self::default(),
            Preset::Desk => Self::desk(),
        }
    }

    fn desk() -> Self {
        let mut model = ModelConfig::new(EncoderConfig::new(EncoderSize::Tiny));
        model.corr_radius = 4;
        Self {
            seed: 7,
            bev: BevConfig {
                height: 64,
                width: 64,
                resolution: 0.5,
            },
            raster_mode: RasterMode::Occupancy,
            world: WorldConfig {
                extent: 120.0,
                n_walls: 110,
                n_poles: 260,
                trajectory: TrajectorySpec {
                    n_frames: 300,
                    step: 1.0,
                    max_curvature: 0.05,
                    margin: 15.0,
                },
                submap_radius: 30.0,
                ..WorldConfig::default()
            },
            model,
            train: TrainConfig {
                optim: OptimConfig {
                    total_steps: 3000,
                    ..OptimConfig::default()
                },
                batch_pairs: 8,
                triplet: TripletConfig {
                    margin: 0.5,
                    tau_p: 2.0,
                    tau_n: 8.0,
                },
                log_every: 10,
                checkpoint_every: 1000,
                ..TrainConfig::default()
            },
            ransac: RansacConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// Reads a JSON file; absent fields keep their defaults.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Merges a JSON document over `self`, field by field.
    pub fn merged_with_file(self, path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let patch: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut base = serde_json::to_value(&self).map_err(|e| CliError::Config(e.to_string()))?;
        merge_json(&mut base, patch);
        serde_json::from_value(base).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `RALF_SEED` when it is set.
    pub fn apply_env(mut self) -> Result<Self, CliError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: String| CliError::Config(e);
        self.bev.validate().map_err(|e| cfg(e.to_string()))?;
        if self.bev.height % 8 != 0 || self.bev.width % 8 != 0 {
            return Err(cfg(format!(
                "raster {}x{} must be divisible by 8",
                self.bev.height, self.bev.width
            )));
        }
        self.model.validate().map_err(|e| cfg(e.to_string()))?;
        self.train.optim.validate().map_err(|e| cfg(e.to_string()))?;
        self.train.triplet.validate().map_err(|e| cfg(e.to_string()))?;
        self.train.flow.validate().map_err(|e| cfg(e.to_string()))?;
        self.world.noise.validate().map_err(|e| cfg(e.to_string()))?;
        if self.train.batch_pairs == 0 {
            return Err(cfg("batch_pairs must be at least 1".into()));
        }
        if !(self.world.submap_spacing > 0.0 && self.world.submap_radius > 0.0) {
            return Err(cfg("submap spacing and radius must be positive".into()));
        }
        if !(self.eval.threshold > 0.0) || self.eval.k_values.is_empty() || self.eval.k_values.contains(&0) {
            return Err(cfg("evaluation needs a positive threshold and positive k values".into()));
        }
        if !(self.ransac.inlier_threshold > 0.0) || self.ransac.max_iterations == 0 {
            return Err(cfg("RANSAC threshold and iteration count must be positive".into()));
        }
        Ok(())
    }

    /// Seed for one named consumer, so changing one stream never shifts another.
    pub fn stream_seed(&self, stream: u64) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream)
    }
}

/// Distinct consumers of [`RalfConfig::stream_seed`].
pub mod streams {
    pub const WORLD: u64 = 1;
    pub const TRAJECTORY: u64 = 2;
    pub const MAP_SENSORS: u64 = 3;
    pub const QUERY_SENSORS: u64 = 4;
    pub const INIT: u64 = 5;
    pub const BATCHES: u64 = 6;
    pub const EVAL_PERTURB: u64 = 7;
    pub const RANSAC: u64 = 8;
}

fn merge_json(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        RalfConfig::preset(Preset::Full).validate().unwrap();
        RalfConfig::preset(Preset::Desk).validate().unwrap();
        assert!(RalfConfig::preset(Preset::Desk).train.optim.total_steps <= 20_000);
    }

    #[test]
    fn json_round_trip() {
        let c = RalfConfig::preset(Preset::Desk);
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RalfConfig>(&s).unwrap(), c);
    }

    #[test]
    fn partial_file_overrides_only_given_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"seed": 42, "train": {"batch_pairs": 3}}"#).unwrap();
        let c = RalfConfig::preset(Preset::Desk).merged_with_file(&p).unwrap();
        assert_eq!(c.seed, 42);
        assert_eq!(c.train.batch_pairs, 3);
        assert_eq!(c.bev.height, 64);
        assert_eq!(c.train.optim.lr, 5e-4);
    }

    #[test]
    fn bad_values_are_config_errors() {
        let mut c = RalfConfig::preset(Preset::Desk);
        c.train.optim.lr = 0.0;
        assert!(matches!(c.validate(), Err(CliError::Config(_))));
        let mut c = RalfConfig::preset(Preset::Desk);
        c.bev.height = 60;
        assert!(matches!(c.validate(), Err(CliError::Config(_))));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"sed": 1}"#).unwrap();
        assert!(matches!(RalfConfig::from_file(&p), Err(CliError::Config(_))));
    }
}
