#![allow(dead_code)]

use std::path::Path;

use ralf_cli::{Preset, RalfConfig};
use ralf_core::geometry::BevConfig;
use ralf_core::synthworld::TrajectorySpec;

/// A small world with 32 x 32 rasters and about 20 places, fast enough for unit tests.
pub fn small_config(steps: usize) -> RalfConfig {
    let mut c = RalfConfig::preset(Preset::Desk);
    c.seed = 3;
    c.bev = BevConfig {
        height: 32,
        width: 32,
        resolution: 1.0,
    };
    c.world.extent = 70.0;
    c.world.n_walls = 40;
    c.world.n_poles = 90;
    c.world.trajectory = TrajectorySpec {
        n_frames: 60,
        step: 1.0,
        max_curvature: 0.1,
        margin: 14.0,
    };
    c.world.submap_spacing = 3.0;
    c.world.submap_radius = 25.0;
    c.train.batch_pairs = 2;
    c.train.optim.total_steps = steps;
    c.train.checkpoint_every = 0;
    c.train.flow.train_iterations = 3;
    c.train.flow.eval_iterations = 4;
    c.ransac.inlier_threshold = 1.5;
    c
}

pub fn world(cfg: &RalfConfig, dir: &Path) {
    ralf_cli::data::synth_world(cfg, dir).unwrap();
}
