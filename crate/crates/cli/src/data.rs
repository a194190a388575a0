//! Synthetic sequences on disk and the training-batch sampler.

use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use ralf_core::dataset::{self, perturb_pose, resample_trajectory, Frame, MapCloud};
use ralf_core::flow::gt_flow;
use ralf_core::geometry::{BevConfig, BevImage, Pose2};
use ralf_core::synthworld::{
    generate_trajectory, generate_world, render_lidar, render_radar, retraverse, World, WorldSpec,
};
use ralf_net::model::images_to_tensor;
use ralf_net::train::TrainBatch;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{streams, RalfConfig};
use crate::CliError;

pub const MAP_DIR: &str = "map";
pub const QUERY_DIR: &str = "query";
pub const WORLD_FILE: &str = "world.json";

/// What `synth-world` produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldSummary {
    pub map_frames: usize,
    pub query_frames: usize,
    pub walls: usize,
    pub poles: usize,
}

/// Renders one frame per pose with sensor seeds derived from `seed` and the frame index.
pub fn render_frames(world: &World, poses: &[Pose2<f64>], cfg: &RalfConfig, seed: u64) -> Vec<Frame> {
    poses
        .iter()
        .enumerate()
        .map(|(i, pose)| {
            let s = seed.wrapping_add((i as u64).wrapping_mul(0x2545_F491_4F6C_DD1D));
            let lidar = render_lidar(world, pose, &cfg.world.noise, &cfg.world.lidar, s);
            let radar = render_radar(
                world,
                pose,
                &cfg.world.noise,
                &cfg.bev,
                &cfg.world.radar,
                s ^ 0x5241_4441_52,
            );
            Frame {
                id: i as u64,
                pose: *pose,
                radar,
                lidar_cloud: Arc::new(lidar),
            }
        })
        .collect()
}

/// Map traversal and query poses: one query per place, offset sideways from the place center.
pub fn plan_traversals(cfg: &RalfConfig) -> (Vec<Pose2<f64>>, Vec<Pose2<f64>>) {
    let map = generate_trajectory(
        cfg.stream_seed(streams::TRAJECTORY),
        cfg.world.extent,
        &cfg.world.trajectory,
    );
    let places = resample_trajectory(&map, cfg.world.submap_spacing);
    let queries = retraverse(&places, cfg.world.query_lateral, 0.0);
    (map, queries)
}

/// Generates the world and writes the map and query sequences under `out`.
pub fn synth_world(cfg: &RalfConfig, out: &Path) -> Result<WorldSummary, CliError> {
    let (map_poses, query_poses) = plan_traversals(cfg);
    let mut all = map_poses.clone();
    all.extend_from_slice(&query_poses);
    let spec = WorldSpec {
        seed: cfg.stream_seed(streams::WORLD),
        extent: cfg.world.extent,
        n_walls: cfg.world.n_walls,
        n_poles: cfg.world.n_poles,
        trajectory: all,
    };
    let world = generate_world(&spec).map_err(|e| CliError::Config(e.to_string()))?;
    let map = render_frames(&world, &map_poses, cfg, cfg.stream_seed(streams::MAP_SENSORS));
    let queries = render_frames(&world, &query_poses, cfg, cfg.stream_seed(streams::QUERY_SENSORS));
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    dataset::write_sequence(&out.join(MAP_DIR), &map)?;
    dataset::write_sequence(&out.join(QUERY_DIR), &queries)?;
    crate::write_json(&out.join(WORLD_FILE), &world)?;
    Ok(WorldSummary {
        map_frames: map.len(),
        query_frames: queries.len(),
        walls: world.walls.len(),
        poles: world.poles.len(),
    })
}

/// Loads a sequence and checks that its rasters match the configured geometry.
pub fn load_frames(dir: &Path, bev: &BevConfig) -> Result<Vec<Frame>, CliError> {
    let frames = dataset::load_sequence(dir)?;
    if let Some(f) = frames.iter().find(|f| f.radar.config() != bev) {
        return Err(CliError::Data(format!(
            "{}: frame {} has a {}x{} raster at {} m, configuration expects {}x{} at {} m",
            dir.display(),
            f.id,
            f.radar.height(),
            f.radar.width(),
            f.radar.config().resolution,
            bev.height,
            bev.width,
            bev.resolution
        )));
    }
    Ok(frames)
}

/// Training frames with the LiDAR map they form.
pub struct TrainingSet {
    frames: Vec<Frame>,
    map: MapCloud,
    cfg: RalfConfig,
    /// Per anchor, the other frames within the positive radius.
    positives: Vec<Vec<usize>>,
}

impl TrainingSet {
    pub fn new(frames: Vec<Frame>, cfg: &RalfConfig) -> Result<Self, CliError> {
        let tp = cfg.train.triplet;
        if frames.len() < 2 {
            return Err(CliError::Data(format!(
                "{} frames are too few to train on",
                frames.len()
            )));
        }
        let positives: Vec<Vec<usize>> = frames
            .iter()
            .enumerate()
            .map(|(i, a)| {
                frames
                    .iter()
                    .enumerate()
                    .filter(|&(j, b)| j != i && b.pose.distance(&a.pose) <= tp.tau_p)
                    .map(|(j, _)| j)
                    .collect()
            })
            .collect();
        if positives.iter().all(Vec::is_empty) {
            return Err(CliError::Data(format!(
                "no two frames lie within tau_p = {} m",
                tp.tau_p
            )));
        }
        // mining needs at least two places farther apart than tau_n
        let places = resample_trajectory(&frames.iter().map(|f| f.pose).collect::<Vec<_>>(), tp.tau_n);
        let spread = places.iter().any(|p| places.iter().any(|q| p.distance(q) > tp.tau_n));
        if !spread {
            return Err(CliError::Data(format!(
                "dataset too small for mining: fewer than 2 places more than tau_n = {} m apart",
                tp.tau_n
            )));
        }
        let map = MapCloud::from_frames(&frames, None);
        Ok(Self {
            frames,
            map,
            cfg: cfg.clone(),
            positives,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn map(&self) -> &MapCloud {
        &self.map
    }

    pub fn render_lidar(&self, pose: &Pose2<f64>) -> BevImage {
        self.map.render(pose, &self.cfg.bev, self.cfg.raster_mode)
    }

    /// The batch for `step`; identical for identical configuration, data and step.
    pub fn batch(&self, step: u64, dtype: DType) -> Result<TrainBatch, CliError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.stream_seed(streams::BATCHES));
        rng.set_stream(step);
        let b = self.cfg.train.batch_pairs;
        let tau_n = self.cfg.train.triplet.tau_n;
        let candidates: Vec<usize> = (0..self.frames.len())
            .filter(|&i| !self.positives[i].is_empty())
            .collect();
        const MAX_TRIES: usize = 100;
        for _ in 0..MAX_TRIES {
            let anchors: Vec<usize> = (0..b)
                .map(|_| *candidates.choose(&mut rng).expect("non-empty"))
                .collect();
            let positives: Vec<usize> = anchors
                .iter()
                .map(|&a| *self.positives[a].choose(&mut rng).expect("non-empty"))
                .collect();
            let pool: Vec<Pose2<f64>> = anchors.iter().chain(&positives).map(|&i| self.frames[i].pose).collect();
            let minable = anchors
                .iter()
                .all(|&a| pool.iter().any(|p| p.distance(&self.frames[a].pose) > tau_n));
            if minable {
                return self.assemble(&anchors, &positives, &mut rng, dtype);
            }
        }
        Err(CliError::Data(format!(
            "could not draw a batch with negatives beyond tau_n = {tau_n} m in {MAX_TRIES} tries"
        )))
    }

    fn assemble(
        &self,
        anchors: &[usize],
        positives: &[usize],
        rng: &mut ChaCha8Rng,
        dtype: DType,
    ) -> Result<TrainBatch, CliError> {
        let bev = &self.cfg.bev;
        let (h, w) = (bev.height, bev.width);
        let radar =
            |idx: &[usize]| images_to_tensor(&idx.iter().map(|&i| &self.frames[i].radar).collect::<Vec<_>>(), dtype);
        let lidar = |idx: &[usize]| {
            let imgs: Vec<BevImage> = idx.iter().map(|&i| self.render_lidar(&self.frames[i].pose)).collect();
            images_to_tensor(&imgs.iter().collect::<Vec<_>>(), dtype)
        };
        let mut init_imgs = Vec::with_capacity(anchors.len());
        let mut flow = Vec::with_capacity(anchors.len() * 2 * h * w);
        let mut mask = Vec::with_capacity(anchors.len() * h * w);
        let radius = bev.half_diagonal() + bev.resolution;
        for &a in anchors {
            let t_gt = self.frames[a].pose;
            let t_init = perturb_pose(&t_gt, &self.cfg.train.augment, rng);
            init_imgs.push(self.render_lidar(&t_init));
            let local = self.map.within([t_init.x, t_init.y], radius);
            let f = gt_flow(&local, &t_init, &t_gt, bev);
            flow.extend_from_slice(f.u_plane());
            flow.extend_from_slice(f.v_plane());
            mask.extend(f.mask().iter().map(|&m| if m { 1.0f32 } else { 0.0 }));
        }
        let n = anchors.len();
        let dev = Device::Cpu;
        Ok(TrainBatch {
            radar_anchor: radar(anchors)?,
            lidar_anchor: lidar(anchors)?,
            radar_positive: radar(positives)?,
            lidar_positive: lidar(positives)?,
            lidar_init: images_to_tensor(&init_imgs.iter().collect::<Vec<_>>(), dtype)?,
            gt_flow: Tensor::from_vec(flow, (n, 2, h, w), &dev)?.to_dtype(dtype)?,
            flow_mask: Tensor::from_vec(mask, (n, 1, h, w), &dev)?.to_dtype(dtype)?,
            anchor_poses: anchors.iter().map(|&i| self.frames[i].pose).collect(),
            positive_poses: positives.iter().map(|&i| self.frames[i].pose).collect(),
        })
    }
}
