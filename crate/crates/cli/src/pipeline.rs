//! The `train`, `build-map`, `localize` and `evaluate` commands as library calls.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::DType;
use ralf_core::database::{GlobalDescriptor, SubmapDatabase, SubmapRecord};
use ralf_core::dataset::{build_submaps, perturb_pose, MapCloud};
use ralf_core::evaluation::{self, PoseErrorReport, RecallQuery, RecallReport};
use ralf_core::flow::FlowMap;
use ralf_core::geometry::{BevConfig, BevImage, Modality, Pose2, RasterMode};
use ralf_core::io::{read_pgm, read_rlfc, write_pgm16, write_rlfc};
use ralf_core::pose_solver::{estimate_pose, flow_to_correspondences};
use ralf_net::flow_head::flow_planes;
use ralf_net::model::images_to_tensor;
use ralf_net::train::{joint_loss, LossBreakdown, Trainer};
use ralf_net::{CheckpointMeta, Ralf};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{streams, RalfConfig};
use crate::data::{load_frames, TrainingSet};
use crate::{create_dir, read_json, write_json, CliError};

pub const CHECKPOINT_FILE: &str = "model.safetensors";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LOSS_LOG: &str = "loss.csv";
pub const SUBMAP_DIR: &str = "submaps";
pub const MAP_CLOUD_FILE: &str = "map.rlfc";
pub const DB_INFO_FILE: &str = "map_info.json";

/// Images per forward pass outside training.
const EVAL_CHUNK: usize = 16;

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub pr: f64,
    pub flow: f64,
    pub total: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub first: LossBreakdown,
    pub last: LossBreakdown,
    pub checkpoint: PathBuf,
}

/// Trains on the sequence in `frames_dir`, writing the loss log and checkpoints under `out`.
pub fn train(cfg: &RalfConfig, frames_dir: &Path, out: &Path) -> Result<TrainSummary, CliError> {
    cfg.validate()?;
    let frames = load_frames(frames_dir, &cfg.bev)?;
    let set = TrainingSet::new(frames, cfg)?;
    train_on(cfg, &set, out, |_| {})
}

/// Training loop over a prepared set; `progress` sees every logged row.
pub fn train_on(
    cfg: &RalfConfig,
    set: &TrainingSet,
    out: &Path,
    mut progress: impl FnMut(&LogRow),
) -> Result<TrainSummary, CliError> {
    create_dir(out)?;
    let model = Ralf::new(cfg.model, cfg.stream_seed(streams::INIT), DType::F32)?;
    let mut trainer = Trainer::new(&model, &cfg.train.optim)?;
    let steps = cfg.train.optim.total_steps;
    let log_path = out.join(LOSS_LOG);
    let mut log =
        csv::Writer::from_path(&log_path).map_err(|e| CliError::Data(format!("{}: {e}", log_path.display())))?;
    let mut first = None;
    let mut last = None;
    for step in 0..steps {
        let batch = set.batch(step as u64, DType::F32)?;
        let (loss, parts) = joint_loss(&model, &batch, &cfg.train.triplet, &cfg.train.flow, true)?;
        if !parts.total.is_finite() {
            return Err(CliError::Runtime(format!("non-finite loss at step {step}")));
        }
        let lr = trainer.current_lr();
        let grad_norm = trainer.apply(&loss)?;
        let row = LogRow {
            step,
            lr,
            pr: parts.pr,
            flow: parts.flow,
            total: parts.total,
            grad_norm,
        };
        log.serialize(row).map_err(|e| CliError::Runtime(e.to_string()))?;
        if step % cfg.train.log_every.max(1) == 0 || step + 1 == steps {
            log.flush().map_err(|e| CliError::io(&log_path, e))?;
            progress(&row);
        }
        first.get_or_insert(parts);
        last = Some(parts);
        let done = step + 1;
        if cfg.train.checkpoint_every > 0 && done % cfg.train.checkpoint_every == 0 && done < steps {
            let dir = out.join(CHECKPOINT_DIR);
            create_dir(&dir)?;
            model.save(dir.join(format!("step_{done:06}.safetensors")), &meta(done, &parts))?;
        }
    }
    log.flush().map_err(|e| CliError::io(&log_path, e))?;
    let (first, last) = match (first, last) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(CliError::Config("total_steps must be at least 1".into())),
    };
    let checkpoint = out.join(CHECKPOINT_FILE);
    model.save(&checkpoint, &meta(steps, &last))?;
    Ok(TrainSummary {
        steps,
        first,
        last,
        checkpoint,
    })
}

fn meta(step: usize, parts: &LossBreakdown) -> CheckpointMeta {
    CheckpointMeta {
        step: step as u64,
        metrics: serde_json::json!({ "pr": parts.pr, "flow": parts.flow, "total": parts.total }),
    }
}

/// Loads a checkpoint and checks it against the configured raster.
pub fn load_model(path: &Path, cfg: &RalfConfig) -> Result<Ralf, CliError> {
    if !path.is_file() {
        return Err(CliError::Data(format!("checkpoint {} not found", path.display())));
    }
    let (model, _) = Ralf::load(path)?;
    if model.config() != &cfg.model {
        return Err(CliError::Config(format!(
            "checkpoint {} was trained with a different model configuration",
            path.display()
        )));
    }
    Ok(model)
}

/// Unit-norm descriptors, in input order.
pub fn describe(model: &Ralf, images: &[&BevImage], modality: Modality) -> Result<Vec<Vec<f32>>, CliError> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_CHUNK) {
        let x = images_to_tensor(chunk, model.dtype())?;
        let f = match modality {
            Modality::Radar => model.encode_radar(&x, false)?,
            Modality::Lidar => model.encode_lidar(&x, false)?,
        };
        let d = model.describe(&f, false)?.to_dtype(DType::F32)?;
        out.extend(d.to_vec2::<f32>()?);
    }
    Ok(out)
}

/// Outcome of aligning one radar raster to one LiDAR raster.
#[derive(Debug, Clone)]
pub struct Registration {
    /// `T` with radar-frame point ≈ `T` · LiDAR-frame point.
    pub transform: Option<Pose2<f64>>,
    pub inliers: usize,
    pub n_correspondences: usize,
    pub flow: FlowMap,
    pub failure: Option<String>,
}

impl Registration {
    /// Sensor pose given the pose the LiDAR raster was rendered at.
    pub fn sensor_pose(&self, lidar_pose: &Pose2<f64>) -> Option<Pose2<f64>> {
        self.transform.map(|t| lidar_pose.compose(&t.inverse()))
    }
}

/// Flow prediction and RANSAC for each (radar, LiDAR) pair.
pub fn register(
    model: &Ralf,
    cfg: &RalfConfig,
    pairs: &[(&BevImage, &BevImage)],
) -> Result<Vec<Registration>, CliError> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(EVAL_CHUNK) {
        let radar: Vec<&BevImage> = chunk.iter().map(|p| p.0).collect();
        let lidar: Vec<&BevImage> = chunk.iter().map(|p| p.1).collect();
        let rx = images_to_tensor(&radar, model.dtype())?;
        let lx = images_to_tensor(&lidar, model.dtype())?;
        let fr = model.encode_radar(&rx, false)?;
        let fl = model.encode_lidar(&lx, false)?;
        let preds = model.flow(&fl, &fr, &lx, cfg.train.flow.eval_iterations, false)?;
        let last = preds
            .last()
            .ok_or_else(|| CliError::Runtime("flow head produced no prediction".into()))?;
        for (i, img) in lidar.iter().enumerate() {
            let (u, v) = flow_planes(last, i)?;
            let n = u.len();
            let flow = FlowMap::from_planes(cfg.bev.height, cfg.bev.width, u, v, vec![true; n]);
            let corr =
                flow_to_correspondences::<f64>(img, &flow, &cfg.bev).map_err(|e| CliError::Runtime(e.to_string()))?;
            let n_correspondences = corr.len();
            let returns = radar[i].pixels().iter().filter(|&&p| p > 0.0).count();
            if returns < cfg.ransac.min_inliers {
                out.push(Registration {
                    transform: None,
                    inliers: 0,
                    n_correspondences,
                    flow,
                    failure: Some(format!(
                        "radar raster has {returns} returns, need {}",
                        cfg.ransac.min_inliers
                    )),
                });
                continue;
            }
            let reg = match estimate_pose(&corr, &cfg.ransac) {
                Ok(est) => Registration {
                    transform: Some(est.pose),
                    inliers: est.inliers,
                    n_correspondences,
                    flow,
                    failure: None,
                },
                Err(e) => Registration {
                    transform: None,
                    inliers: 0,
                    n_correspondences,
                    flow,
                    failure: Some(e.to_string()),
                },
            };
            out.push(reg);
        }
    }
    Ok(out)
}

/// Raster settings a map directory was built with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapInfo {
    pub bev: BevConfig,
    pub raster_mode: RasterMode,
    pub submaps: usize,
}

/// Splits the LiDAR map of `frames_dir` into submaps, describes them and saves the database.
pub fn build_map(cfg: &RalfConfig, frames_dir: &Path, checkpoint: &Path, out: &Path) -> Result<MapInfo, CliError> {
    cfg.validate()?;
    let model = load_model(checkpoint, cfg)?;
    let frames = load_frames(frames_dir, &cfg.bev)?;
    let submaps = build_submaps(
        &frames,
        cfg.world.submap_spacing,
        cfg.world.submap_radius,
        &cfg.bev,
        cfg.raster_mode,
    )?;
    let descs = describe(
        &model,
        &submaps.iter().map(|s| &s.bev).collect::<Vec<_>>(),
        Modality::Lidar,
    )?;
    let mut records = Vec::with_capacity(submaps.len());
    for (s, d) in submaps.iter().zip(descs) {
        records.push(SubmapRecord {
            id: s.id,
            pose: s.pose,
            descriptor: GlobalDescriptor::normalized(d)?,
        });
    }
    let db = SubmapDatabase::from_records(records)?;
    create_dir(out)?;
    db.save(out)?;
    let sub_dir = out.join(SUBMAP_DIR);
    create_dir(&sub_dir)?;
    for s in &submaps {
        write_pgm16(
            sub_dir.join(format!("{}.pgm", ralf_core::dataset::frame_stem(s.id))),
            &s.bev,
        )?;
    }
    write_rlfc(out.join(MAP_CLOUD_FILE), MapCloud::from_frames(&frames, None).cloud())?;
    let info = MapInfo {
        bev: cfg.bev,
        raster_mode: cfg.raster_mode,
        submaps: submaps.len(),
    };
    write_json(&out.join(DB_INFO_FILE), &info)?;
    Ok(info)
}

/// A database directory written by [`build_map`].
pub struct MapStore {
    pub db: SubmapDatabase,
    pub info: MapInfo,
    dir: PathBuf,
}

impl MapStore {
    pub fn open(dir: &Path, cfg: &RalfConfig) -> Result<Self, CliError> {
        let info: MapInfo = read_json(&dir.join(DB_INFO_FILE))?;
        if info.bev != cfg.bev {
            return Err(CliError::Config(format!(
                "map {} was built for a {}x{} raster at {} m",
                dir.display(),
                info.bev.height,
                info.bev.width,
                info.bev.resolution
            )));
        }
        let db = SubmapDatabase::load(dir)?;
        if db.is_empty() {
            return Err(CliError::Data(format!("map database {} is empty", dir.display())));
        }
        Ok(Self {
            db,
            info,
            dir: dir.to_path_buf(),
        })
    }

    pub fn submap_bev(&self, id: u64) -> Result<BevImage, CliError> {
        let path = self
            .dir
            .join(SUBMAP_DIR)
            .join(format!("{}.pgm", ralf_core::dataset::frame_stem(id)));
        Ok(read_pgm(path, self.info.bev.resolution, Modality::Lidar)?)
    }

    pub fn map_cloud(&self) -> Result<MapCloud, CliError> {
        Ok(MapCloud::new(read_rlfc(self.dir.join(MAP_CLOUD_FILE))?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseJson {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl From<Pose2<f64>> for PoseJson {
    fn from(p: Pose2<f64>) -> Self {
        Self {
            x: p.x,
            y: p.y,
            theta: p.theta,
        }
    }
}

/// Per-query output of `localize`. When pose estimation fails, `T_pred` is the retrieved
/// submap pose and `failed` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct LocalizeResult {
    pub query_id: u64,
    pub submap_id: u64,
    pub T_pred: PoseJson,
    pub inliers: usize,
    pub n_correspondences: usize,
    pub failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

/// Retrieval, flow and RANSAC for every query frame.
pub fn localize(
    cfg: &RalfConfig,
    queries_dir: &Path,
    map_dir: &Path,
    checkpoint: &Path,
) -> Result<Vec<LocalizeResult>, CliError> {
    cfg.validate()?;
    let store = MapStore::open(map_dir, cfg)?;
    let model = load_model(checkpoint, cfg)?;
    let queries = load_frames(queries_dir, &cfg.bev)?;
    let radar: Vec<&BevImage> = queries.iter().map(|q| &q.radar).collect();
    let descs = describe(&model, &radar, Modality::Radar)?;
    let mut matches = Vec::with_capacity(queries.len());
    let mut submap_bevs = Vec::with_capacity(queries.len());
    for d in &descs {
        let m = store.db.query(d)?;
        submap_bevs.push(store.submap_bev(m.id)?);
        matches.push(m);
    }
    let pairs: Vec<(&BevImage, &BevImage)> = radar.iter().copied().zip(submap_bevs.iter()).collect();
    let regs = register(&model, cfg, &pairs)?;
    Ok(queries
        .iter()
        .zip(matches.iter().zip(regs))
        .map(|(q, (m, reg))| LocalizeResult {
            query_id: q.id,
            submap_id: m.id,
            T_pred: reg.sensor_pose(&m.pose).unwrap_or(m.pose).into(),
            inliers: reg.inliers,
            n_correspondences: reg.n_correspondences,
            failed: reg.transform.is_none(),
            failure: reg.failure,
        })
        .collect())
}

/// Everything `evaluate` measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall: RecallReport,
    /// Localization from perturbed initial poses; failed queries count with their initial pose.
    pub pose_errors: PoseErrorReport,
    pub localization_failures: usize,
    pub num_queries: usize,
}

pub const RECALL_JSON: &str = "recall.json";
pub const RECALL_CSV: &str = "recall.csv";
pub const POSE_ERRORS_JSON: &str = "pose_errors.json";
pub const POSE_ERRORS_CSV: &str = "pose_errors.csv";
pub const METRICS_JSON: &str = "metrics.json";

/// Cross-modal recall@k against the database and metric localization from initial poses
/// perturbed by `cfg.eval.augment` around the ground truth.
pub fn evaluate(
    cfg: &RalfConfig,
    map_dir: &Path,
    queries_dir: &Path,
    checkpoint: &Path,
    out: Option<&Path>,
) -> Result<EvalReport, CliError> {
    cfg.validate()?;
    let store = MapStore::open(map_dir, cfg)?;
    let model = load_model(checkpoint, cfg)?;
    let queries = load_frames(queries_dir, &cfg.bev)?;
    let radar: Vec<&BevImage> = queries.iter().map(|q| &q.radar).collect();
    let descs = describe(&model, &radar, Modality::Radar)?;
    let recall_queries: Vec<RecallQuery<'_>> = descs
        .iter()
        .zip(&queries)
        .map(|(d, q)| RecallQuery {
            descriptor: d,
            pose: q.pose,
        })
        .collect();
    let recall = evaluation::recall_at_k(&recall_queries, &store.db, &cfg.eval.k_values, cfg.eval.threshold)?;

    let map = store.map_cloud()?;
    let inits: Vec<Pose2<f64>> = queries
        .iter()
        .map(|q| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.stream_seed(streams::EVAL_PERTURB));
            rng.set_stream(q.id);
            perturb_pose(&q.pose, &cfg.eval.augment, &mut rng)
        })
        .collect();
    let lidar: Vec<BevImage> = inits
        .iter()
        .map(|p| map.render(p, &cfg.bev, store.info.raster_mode))
        .collect();
    let pairs: Vec<(&BevImage, &BevImage)> = radar.iter().copied().zip(lidar.iter()).collect();
    let regs = register(&model, cfg, &pairs)?;
    let mut failures = 0;
    let predictions: Vec<(Pose2<f64>, Pose2<f64>)> = regs
        .iter()
        .zip(inits.iter().zip(&queries))
        .map(|(reg, (init, q))| {
            let pred = reg.sensor_pose(init).unwrap_or_else(|| {
                failures += 1;
                *init
            });
            (pred, q.pose)
        })
        .collect();
    let pose_errors = evaluation::pose_errors(&predictions)?;
    let report = EvalReport {
        recall,
        pose_errors,
        localization_failures: failures,
        num_queries: queries.len(),
    };
    if let Some(out) = out {
        write_report(&report, out)?;
    }
    Ok(report)
}

pub fn write_report(report: &EvalReport, out: &Path) -> Result<(), CliError> {
    create_dir(out)?;
    evaluation::write_json(out.join(RECALL_JSON), &report.recall)?;
    evaluation::write_recall_csv(out.join(RECALL_CSV), &report.recall)?;
    evaluation::write_json(out.join(POSE_ERRORS_JSON), &report.pose_errors)?;
    evaluation::write_pose_errors_csv(out.join(POSE_ERRORS_CSV), &report.pose_errors)?;
    write_json(&out.join(METRICS_JSON), report)
}

/// Writes `results` as a JSON array.
pub fn write_localize(results: &[LocalizeResult], out: &Path) -> Result<(), CliError> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_json(out, results)
}

/// Flushes a progress line to stderr.
pub fn report_progress(row: &LogRow) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(
        err,
        "step {:>6}  lr {:.2e}  pr {:.4}  flow {:.4}  total {:.4}  |g| {:.3}",
        row.step, row.lr, row.pr, row.flow, row.total, row.grad_norm
    );
}
