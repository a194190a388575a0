use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ralf_cli::config::{Preset, RalfConfig};
use ralf_cli::{data, pipeline, plot, CliError};

/// Radar localization in LiDAR maps: synthetic data, training and evaluation.
#[derive(Debug, Parser)]
#[command(name = "ralf", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON configuration merged over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Starting configuration.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Master seed (RALF_SEED takes precedence).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Training steps.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Pairs per training batch.
    #[arg(long, global = true)]
    batch_pairs: Option<usize>,
    /// Peak learning rate.
    #[arg(long, global = true)]
    lr: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a world and write its map and query sequences.
    SynthWorld {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the joint model on a map sequence.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a sequence's LiDAR map into described submaps.
    BuildMap {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieve and register every query; writes a JSON array.
    Localize {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recall@k and pose errors under initial-pose perturbation.
    Evaluate {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Retrieval success radius, meters.
        #[arg(long)]
        threshold: Option<f64>,
        /// Comma-separated k values.
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recall curve, and with a model, query overlays and flow fields.
    Plot {
        /// Directory written by `evaluate`.
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, requires_all = ["queries", "checkpoint"])]
        db: Option<PathBuf>,
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Queries to draw overlays for.
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
}

fn resolve(common: &Common) -> Result<RalfConfig, CliError> {
    let mut cfg = RalfConfig::preset(common.preset);
    if let Some(path) = &common.config {
        cfg = cfg.merged_with_file(path)?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(s) = common.steps {
        cfg.train.optim.total_steps = s;
    }
    if let Some(b) = common.batch_pairs {
        cfg.train.batch_pairs = b;
    }
    if let Some(lr) = common.lr {
        cfg.train.optim.lr = lr;
    }
    let cfg = cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = resolve(&cli.common)?;
    match cli.command {
        Command::SynthWorld { out } => {
            let s = data::synth_world(&cfg, &out)?;
            ralf_cli::write_json(&out.join("config.json"), &cfg)?;
            println!(
                "{} map frames, {} queries, {} walls, {} poles -> {}",
                s.map_frames,
                s.query_frames,
                s.walls,
                s.poles,
                out.display()
            );
        }
        Command::Train { data, out } => {
            let frames = data::load_frames(&data, &cfg.bev)?;
            let set = data::TrainingSet::new(frames, &cfg)?;
            let s = pipeline::train_on(&cfg, &set, &out, pipeline::report_progress)?;
            ralf_cli::write_json(&out.join("config.json"), &cfg)?;
            println!(
                "{} steps, total loss {:.4} -> {:.4}, checkpoint {}",
                s.steps,
                s.first.total,
                s.last.total,
                s.checkpoint.display()
            );
        }
        Command::BuildMap {
            frames,
            checkpoint,
            out,
        } => {
            let info = pipeline::build_map(&cfg, &frames, &checkpoint, &out)?;
            println!("{} submaps -> {}", info.submaps, out.display());
        }
        Command::Localize {
            queries,
            db,
            checkpoint,
            out,
        } => {
            let results = pipeline::localize(&cfg, &queries, &db, &checkpoint)?;
            pipeline::write_localize(&results, &out)?;
            let failed = results.iter().filter(|r| r.failed).count();
            println!("{} queries, {failed} pose failures -> {}", results.len(), out.display());
        }
        Command::Evaluate {
            db,
            queries,
            checkpoint,
            threshold,
            k,
            out,
        } => {
            if let Some(t) = threshold {
                cfg.eval.threshold = t;
            }
            if let Some(k) = k {
                cfg.eval.k_values = k;
            }
            cfg.validate()?;
            let r = pipeline::evaluate(&cfg, &db, &queries, &checkpoint, Some(&out))?;
            for (k, v) in r.recall.k_values.iter().zip(&r.recall.recall_at_k) {
                println!("recall@{k} ({} m): {v:.3}", r.recall.distance_threshold);
            }
            println!(
                "mean |dx| {:.3} m, |dy| {:.3} m, |dtheta| {:.3} deg, {} failures of {}",
                r.pose_errors.mean_abs_dx,
                r.pose_errors.mean_abs_dy,
                r.pose_errors.mean_abs_dtheta,
                r.localization_failures,
                r.num_queries
            );
        }
        Command::Plot {
            report,
            out,
            db,
            queries,
            checkpoint,
            count,
        } => {
            let written = plot::plot(&cfg, &report, &out)?;
            let mut n = written.len();
            if let (Some(db), Some(queries), Some(ckpt)) = (db, queries, checkpoint) {
                n += plot::overlays(&cfg, &db, &queries, &ckpt, &out, count)?.len();
            }
            println!("{n} figures -> {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ralf: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
