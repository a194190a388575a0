//! Recall@k and relative pose error statistics.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::database::{DatabaseError, SubmapDatabase};
use crate::geometry::Pose2;
use crate::scalar::wrap_angle;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("database is empty")]
    EmptyDatabase,
    #[error("no predictions to evaluate")]
    EmptyInput,
    #[error("k must be positive")]
    ZeroK,
    #[error(transparent)]
    Database(#[from] DatabaseError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One query: its descriptor and ground-truth pose.
#[derive(Debug, Clone)]
pub struct RecallQuery<'a> {
    pub descriptor: &'a [f32],
    pub pose: Pose2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub k_values: Vec<usize>,
    pub recall_at_k: Vec<f64>,
    pub distance_threshold: f64,
    pub num_queries: usize,
}

/// For each k, the fraction of queries with a record within `threshold` among their top k.
pub fn recall_at_k(
    queries: &[RecallQuery<'_>],
    db: &SubmapDatabase,
    k_values: &[usize],
    threshold: f64,
) -> Result<RecallReport, EvalError> {
    if db.is_empty() {
        return Err(EvalError::EmptyDatabase);
    }
    if k_values.contains(&0) {
        return Err(EvalError::ZeroK);
    }
    let k_max = k_values.iter().copied().max().unwrap_or(1).min(db.len());
    // rank of the first correct record per query, if any
    let mut first_hit = Vec::with_capacity(queries.len());
    for q in queries {
        let ranked = db.top_k(q.descriptor, k_max)?;
        first_hit.push(ranked.iter().position(|m| m.pose.distance(&q.pose) <= threshold));
    }
    let n = queries.len().max(1) as f64;
    let recall_at_k = k_values
        .iter()
        .map(|&k| first_hit.iter().filter(|h| matches!(h, Some(r) if *r < k)).count() as f64 / n)
        .collect();
    Ok(RecallReport {
        k_values: k_values.to_vec(),
        recall_at_k,
        distance_threshold: threshold,
        num_queries: queries.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseErrorRecord {
    pub dx: f64,
    pub dy: f64,
    /// Degrees.
    pub dtheta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseErrorReport {
    pub mean_abs_dx: f64,
    pub mean_abs_dy: f64,
    /// Degrees.
    pub mean_abs_dtheta: f64,
    pub per_query: Vec<PoseErrorRecord>,
}

/// Error of `pred` expressed in the ground-truth vehicle frame.
pub fn pose_error(pred: &Pose2<f64>, gt: &Pose2<f64>) -> PoseErrorRecord {
    // translation part of gt^-1 * pred
    let (s, c) = gt.theta.sin_cos();
    let (tx, ty) = (pred.x - gt.x, pred.y - gt.y);
    PoseErrorRecord {
        dx: (c * tx + s * ty).abs(),
        dy: (-s * tx + c * ty).abs(),
        dtheta: wrap_angle(pred.theta - gt.theta).abs().to_degrees(),
    }
}

/// Mean absolute errors over `(T_pred, T_gt)` pairs.
pub fn pose_errors(pairs: &[(Pose2<f64>, Pose2<f64>)]) -> Result<PoseErrorReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let per_query: Vec<_> = pairs.iter().map(|(p, g)| pose_error(p, g)).collect();
    let n = per_query.len() as f64;
    let mean = |f: fn(&PoseErrorRecord) -> f64| per_query.iter().map(f).sum::<f64>() / n;
    Ok(PoseErrorReport {
        mean_abs_dx: mean(|r| r.dx),
        mean_abs_dy: mean(|r| r.dy),
        mean_abs_dtheta: mean(|r| r.dtheta),
        per_query,
    })
}

pub fn write_json<S: Serialize>(path: impl AsRef<Path>, report: &S) -> Result<(), EvalError> {
    fs::write(path, serde_json::to_string_pretty(report)? + "\n")?;
    Ok(())
}

pub fn write_recall_csv(path: impl AsRef<Path>, report: &RecallReport) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["k", "recall", "threshold_m"])?;
    for (k, r) in report.k_values.iter().zip(&report.recall_at_k) {
        w.write_record([k.to_string(), r.to_string(), report.distance_threshold.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_pose_errors_csv(path: impl AsRef<Path>, report: &PoseErrorReport) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in &report.per_query {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
