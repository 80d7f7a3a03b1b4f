//! Trajectory metrics (ADE, FDE and a rater-feedback surrogate) and
//! category-wise evaluation reports.

mod plot;
mod report;

pub use plot::{render_trajectory_plot, GT_COLOR, PLOT_SIZE, PRED_COLOR, REF_COLOR};
pub use report::{
    evaluate, evaluate_checkpoint, render_ablation_table, write_report, CategoryMetrics, EvalReport, EvalSplit,
    Metrics, ModelPlanner, OraclePlanner, Planner, RecordResult, PLOTS_DIR, REPORT_JSON, REPORT_SCHEMA_VERSION,
    REPORT_TXT, RFS_LABEL,
};

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingError;
use crate::model::ModelError;
use crate::scenario::{RaterReference, ScenarioError, TIMESTEP_S};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unsupported horizon {0} s")]
    Horizon(f64),
    #[error("no rater references")]
    NoReferences,
    #[error("evaluation split is empty")]
    EmptySplit,
    #[error("invalid report: {0}")]
    Report(String),
    #[error("no embeddings for record {id} in {dir}")]
    MissingEmbeddings { id: String, dir: String },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Number of leading waypoints covered by a horizon in seconds. Accepts any
/// positive multiple of the 0.25 s step.
pub fn horizon_points(horizon_s: f64) -> Result<usize, EvalError> {
    let k = horizon_s / TIMESTEP_S;
    if !(k.is_finite() && k >= 1.0 && (k - k.round()).abs() < 1e-9) {
        return Err(EvalError::Horizon(horizon_s));
    }
    Ok(k.round() as usize)
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn check_pair(pred: &[[f64; 2]], gt: &[[f64; 2]], n: usize) -> Result<(), EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::Shape(format!("pred has {} points, gt has {}", pred.len(), gt.len())));
    }
    if pred.len() < n {
        return Err(EvalError::Shape(format!("horizon needs {n} points, trajectories have {}", pred.len())));
    }
    Ok(())
}

/// Average displacement error over the first `horizon_s` seconds.
pub fn ade(pred: &[[f64; 2]], gt: &[[f64; 2]], horizon_s: f64) -> Result<f64, EvalError> {
    let n = horizon_points(horizon_s)?;
    check_pair(pred, gt, n)?;
    Ok(pred[..n].iter().zip(&gt[..n]).map(|(&p, &g)| dist(p, g)).sum::<f64>() / n as f64)
}

/// Displacement error at the waypoint `horizon_s` seconds ahead.
pub fn fde(pred: &[[f64; 2]], gt: &[[f64; 2]], horizon_s: f64) -> Result<f64, EvalError> {
    let n = horizon_points(horizon_s)?;
    check_pair(pred, gt, n)?;
    Ok(dist(pred[n - 1], gt[n - 1]))
}

/// Parameters of the rater-feedback surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RfsParams {
    /// Radial trust distance within which a reference's full score is kept.
    pub tolerance_m: f64,
    /// Exponential decay per metre beyond the tolerance.
    pub decay_rate: f64,
    pub floor: f64,
    /// Checkpoints (seconds) at which deviation is measured.
    pub checkpoints_s: [f64; 2],
}

impl Default for RfsParams {
    fn default() -> Self {
        RfsParams {
            tolerance_m: 2.0,
            decay_rate: 0.4,
            floor: 0.0,
            checkpoints_s: [3.0, 5.0],
        }
    }
}

/// Rater-feedback surrogate score in `[floor, 10]`.
///
/// For each reference the deviation `d` is the largest Euclidean distance
/// at the checkpoints. The candidate score is the reference score when
/// `d <= tolerance_m`, otherwise `score * exp(-decay_rate * (d - tolerance_m))`,
/// and never below `floor`. The result is the best candidate.
pub fn rfs(pred: &[[f64; 2]], references: &[RaterReference], params: &RfsParams) -> Result<f64, EvalError> {
    if references.is_empty() {
        return Err(EvalError::NoReferences);
    }
    let idx = params
        .checkpoints_s
        .iter()
        .map(|&s| horizon_points(s).map(|n| n - 1))
        .collect::<Result<Vec<_>, _>>()?;
    let mut best = f64::NEG_INFINITY;
    for r in references {
        let w = r.trajectory.waypoints();
        check_pair(pred, w, idx.iter().max().map_or(0, |m| m + 1))?;
        let d = idx.iter().map(|&i| dist(pred[i], w[i])).fold(0.0, f64::max);
        let raw = if d <= params.tolerance_m {
            r.score
        } else {
            r.score * (-params.decay_rate * (d - params.tolerance_m)).exp()
        };
        best = best.max(raw.max(params.floor));
    }
    Ok(best)
}
