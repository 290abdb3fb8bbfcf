//! Discrimination and classification metrics, bootstrap intervals, subgroup
//! fairness and linear-model attributions.

mod bootstrap;
mod fairness;
mod metrics;
mod shap;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{GroupingConfig, Task};
use crate::featurize::StatsProvenance;
use crate::fusion::{predict_proba, FusedDataset, LogRegModel, SplitBy};

pub use bootstrap::{bootstrap_ci, quantile_sorted, resample_indices, MetricResult};
pub use fairness::{
    demographic_parity, equalized_odds, fairness_report, selection_rates, subgroup_performance,
    EqualizedOdds, FairnessReport, SubgroupRow, SubgroupTable,
};
pub use metrics::{
    auprc, auroc, classification_metrics, metrics_from_confusion, pr_points, roc_points,
    threshold_predictions, ClassificationMetrics, Confusion, PrPoint, RocPoint,
};
pub use shap::{linear_shap, modality_importance, ModalityShare};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("only {valid} of {total} bootstrap resamples gave a defined metric")]
    TooFewValidResamples { valid: usize, total: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("labels must be 0 or 1, found {0}")]
    InvalidLabel(u8),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_boot: usize,
    pub level: f64,
    pub seed: u64,
    pub threshold: f64,
    pub fairness_attributes: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_boot: 1000,
            level: 0.95,
            seed: 0,
            threshold: 0.5,
            fairness_attributes: vec!["gender".into(), "race".into(), "age_band".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub dimension: usize,
    pub lambda: f64,
    pub iterations: usize,
    pub converged: bool,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub split_by: SplitBy,
    pub threshold: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub test_positives: usize,
    pub modalities: Vec<String>,
    pub metrics: Vec<MetricResult>,
    pub confusion: Confusion,
    pub fairness: Vec<FairnessReport>,
    pub modality_importance: Vec<ModalityShare>,
    pub model: ModelSummary,
    /// Where the standardization and fill statistics were computed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_statistics: Option<StatsProvenance>,
}

impl EvalReport {
    pub fn metric(&self, name: &str) -> Option<&MetricResult> {
        self.metrics.iter().find(|m| m.name == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub probabilities: Vec<f64>,
    pub roc: Vec<RocPoint>,
    pub pr: Vec<PrPoint>,
}

pub const REPORTED_METRICS: [&str; 7] = ["auroc", "auprc", "accuracy", "precision", "recall", "specificity", "f1"];

fn metric_with_ci(name: &str, y: &[u8], p: &[f64], cfg: &EvalConfig) -> MetricResult {
    let threshold = cfg.threshold;
    let f = move |yb: &[u8], pb: &[f64]| -> Option<f64> {
        match name {
            "auroc" => auroc(yb, pb).ok(),
            "auprc" => auprc(yb, pb).ok(),
            other => classification_metrics(yb, &threshold_predictions(pb, threshold))
                .ok()
                .and_then(|m| m.get(other)),
        }
    };
    bootstrap_ci(name, f, y, p, cfg.n_boot, cfg.level, cfg.seed)
        .unwrap_or_else(|e| MetricResult::undefined(name, cfg.n_boot, cfg.level, cfg.seed, e.to_string()))
}

/// Scores `test` with `model` and builds the full report. SHAP background is
/// the training-split column mean.
pub fn evaluate(
    model: &LogRegModel,
    train: &FusedDataset,
    test: &FusedDataset,
    task: Task,
    split_by: SplitBy,
    cfg: &EvalConfig,
    grouping: &GroupingConfig,
) -> Result<Evaluation, EvalError> {
    let p = predict_proba(model, &test.x, test.d).map_err(|_| EvalError::DimensionMismatch {
        expected: model.dimension(),
        found: test.d,
    })?;
    let y = &test.y;
    let yhat = threshold_predictions(&p, cfg.threshold);
    let metrics = REPORTED_METRICS.iter().map(|m| metric_with_ci(m, y, &p, cfg)).collect();

    let mut fairness = Vec::new();
    for attr in &cfg.fairness_attributes {
        let labels: Vec<&str> = test
            .groups
            .iter()
            .map(|g| g.get(attr).ok_or_else(|| EvalError::InvalidArgument(format!("unknown attribute {attr:?}"))))
            .collect::<Result<_, _>>()?;
        fairness.push(fairness_report(y, &p, &yhat, &labels, attr, &grouping.known_groups(attr))?);
    }

    let mu = train.column_means();
    let phi = linear_shap(&model.weights, &test.x, &mu)?;
    let importance = modality_importance(&phi, &model.weights, &test.feature_map)?;

    Ok(Evaluation {
        report: EvalReport {
            task,
            split_by,
            threshold: cfg.threshold,
            n_train: train.n,
            n_test: test.n,
            test_positives: y.iter().filter(|&&v| v == 1).count(),
            modalities: test.presence_names.clone(),
            metrics,
            confusion: Confusion::from_labels(y, &yhat),
            fairness,
            modality_importance: importance,
            model: ModelSummary {
                dimension: model.dimension(),
                lambda: model.metadata.lambda,
                iterations: model.metadata.iterations,
                converged: model.metadata.converged,
                status: model.metadata.status.clone(),
            },
            feature_statistics: None,
        },
        roc: roc_points(y, &p).unwrap_or_default(),
        pr: pr_points(y, &p).unwrap_or_default(),
        probabilities: p,
    })
}

fn csv_err(path: &Path, e: impl std::fmt::Display) -> EvalError {
    EvalError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| csv_err(path, e))
}

/// Writes `eval_report.json`, `roc_points.csv` and `pr_points.csv`.
pub fn write_evaluation(eval: &Evaluation, dir: &Path) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir).map_err(|e| csv_err(dir, e))?;
    let path = dir.join("eval_report.json");
    let mut text = serde_json::to_string_pretty(&eval.report).map_err(|e| csv_err(&path, e))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| csv_err(&path, e))?;
    write_rows(&dir.join("roc_points.csv"), &eval.roc)?;
    write_rows(&dir.join("pr_points.csv"), &eval.pr)
}
