//! Python bindings for the ehrbench pipeline and its evaluation primitives.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use ehrbench_core::config::RunConfig;
use ehrbench_core::encoders::{self, EmbeddingModality};
use ehrbench_core::eval::{self, EvalError};
use ehrbench_core::fusion::{self, LogRegHyper};
use ehrbench_core::lvlm::{self, ParsedAnswer};
use ehrbench_core::pipeline::{self, PipelineError, Stage};
use ehrbench_core::synth::{self, SynthConfig};

create_exception!(ehrbench, EhrbenchError, PyException);
create_exception!(ehrbench, ConfigError, EhrbenchError);

fn pipeline_err(e: PipelineError) -> PyErr {
    match e {
        PipelineError::Config(c) => ConfigError::new_err((c.field.clone(), c.to_string())),
        other => EhrbenchError::new_err((other.exit_code(), other.to_string())),
    }
}

fn eval_err(e: EvalError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn other_err(e: impl std::fmt::Display) -> PyErr {
    EhrbenchError::new_err(e.to_string())
}

/// Converts any serializable value into plain Python objects via JSON.
fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(other_err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn flatten(rows: &[Vec<f64>]) -> PyResult<(Vec<f64>, usize)> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Ok((rows.concat(), d))
}

#[pyfunction]
fn auroc(y: Vec<u8>, p: Vec<f64>) -> PyResult<f64> {
    eval::auroc(&y, &p).map_err(eval_err)
}

#[pyfunction]
fn auprc(y: Vec<u8>, p: Vec<f64>) -> PyResult<f64> {
    eval::auprc(&y, &p).map_err(eval_err)
}

/// Confusion counts and threshold metrics; undefined ratios are `None`.
#[pyfunction]
fn classification_metrics(py: Python<'_>, y: Vec<u8>, yhat: Vec<u8>) -> PyResult<Py<PyAny>> {
    let m = eval::classification_metrics(&y, &yhat).map_err(eval_err)?;
    to_py(py, &m)
}

/// Percentile bootstrap CI for one of the reported metrics.
#[pyfunction]
#[pyo3(signature = (metric, y, p, n_boot=1000, level=0.95, seed=0, threshold=0.5))]
fn bootstrap_ci(
    py: Python<'_>,
    metric: &str,
    y: Vec<u8>,
    p: Vec<f64>,
    n_boot: usize,
    level: f64,
    seed: u64,
    threshold: f64,
) -> PyResult<Py<PyAny>> {
    if !eval::REPORTED_METRICS.contains(&metric) {
        return Err(PyValueError::new_err(format!("unknown metric {metric:?}")));
    }
    let name = metric.to_string();
    let f = move |yb: &[u8], pb: &[f64]| -> Option<f64> {
        match name.as_str() {
            "auroc" => eval::auroc(yb, pb).ok(),
            "auprc" => eval::auprc(yb, pb).ok(),
            other => eval::classification_metrics(yb, &eval::threshold_predictions(pb, threshold))
                .ok()
                .and_then(|m| m.get(other)),
        }
    };
    let r = py
        .detach(|| eval::bootstrap_ci(metric, f, &y, &p, n_boot, level, seed))
        .map_err(eval_err)?;
    to_py(py, &r)
}

#[pyfunction]
fn demographic_parity(yhat: Vec<u8>, groups: Vec<String>) -> PyResult<f64> {
    let g: Vec<&str> = groups.iter().map(String::as_str).collect();
    eval::demographic_parity(&yhat, &g).map_err(eval_err)
}

#[pyfunction]
fn equalized_odds(py: Python<'_>, y: Vec<u8>, yhat: Vec<u8>, groups: Vec<String>) -> PyResult<Py<PyAny>> {
    let g: Vec<&str> = groups.iter().map(String::as_str).collect();
    let eo = eval::equalized_odds(&y, &yhat, &g).map_err(eval_err)?;
    to_py(py, &eo)
}

/// `phi[n][d] = w[d] * (x[n][d] - mu[d])`.
#[pyfunction]
fn linear_shap(weights: Vec<f64>, x: Vec<Vec<f64>>, mu: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
    let (flat, d) = flatten(&x)?;
    let phi = eval::linear_shap(&weights, &flat, &mu).map_err(eval_err)?;
    Ok(phi.chunks(d.max(1)).map(<[f64]>::to_vec).collect())
}

/// Returns "yes", "no" or "refusal".
#[pyfunction]
fn parse_answer(text: &str) -> &'static str {
    match lvlm::parse_answer(text) {
        ParsedAnswer::Yes => "yes",
        ParsedAnswer::No => "no",
        ParsedAnswer::Refusal => "refusal",
    }
}

#[pyfunction]
fn question(task: &str) -> PyResult<String> {
    let task = serde_json::from_value(serde_json::Value::String(task.into()))
        .map_err(|_| PyValueError::new_err(format!("unknown task {task:?}")))?;
    Ok(lvlm::question(task))
}

/// Writes synthetic source tables to `out_dir`. `config` is a JSON object
/// of generator settings; omitted keys take their defaults.
#[pyfunction]
#[pyo3(signature = (out_dir, config=None))]
fn generate_synthetic(py: Python<'_>, out_dir: PathBuf, config: Option<&str>) -> PyResult<Py<PyAny>> {
    let cfg: SynthConfig = match config {
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => SynthConfig::default(),
    };
    let truth = py.detach(|| synth::generate(&cfg, &out_dir)).map_err(other_err)?;
    to_py(py, &truth)
}

/// Reads a validated embedding manifest directory.
#[pyfunction]
fn read_manifest(py: Python<'_>, dir: PathBuf) -> PyResult<Py<PyAny>> {
    let m = encoders::read_manifest(&dir).map_err(other_err)?;
    let rows: Vec<Vec<f32>> = (0..m.len()).map(|i| m.row(i).to_vec()).collect();
    to_py(
        py,
        &serde_json::json!({
            "modality": m.modality.name(),
            "encoder_name": m.encoder_name,
            "dimension": m.dimension,
            "ids": m.ids,
            "vectors": rows,
        }),
    )
}

#[pyfunction]
fn write_manifest(
    dir: PathBuf,
    modality: &str,
    encoder_name: &str,
    ids: Vec<i64>,
    vectors: Vec<Vec<f32>>,
) -> PyResult<()> {
    let modality =
        EmbeddingModality::parse(modality).ok_or_else(|| PyValueError::new_err(format!("unknown modality {modality:?}")))?;
    if ids.len() != vectors.len() {
        return Err(PyValueError::new_err("ids and vectors differ in length"));
    }
    let dimension = vectors.first().map_or(0, Vec::len);
    let m = encoders::EmbeddingManifest::from_rows(modality, encoder_name, dimension, ids.into_iter().zip(vectors).collect())
        .map_err(other_err)?;
    encoders::write_manifest(&m, &dir).map_err(other_err)?;
    Ok(())
}

/// L2-regularized logistic regression.
#[pyclass(module = "ehrbench")]
struct LogRegModel {
    inner: fusion::LogRegModel,
}

#[pymethods]
impl LogRegModel {
    /// Fits on rows `x` and labels `y`; `lam=None` uses 1/n.
    #[staticmethod]
    #[pyo3(signature = (x, y, lam=None, seed=0, max_iter=1000, tol=1e-6))]
    fn fit(
        py: Python<'_>,
        x: Vec<Vec<f64>>,
        y: Vec<u8>,
        lam: Option<f64>,
        seed: u64,
        max_iter: usize,
        tol: f64,
    ) -> PyResult<Self> {
        let (flat, d) = flatten(&x)?;
        let hyper = LogRegHyper {
            lambda: lam,
            max_iter,
            tol,
            ..Default::default()
        };
        let inner = py
            .detach(|| fusion::train_logreg(&flat, &y, d, &hyper, seed))
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: fusion::LogRegModel::load(&path).map_err(other_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(other_err)
    }

    fn predict_proba(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let (flat, d) = flatten(&x)?;
        fusion::predict_proba(&self.inner, &flat, d).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights.clone()
    }

    #[getter]
    fn intercept(&self) -> f64 {
        self.inner.intercept
    }

    #[getter]
    fn metadata(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.metadata)
    }

    fn __repr__(&self) -> String {
        format!(
            "LogRegModel(dimension={}, converged={})",
            self.inner.dimension(),
            self.inner.metadata.converged
        )
    }
}

/// Stage runner bound to one configuration file.
#[pyclass(module = "ehrbench", unsendable)]
struct Pipeline {
    inner: pipeline::Pipeline,
}

#[pymethods]
impl Pipeline {
    /// `overrides` maps dotted keys to values, as on the command line.
    #[new]
    #[pyo3(signature = (config_path, overrides=None))]
    fn new(config_path: PathBuf, overrides: Option<Vec<(String, String)>>) -> PyResult<Self> {
        let cfg = RunConfig::load(&config_path, &overrides.unwrap_or_default())
            .map_err(|e| pipeline_err(PipelineError::Config(e)))?;
        Ok(Self {
            inner: pipeline::Pipeline::new(cfg).map_err(pipeline_err)?,
        })
    }

    /// Runs one stage and returns its status line.
    fn run(&mut self, stage: &str) -> PyResult<String> {
        let st = Stage::parse(stage).ok_or_else(|| PyValueError::new_err(format!("unknown stage {stage:?}")))?;
        Ok(self.inner.run(st).map_err(pipeline_err)?.to_string())
    }

    /// Runs every stage; returns `(stage, status)` pairs.
    fn run_all(&mut self) -> PyResult<Vec<(String, String)>> {
        let mut out = Vec::new();
        self.inner
            .run_all(|st, status| out.push((st.name().to_string(), status.to_string())))
            .map_err(pipeline_err)?;
        Ok(out)
    }

    #[getter]
    fn work_dir(&self) -> PathBuf {
        self.inner.config.paths.work_dir.clone()
    }

    #[getter]
    fn provenance(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, self.inner.provenance())
    }
}

#[pymodule]
fn ehrbench(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("EhrbenchError", m.py().get_type::<EhrbenchError>())?;
    m.add("ConfigError", m.py().get_type::<ConfigError>())?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(auprc, m)?)?;
    m.add_function(wrap_pyfunction!(classification_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap_ci, m)?)?;
    m.add_function(wrap_pyfunction!(demographic_parity, m)?)?;
    m.add_function(wrap_pyfunction!(equalized_odds, m)?)?;
    m.add_function(wrap_pyfunction!(linear_shap, m)?)?;
    m.add_function(wrap_pyfunction!(parse_answer, m)?)?;
    m.add_function(wrap_pyfunction!(question, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(read_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(write_manifest, m)?)?;
    m.add_class::<LogRegModel>()?;
    m.add_class::<Pipeline>()?;
    m.add("STAGES", Stage::ALL.iter().map(|s| s.name()).collect::<Vec<_>>())?;
    Ok(())
}
