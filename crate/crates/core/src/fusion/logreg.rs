//! L2-regularized logistic regression fitted with L-BFGS.

use std::collections::BTreeMap;
use std::path::Path;

use base64::Engine;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{read_json, write_json, FusionError};

const MODEL_FORMAT: &str = "ehrbench-logreg/1";
const ROW_CHUNK: usize = 256;

/// Numerically stable logistic function.
pub fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

fn softplus(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

/// Per-row log-loss of a linear score.
pub fn log_loss(score: f64, y: u8) -> f64 {
    softplus(score) - if y == 1 { score } else { 0.0 }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean log-loss + (λ/2)‖w‖² and its gradient. `theta` is `[w_0..w_{d-1}, b]`;
/// the intercept is not penalized. Rows are reduced in fixed-size chunks in
/// order, so the result does not depend on the thread count.
pub fn objective_and_gradient(x: &[f64], y: &[u8], d: usize, theta: &[f64], lambda: f64) -> (f64, Vec<f64>) {
    let n = y.len();
    let (w, b) = theta.split_at(d);
    let b = b[0];
    let partials: Vec<(f64, Vec<f64>)> = (0..n.div_ceil(ROW_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut loss = 0.0;
            let mut g = vec![0.0; d + 1];
            for i in c * ROW_CHUNK..((c + 1) * ROW_CHUNK).min(n) {
                let row = &x[i * d..(i + 1) * d];
                let s = dot(w, row) + b;
                loss += log_loss(s, y[i]);
                let r = sigmoid(s) - y[i] as f64;
                for (gj, xj) in g.iter_mut().zip(row) {
                    *gj += r * xj;
                }
                g[d] += r;
            }
            (loss, g)
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; d + 1];
    for (l, g) in partials {
        loss += l;
        for (a, v) in grad.iter_mut().zip(g) {
            *a += v;
        }
    }
    let inv_n = 1.0 / n as f64;
    loss *= inv_n;
    for g in &mut grad {
        *g *= inv_n;
    }
    for j in 0..d {
        grad[j] += lambda * w[j];
    }
    loss += 0.5 * lambda * dot(w, w);
    (loss, grad)
}

pub fn objective(x: &[f64], y: &[u8], d: usize, theta: &[f64], lambda: f64) -> f64 {
    objective_and_gradient(x, y, d, theta, lambda).0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogRegHyper {
    /// `None` means `1 / n_train`.
    pub lambda: Option<f64>,
    pub max_iter: usize,
    pub tol: f64,
    pub memory: usize,
    /// Fit on z-scored columns, then fold the scaling back into the weights.
    pub standardize: bool,
}

impl Default for LogRegHyper {
    fn default() -> Self {
        Self {
            lambda: None,
            max_iter: 1000,
            tol: 1e-6,
            memory: 10,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetadata {
    pub seed: u64,
    pub lambda: f64,
    pub lambda_rule: String,
    pub standardized: bool,
    pub init: String,
    pub optimizer: String,
    pub iterations: usize,
    pub converged: bool,
    pub status: String,
    pub grad_inf_norm: f64,
    pub objective: f64,
    pub n_train: usize,
    pub n_positive: usize,
}

/// Weights and intercept act on raw (unstandardized) feature values.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRegModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub metadata: TrainMetadata,
    /// Checksums of the artifacts the model was fitted against.
    pub references: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    dimension: usize,
    weights_b64: String,
    intercept: f64,
    metadata: TrainMetadata,
    references: BTreeMap<String, String>,
}

impl LogRegModel {
    pub fn dimension(&self) -> usize {
        self.weights.len()
    }

    pub fn score(&self, row: &[f64]) -> f64 {
        dot(&self.weights, row) + self.intercept
    }

    pub fn save(&self, path: &Path) -> Result<(), FusionError> {
        let bytes: Vec<u8> = self.weights.iter().flat_map(|w| w.to_le_bytes()).collect();
        write_json(
            path,
            &ModelFile {
                format: MODEL_FORMAT.into(),
                dimension: self.weights.len(),
                weights_b64: base64::engine::general_purpose::STANDARD.encode(bytes),
                intercept: self.intercept,
                metadata: self.metadata.clone(),
                references: self.references.clone(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self, FusionError> {
        let file: ModelFile = read_json(path)?;
        if file.format != MODEL_FORMAT {
            return Err(FusionError::InvalidModel(format!("unknown format {:?}", file.format)));
        }
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&file.weights_b64)
            .map_err(|e| FusionError::InvalidModel(e.to_string()))?;
        if bytes.len() != file.dimension * 8 {
            return Err(FusionError::InvalidModel(format!(
                "{} weight bytes for dimension {}",
                bytes.len(),
                file.dimension
            )));
        }
        let weights: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if weights.iter().any(|w| !w.is_finite()) || !file.intercept.is_finite() {
            return Err(FusionError::InvalidModel("non-finite weights".into()));
        }
        Ok(Self {
            weights,
            intercept: file.intercept,
            metadata: file.metadata,
            references: file.references,
        })
    }
}

pub fn predict_proba(model: &LogRegModel, x: &[f64], d: usize) -> Result<Vec<f64>, FusionError> {
    if d != model.dimension() || (d > 0 && !x.len().is_multiple_of(d)) {
        return Err(FusionError::DimensionMismatch {
            expected: model.dimension(),
            found: d,
        });
    }
    Ok(x.chunks_exact(d.max(1)).map(|row| sigmoid(model.score(row))).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimum {
    pub theta: Vec<f64>,
    pub objective: f64,
    pub grad_inf_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub status: &'static str,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// L-BFGS with Armijo backtracking from `init`.
pub fn minimize(x: &[f64], y: &[u8], d: usize, lambda: f64, hyper: &LogRegHyper, init: &[f64]) -> Optimum {
    let mut theta = init.to_vec();
    let (mut f, mut g) = objective_and_gradient(x, y, d, &theta, lambda);
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut status = "max_iter";
    let mut iterations = 0;
    while iterations < hyper.max_iter {
        if inf_norm(&g) < hyper.tol {
            status = "converged";
            break;
        }
        // two-loop recursion
        let mut q = g.clone();
        let k = s_hist.len();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            alpha[i] = rho * dot(&s_hist[i], &q);
            for (qj, yj) in q.iter_mut().zip(&y_hist[i]) {
                *qj -= alpha[i] * yj;
            }
        }
        let gamma = if k > 0 {
            dot(&s_hist[k - 1], &y_hist[k - 1]) / dot(&y_hist[k - 1], &y_hist[k - 1])
        } else {
            1.0 / dot(&g, &g).sqrt().max(1.0)
        };
        for qj in &mut q {
            *qj *= gamma;
        }
        for i in 0..k {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            let beta = rho * dot(&y_hist[i], &q);
            for (qj, sj) in q.iter_mut().zip(&s_hist[i]) {
                *qj += (alpha[i] - beta) * sj;
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            s_hist.clear();
            y_hist.clear();
            dir = g.iter().map(|v| -v / dot(&g, &g).sqrt().max(1.0)).collect();
            slope = dot(&g, &dir);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<f64> = theta.iter().zip(&dir).map(|(t, p)| t + step * p).collect();
            let (fc, gc) = objective_and_gradient(x, y, d, &cand, lambda);
            if fc <= f + 1e-4 * step * slope {
                accepted = Some((cand, fc, gc));
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        let Some((cand, fc, gc)) = accepted else {
            status = "line_search_stalled";
            break;
        };
        let s: Vec<f64> = cand.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = gc.iter().zip(&g).map(|(a, b)| a - b).collect();
        if dot(&s, &yv) > 1e-12 * dot(&yv, &yv).sqrt() * dot(&s, &s).sqrt() {
            if s_hist.len() == hyper.memory.max(1) {
                s_hist.remove(0);
                y_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(yv);
        }
        theta = cand;
        f = fc;
        g = gc;
    }
    if status == "max_iter" && inf_norm(&g) < hyper.tol {
        status = "converged";
    }
    Optimum {
        objective: f,
        grad_inf_norm: inf_norm(&g),
        converged: status == "converged",
        iterations,
        status,
        theta,
    }
}

/// Column means and scales on the training rows; zero-variance columns get scale 1.
fn column_scaling(x: &[f64], n: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mu = vec![0.0; d];
    for row in x.chunks_exact(d) {
        for (m, v) in mu.iter_mut().zip(row) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for row in x.chunks_exact(d) {
        for j in 0..d {
            var[j] += (row[j] - mu[j]).powi(2);
        }
    }
    let sd = var
        .into_iter()
        .map(|v| {
            let s = (v / n as f64).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mu, sd)
}

pub fn train_logreg(x: &[f64], y: &[u8], d: usize, hyper: &LogRegHyper, seed: u64) -> Result<LogRegModel, FusionError> {
    let n = y.len();
    if x.len() != n * d {
        return Err(FusionError::DimensionMismatch {
            expected: n * d,
            found: x.len(),
        });
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(FusionError::NonFinite(format!("training row {} column {}", i / d, i % d)));
    }
    let n_positive = y.iter().filter(|&&v| v == 1).count();
    if n == 0 || n_positive == 0 || n_positive == n {
        return Err(FusionError::SingleClassTrainingSet);
    }
    let (lambda, lambda_rule) = match hyper.lambda {
        Some(l) => (l, "fixed".to_string()),
        None => (1.0 / n as f64, "1/n_train".to_string()),
    };
    let init = vec![0.0; d + 1];
    let (weights, intercept, opt) = if hyper.standardize && d > 0 {
        let (mu, sd) = column_scaling(x, n, d);
        let z: Vec<f64> = x
            .chunks_exact(d)
            .flat_map(|row| (0..d).map(|j| (row[j] - mu[j]) / sd[j]).collect::<Vec<_>>())
            .collect();
        let opt = minimize(&z, y, d, lambda, hyper, &init);
        let w: Vec<f64> = (0..d).map(|j| opt.theta[j] / sd[j]).collect();
        let b = opt.theta[d] - (0..d).map(|j| w[j] * mu[j]).sum::<f64>();
        (w, b, opt)
    } else {
        let opt = minimize(x, y, d, lambda, hyper, &init);
        (opt.theta[..d].to_vec(), opt.theta[d], opt)
    };
    if !opt.converged {
        log::warn!(
            "logistic regression stopped after {} iterations ({}), gradient norm {:.3e}",
            opt.iterations,
            opt.status,
            opt.grad_inf_norm
        );
    }
    Ok(LogRegModel {
        weights,
        intercept,
        metadata: TrainMetadata {
            seed,
            lambda,
            lambda_rule,
            standardized: hyper.standardize,
            init: "zeros".into(),
            optimizer: format!("lbfgs(m={})", hyper.memory),
            iterations: opt.iterations,
            converged: opt.converged,
            status: opt.status.to_string(),
            grad_inf_norm: opt.grad_inf_norm,
            objective: opt.objective,
            n_train: n,
            n_positive,
        },
        references: BTreeMap::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(n: usize, d: usize, seed: u64) -> (Vec<f64>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let row: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = sigmoid(dot(&w, &row));
            y.push(u8::from(rng.random::<f64>() < p));
            x.extend(row);
        }
        (x, y)
    }

    #[test]
    fn sigmoid_edges() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((1.0 - sigmoid(50.0)).abs() < 1e-9);
        assert!(sigmoid(-700.0) > 0.0 && sigmoid(-700.0).is_finite());
        assert!(sigmoid(700.0) <= 1.0);
    }

    #[test]
    fn sigmoid_matches_tanh_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let s: f64 = rng.random_range(-40.0..40.0);
            let oracle = 0.5 * (1.0 + (0.5 * s).tanh());
            assert!((sigmoid(s) - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let x = vec![0.0, 1.0, 2.0];
        assert!(matches!(
            train_logreg(&x, &[1, 1, 1], 1, &LogRegHyper::default(), 0),
            Err(FusionError::SingleClassTrainingSet)
        ));
    }

    #[test]
    fn standardized_fit_matches_raw_predictions_direction() {
        let (x, y) = toy(300, 4, 8);
        let m = train_logreg(&x, &y, 4, &LogRegHyper::default(), 0).unwrap();
        assert!(m.metadata.converged, "{:?}", m.metadata);
        let p = predict_proba(&m, &x, 4).unwrap();
        let acc = p.iter().zip(&y).filter(|(p, y)| u8::from(**p >= 0.5) == **y).count() as f64 / 300.0;
        assert!(acc > 0.6);
    }

    #[test]
    fn model_file_round_trip() {
        let (x, y) = toy(80, 3, 2);
        let mut m = train_logreg(&x, &y, 3, &LogRegHyper::default(), 5).unwrap();
        m.references.insert("feature_map".into(), "abc".into());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.json");
        m.save(&p).unwrap();
        let back = LogRegModel::load(&p).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn wrong_width_is_rejected() {
        let (x, y) = toy(40, 3, 2);
        let m = train_logreg(&x, &y, 3, &LogRegHyper::default(), 0).unwrap();
        assert!(matches!(
            predict_proba(&m, &[0.0; 8], 4),
            Err(FusionError::DimensionMismatch { expected: 3, found: 4 })
        ));
    }
}
