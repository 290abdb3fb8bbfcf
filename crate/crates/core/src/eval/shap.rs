use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::fusion::FeatureMap;

/// Exact SHAP values of a linear score against a background mean:
/// `phi[n, d] = w_d * (x[n, d] - mu_d)`, row-major.
pub fn linear_shap(weights: &[f64], x: &[f64], mu: &[f64]) -> Result<Vec<f64>, EvalError> {
    let d = weights.len();
    if mu.len() != d || (d > 0 && !x.len().is_multiple_of(d)) {
        return Err(EvalError::DimensionMismatch {
            expected: d,
            found: mu.len(),
        });
    }
    Ok(x.chunks_exact(d.max(1))
        .flat_map(|row| (0..d).map(move |j| weights[j] * (row[j] - mu[j])))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityShare {
    pub modality: String,
    pub width: usize,
    /// Mean over rows of the summed |phi| in the modality.
    pub shap_raw: f64,
    pub shap_share: Option<f64>,
    /// Summed |w| in the modality.
    pub coef_raw: f64,
    pub coef_share: Option<f64>,
}

/// Per-modality importance from SHAP values and from coefficients, each
/// normalized to sum to 1. Modalities appear in first-seen column order.
pub fn modality_importance(
    phi: &[f64],
    weights: &[f64],
    feature_map: &FeatureMap,
) -> Result<Vec<ModalityShare>, EvalError> {
    let d = feature_map.dimension;
    if weights.len() != d || (d > 0 && !phi.len().is_multiple_of(d)) {
        return Err(EvalError::DimensionMismatch {
            expected: d,
            found: weights.len(),
        });
    }
    let n = if d == 0 { 0 } else { phi.len() / d };
    let mut out: Vec<ModalityShare> = Vec::new();
    for b in &feature_map.blocks {
        let coef: f64 = weights[b.start..b.end].iter().map(|w| w.abs()).sum();
        let mut shap = 0.0;
        for row in phi.chunks_exact(d.max(1)) {
            shap += row[b.start..b.end].iter().map(|v| v.abs()).sum::<f64>();
        }
        if n > 0 {
            shap /= n as f64;
        }
        match out.iter_mut().find(|m| m.modality == b.modality) {
            Some(m) => {
                m.width += b.width();
                m.shap_raw += shap;
                m.coef_raw += coef;
            }
            None => out.push(ModalityShare {
                modality: b.modality.clone(),
                width: b.width(),
                shap_raw: shap,
                shap_share: None,
                coef_raw: coef,
                coef_share: None,
            }),
        }
    }
    let shap_total: f64 = out.iter().map(|m| m.shap_raw).sum();
    let coef_total: f64 = out.iter().map(|m| m.coef_raw).sum();
    for m in &mut out {
        m.shap_share = (shap_total > 0.0).then(|| m.shap_raw / shap_total);
        m.coef_share = (coef_total > 0.0).then(|| m.coef_raw / coef_total);
    }
    Ok(out)
}
