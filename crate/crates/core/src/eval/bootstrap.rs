use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub name: String,
    pub point: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub level: f64,
    pub n_boot: usize,
    pub seed: u64,
    /// Resamples on which the metric was undefined.
    pub n_skipped: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl MetricResult {
    pub fn undefined(name: &str, n_boot: usize, level: f64, seed: u64, note: String) -> Self {
        Self {
            name: name.to_string(),
            point: None,
            ci_low: None,
            ci_high: None,
            level,
            n_boot,
            seed,
            n_skipped: 0,
            note: Some(note),
        }
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Row indices of resample `i`, drawn with replacement from a generator seeded
/// with `seed + i`.
pub fn resample_indices(n: usize, seed: u64, i: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Percentile bootstrap CI. `metric` returns `None` when undefined on a
/// resample; such resamples are skipped and counted.
pub fn bootstrap_ci<F>(
    name: &str,
    metric: F,
    y: &[u8],
    p: &[f64],
    n_boot: usize,
    level: f64,
    seed: u64,
) -> Result<MetricResult, EvalError>
where
    F: Fn(&[u8], &[f64]) -> Option<f64> + Sync,
{
    let n = y.len();
    if n != p.len() {
        return Err(EvalError::LengthMismatch(n, p.len()));
    }
    if n < 2 {
        return Err(EvalError::TooFewRows(n));
    }
    if n_boot == 0 || !(0.0..1.0).contains(&level) || level <= 0.0 {
        return Err(EvalError::InvalidArgument(format!(
            "n_boot={n_boot}, level={level}"
        )));
    }
    let point = metric(y, p).ok_or_else(|| EvalError::UndefinedMetric(format!("{name} on the full sample")))?;
    let draws: Vec<Option<f64>> = (0..n_boot)
        .into_par_iter()
        .map(|i| {
            let idx = resample_indices(n, seed, i);
            let yb: Vec<u8> = idx.iter().map(|&k| y[k]).collect();
            let pb: Vec<f64> = idx.iter().map(|&k| p[k]).collect();
            metric(&yb, &pb)
        })
        .collect();
    let mut values: Vec<f64> = draws.iter().flatten().copied().collect();
    let skipped = n_boot - values.len();
    if skipped * 2 > n_boot {
        return Err(EvalError::TooFewValidResamples {
            valid: values.len(),
            total: n_boot,
        });
    }
    values.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let lo = quantile_sorted(&values, alpha);
    let hi = quantile_sorted(&values, 1.0 - alpha);
    let note = (point < lo || point > hi).then(|| {
        log::warn!("{name}: point estimate {point} lies outside its bootstrap interval [{lo}, {hi}]");
        "point estimate outside percentile interval".to_string()
    });
    Ok(MetricResult {
        name: name.to_string(),
        point: Some(point),
        ci_low: Some(lo),
        ci_high: Some(hi),
        level,
        n_boot,
        seed,
        n_skipped: skipped,
        note,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_correct(y: &[u8], _: &[f64]) -> Option<f64> {
        Some(y.iter().map(|&v| v as f64).sum::<f64>() / y.len() as f64)
    }

    #[test]
    fn constant_metric_has_degenerate_interval() {
        let y = [0, 1, 1, 0, 1];
        let p = [0.1; 5];
        let r = bootstrap_ci("c", |_, _| Some(0.42), &y, &p, 200, 0.95, 1).unwrap();
        assert_eq!((r.ci_low, r.point, r.ci_high), (Some(0.42), Some(0.42), Some(0.42)));
    }

    #[test]
    fn same_seed_same_interval() {
        let y: Vec<u8> = (0..50).map(|i| (i % 3 == 0) as u8).collect();
        let p = vec![0.0; 50];
        let a = bootstrap_ci("m", mean_correct, &y, &p, 300, 0.95, 9).unwrap();
        let b = bootstrap_ci("m", mean_correct, &y, &p, 300, 0.95, 9).unwrap();
        assert_eq!(a, b);
        let c = bootstrap_ci("m", mean_correct, &y, &p, 300, 0.95, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn mostly_undefined_is_an_error() {
        let y = [1, 0, 0, 0, 0, 0, 0, 0, 0, 0];
        let p = [0.0; 10];
        // defined only on the original ordering, so nearly every resample is skipped
        let r = bootstrap_ci("m", |yb: &[u8], _: &[f64]| (yb == y).then_some(1.0), &y, &p, 100, 0.95, 0);
        assert!(matches!(r, Err(EvalError::TooFewValidResamples { .. })));
    }

    #[test]
    fn quantile_interpolates() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&xs, 0.0), 1.0);
        assert_eq!(quantile_sorted(&xs, 1.0), 5.0);
        assert_eq!(quantile_sorted(&xs, 0.5), 3.0);
        assert!((quantile_sorted(&xs, 0.1) - 1.4).abs() < 1e-15);
    }
}
