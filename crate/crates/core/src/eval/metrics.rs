use serde::{Deserialize, Serialize};

use super::EvalError;

fn check_lengths(y: &[u8], p: &[f64]) -> Result<(), EvalError> {
    if y.len() != p.len() {
        return Err(EvalError::LengthMismatch(y.len(), p.len()));
    }
    Ok(())
}

fn class_counts(y: &[u8]) -> (usize, usize) {
    let pos = y.iter().filter(|&&v| v == 1).count();
    (pos, y.len() - pos)
}

/// Mann-Whitney AUROC with average ranks for tied scores.
pub fn auroc(y: &[u8], p: &[f64]) -> Result<f64, EvalError> {
    check_lengths(y, p)?;
    let (n_pos, n_neg) = class_counts(y);
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::UndefinedMetric("auroc needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    // Twice the rank sum keeps tie averages integral.
    let mut rank2_sum_pos: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && p[order[j + 1]] == p[order[i]] {
            j += 1;
        }
        let rank2 = (i + 1 + j + 1) as u64;
        let pos_in_tie = order[i..=j].iter().filter(|&&k| y[k] == 1).count() as u64;
        rank2_sum_pos += rank2 * pos_in_tie;
        i = j + 1;
    }
    let u2 = rank2_sum_pos - (n_pos * (n_pos + 1)) as u64;
    Ok(u2 as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Indices sorted by descending score, grouped into runs of equal score.
fn descending_ties(p: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if p[g[0]] == p[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Average precision: sum over distinct thresholds of recall gain times precision.
pub fn auprc(y: &[u8], p: &[f64]) -> Result<f64, EvalError> {
    check_lengths(y, p)?;
    let (n_pos, _) = class_counts(y);
    if n_pos == 0 {
        return Err(EvalError::UndefinedMetric("auprc needs at least one positive".into()));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    for group in descending_ties(p) {
        let pos = group.iter().filter(|&&k| y[k] == 1).count();
        tp += pos;
        fp += group.len() - pos;
        if pos > 0 {
            ap += (pos as f64 / n_pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

/// ROC vertices from (0,0) at +inf down to (1,1).
pub fn roc_points(y: &[u8], p: &[f64]) -> Result<Vec<RocPoint>, EvalError> {
    check_lengths(y, p)?;
    let (n_pos, n_neg) = class_counts(y);
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::UndefinedMetric("roc curve needs both classes".into()));
    }
    let mut out = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    for group in descending_ties(p) {
        let pos = group.iter().filter(|&&k| y[k] == 1).count();
        tp += pos;
        fp += group.len() - pos;
        out.push(RocPoint {
            threshold: p[group[0]],
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
        });
    }
    Ok(out)
}

pub fn pr_points(y: &[u8], p: &[f64]) -> Result<Vec<PrPoint>, EvalError> {
    check_lengths(y, p)?;
    let (n_pos, _) = class_counts(y);
    if n_pos == 0 {
        return Err(EvalError::UndefinedMetric("pr curve needs at least one positive".into()));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut out = Vec::new();
    for group in descending_ties(p) {
        let pos = group.iter().filter(|&&k| y[k] == 1).count();
        tp += pos;
        fp += group.len() - pos;
        out.push(PrPoint {
            threshold: p[group[0]],
            recall: tp as f64 / n_pos as f64,
            precision: tp as f64 / (tp + fp) as f64,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_labels(y: &[u8], yhat: &[u8]) -> Self {
        let mut c = Confusion::default();
        for (&t, &h) in y.iter().zip(yhat) {
            match (t, h) {
                (1, 1) => c.tp += 1,
                (0, 1) => c.fp += 1,
                (1, _) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// `None` marks a 0/0 metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub confusion: Confusion,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: Option<f64>,
}

impl ClassificationMetrics {
    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "accuracy" => self.accuracy,
            "precision" => self.precision,
            "recall" => self.recall,
            "specificity" => self.specificity,
            "f1" => self.f1,
            _ => None,
        }
    }
}

pub fn metrics_from_confusion(c: Confusion) -> ClassificationMetrics {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    ClassificationMetrics {
        confusion: c,
        accuracy: ratio(c.tp + c.tn, c.total()),
        precision,
        recall,
        specificity: ratio(c.tn, c.tn + c.fp),
        f1: match (precision, recall) {
            (Some(_), Some(_)) => ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
            _ => None,
        },
    }
}

pub fn classification_metrics(y: &[u8], yhat: &[u8]) -> Result<ClassificationMetrics, EvalError> {
    if y.len() != yhat.len() {
        return Err(EvalError::LengthMismatch(y.len(), yhat.len()));
    }
    if let Some(&bad) = yhat.iter().chain(y).find(|&&v| v > 1) {
        return Err(EvalError::InvalidLabel(bad));
    }
    Ok(metrics_from_confusion(Confusion::from_labels(y, yhat)))
}

pub fn threshold_predictions(p: &[f64], threshold: f64) -> Vec<u8> {
    p.iter().map(|&v| u8::from(v >= threshold)).collect()
}
