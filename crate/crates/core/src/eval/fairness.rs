use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::metrics::{auroc, Confusion};
use super::EvalError;

fn by_group<'a>(groups: &[&'a str]) -> BTreeMap<&'a str, Vec<usize>> {
    let mut out: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        out.entry(*g).or_default().push(i);
    }
    out
}

/// min/max over the given rates; `None` when the maximum is 0.
fn min_max_ratio(rates: &[f64]) -> Option<f64> {
    let max = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = rates.iter().copied().fold(f64::INFINITY, f64::min);
    (max > 0.0).then(|| min / max)
}

pub fn selection_rates(yhat: &[u8], groups: &[&str]) -> BTreeMap<String, f64> {
    by_group(groups)
        .into_iter()
        .map(|(g, rows)| {
            let sel = rows.iter().filter(|&&i| yhat[i] == 1).count();
            (g.to_string(), sel as f64 / rows.len() as f64)
        })
        .collect()
}

/// Lowest over highest group selection rate.
pub fn demographic_parity(yhat: &[u8], groups: &[&str]) -> Result<f64, EvalError> {
    if yhat.len() != groups.len() {
        return Err(EvalError::LengthMismatch(yhat.len(), groups.len()));
    }
    let rates: Vec<f64> = selection_rates(yhat, groups).into_values().collect();
    if rates.len() < 2 {
        return Err(EvalError::UndefinedMetric("demographic parity needs two nonempty groups".into()));
    }
    min_max_ratio(&rates).ok_or_else(|| EvalError::UndefinedMetric("no group has any selected rows".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EqualizedOdds {
    pub value: f64,
    pub tpr_ratio: Option<f64>,
    pub fpr_ratio: Option<f64>,
    pub notes: Vec<String>,
}

/// The smaller of the min/max TPR ratio and the min/max FPR ratio. A ratio
/// whose rates are not all defined is excluded with a note.
pub fn equalized_odds(y: &[u8], yhat: &[u8], groups: &[&str]) -> Result<EqualizedOdds, EvalError> {
    if y.len() != yhat.len() || y.len() != groups.len() {
        return Err(EvalError::LengthMismatch(y.len(), groups.len()));
    }
    let grouped = by_group(groups);
    if grouped.len() < 2 {
        return Err(EvalError::UndefinedMetric("equalized odds needs two nonempty groups".into()));
    }
    let mut tprs = Vec::new();
    let mut fprs = Vec::new();
    let mut notes = Vec::new();
    for (g, rows) in &grouped {
        let yg: Vec<u8> = rows.iter().map(|&i| y[i]).collect();
        let hg: Vec<u8> = rows.iter().map(|&i| yhat[i]).collect();
        let c = Confusion::from_labels(&yg, &hg);
        match c.tp + c.fn_ {
            0 => notes.push(format!("group {g:?} has no positives; TPR undefined")),
            p => tprs.push(c.tp as f64 / p as f64),
        }
        match c.fp + c.tn {
            0 => notes.push(format!("group {g:?} has no negatives; FPR undefined")),
            n => fprs.push(c.fp as f64 / n as f64),
        }
    }
    let ratio_of = |rates: &[f64], name: &str, notes: &mut Vec<String>| {
        if rates.len() != grouped.len() {
            notes.push(format!("{name} ratio excluded: undefined for some group"));
            return None;
        }
        let r = min_max_ratio(rates);
        if r.is_none() {
            notes.push(format!("{name} ratio excluded: every group has {name} 0"));
        }
        r
    };
    let tpr_ratio = ratio_of(&tprs, "TPR", &mut notes);
    let fpr_ratio = ratio_of(&fprs, "FPR", &mut notes);
    let value = match (tpr_ratio, fpr_ratio) {
        (Some(a), Some(b)) => a.min(b),
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => return Err(EvalError::UndefinedMetric(notes.join("; "))),
    };
    Ok(EqualizedOdds {
        value,
        tpr_ratio,
        fpr_ratio,
        notes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupRow {
    pub group: String,
    pub n: usize,
    pub n_positive: usize,
    pub auroc: Option<f64>,
    pub accuracy: Option<f64>,
    pub selection_rate: Option<f64>,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupTable {
    pub attribute: String,
    pub rows: Vec<SubgroupRow>,
    pub notes: Vec<String>,
}

/// Per-group metrics. Groups in `known` with no rows are omitted with a note.
pub fn subgroup_performance(
    y: &[u8],
    p: &[f64],
    yhat: &[u8],
    groups: &[&str],
    attribute: &str,
    known: &[String],
) -> Result<SubgroupTable, EvalError> {
    if y.len() != p.len() || y.len() != yhat.len() || y.len() != groups.len() {
        return Err(EvalError::LengthMismatch(y.len(), groups.len()));
    }
    let grouped = by_group(groups);
    let mut notes = Vec::new();
    for k in known {
        if !grouped.contains_key(k.as_str()) {
            notes.push(format!("group {k:?} has no rows; omitted"));
        }
    }
    let rows = grouped
        .iter()
        .map(|(g, idx)| {
            let yg: Vec<u8> = idx.iter().map(|&i| y[i]).collect();
            let pg: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
            let hg: Vec<u8> = idx.iter().map(|&i| yhat[i]).collect();
            let c = Confusion::from_labels(&yg, &hg);
            let auc = auroc(&yg, &pg).ok();
            if auc.is_none() {
                notes.push(format!("group {g:?} has a single class; AUROC undefined"));
            }
            let rate = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
            SubgroupRow {
                group: g.to_string(),
                n: idx.len(),
                n_positive: c.tp + c.fn_,
                auroc: auc,
                accuracy: rate(c.tp + c.tn, c.total()),
                selection_rate: rate(c.tp + c.fp, c.total()),
                tpr: rate(c.tp, c.tp + c.fn_),
                fpr: rate(c.fp, c.fp + c.tn),
            }
        })
        .collect();
    Ok(SubgroupTable {
        attribute: attribute.to_string(),
        rows,
        notes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub attribute: String,
    pub demographic_parity: Option<f64>,
    pub equalized_odds: Option<f64>,
    pub tpr_ratio: Option<f64>,
    pub fpr_ratio: Option<f64>,
    pub groups: Vec<SubgroupRow>,
    pub notes: Vec<String>,
}

pub fn fairness_report(
    y: &[u8],
    p: &[f64],
    yhat: &[u8],
    groups: &[&str],
    attribute: &str,
    known: &[String],
) -> Result<FairnessReport, EvalError> {
    let table = subgroup_performance(y, p, yhat, groups, attribute, known)?;
    let mut notes = table.notes;
    let dp = match demographic_parity(yhat, groups) {
        Ok(v) => Some(v),
        Err(e) => {
            notes.push(format!("demographic parity undefined: {e}"));
            None
        }
    };
    let (eo, tpr_ratio, fpr_ratio) = match equalized_odds(y, yhat, groups) {
        Ok(r) => {
            notes.extend(r.notes);
            (Some(r.value), r.tpr_ratio, r.fpr_ratio)
        }
        Err(e) => {
            notes.push(format!("equalized odds undefined: {e}"));
            (None, None, None)
        }
    };
    Ok(FairnessReport {
        attribute: attribute.to_string(),
        demographic_parity: dp,
        equalized_odds: eo,
        tpr_ratio,
        fpr_ratio,
        groups: table.rows,
        notes,
    })
}
