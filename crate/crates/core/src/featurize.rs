//! Structured-data featurization: outlier removal, forward imputation,
//! fixed-interval aggregation of vitals, and demographic encoding.
//!
//! Statistics used to fill cold-start cells and to standardize demographics
//! are fitted on the training split only and frozen in [`FeaturizerState`].

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::LabeledStay;
use crate::ingest::VitalObs;

#[derive(Debug, Error)]
pub enum FeaturizeError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("ranges.csv: {0}")]
    Ranges(String),
    #[error("featurizer state: {0}")]
    State(#[from] serde_json::Error),
    #[error("featurizer fitted on an empty training split")]
    EmptyTrainingSet,
}

pub const DEFAULT_VARIABLES: [&str; 13] = [
    "heart_rate",
    "sbp",
    "dbp",
    "mbp",
    "resp_rate",
    "spo2",
    "temperature",
    "glucose",
    "gcs_eye",
    "gcs_verbal",
    "gcs_motor",
    "fio2",
    "urine_output_rate",
];

/// Inclusive plausibility bounds per variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct VariableRangeTable {
    pub ranges: BTreeMap<String, (f64, f64)>,
}

impl VariableRangeTable {
    pub fn new(entries: &[(&str, f64, f64)]) -> Result<Self, FeaturizeError> {
        let t = Self {
            ranges: entries
                .iter()
                .map(|(k, lo, hi)| (k.to_string(), (*lo, *hi)))
                .collect(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), FeaturizeError> {
        for (k, (lo, hi)) in &self.ranges {
            if !(lo < hi) {
                return Err(FeaturizeError::Ranges(format!(
                    "{k}: min_valid {lo} must be below max_valid {hi}"
                )));
            }
        }
        Ok(())
    }

    /// Physiological plausibility bounds for the default vital-sign set.
    pub fn clinical_default() -> Self {
        Self::new(&[
            ("heart_rate", 20.0, 250.0),
            ("sbp", 40.0, 300.0),
            ("dbp", 10.0, 200.0),
            ("mbp", 20.0, 250.0),
            ("resp_rate", 2.0, 70.0),
            ("spo2", 50.0, 100.0),
            ("temperature", 25.0, 45.0),
            ("glucose", 10.0, 2000.0),
            ("gcs_eye", 1.0, 4.0),
            ("gcs_verbal", 1.0, 5.0),
            ("gcs_motor", 1.0, 6.0),
            ("fio2", 21.0, 100.0),
            ("urine_output_rate", 0.0, 2000.0),
        ])
        .expect("default ranges are valid")
    }

    pub fn contains(&self, variable: &str, value: f64) -> Option<bool> {
        self.ranges
            .get(variable)
            .map(|&(lo, hi)| lo <= value && value <= hi)
    }

    pub fn read_csv(path: &Path) -> Result<Self, FeaturizeError> {
        let mut r = csv::Reader::from_path(path).map_err(|e| FeaturizeError::Ranges(e.to_string()))?;
        let mut ranges = BTreeMap::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| FeaturizeError::Ranges(e.to_string()))?;
            let num = |i: usize| -> Result<f64, FeaturizeError> {
                rec.get(i)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| FeaturizeError::Ranges(format!("bad number in row {rec:?}")))
            };
            ranges.insert(rec.get(0).unwrap_or("").to_string(), (num(1)?, num(2)?));
        }
        let t = Self { ranges };
        t.validate()?;
        Ok(t)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), FeaturizeError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| FeaturizeError::Ranges(e.to_string()))?;
        let err = |e: csv::Error| FeaturizeError::Ranges(e.to_string());
        w.write_record(["variable_id", "min_valid", "max_valid"]).map_err(err)?;
        for (k, (lo, hi)) in &self.ranges {
            w.write_record([k.clone(), lo.to_string(), hi.to_string()])
                .map_err(err)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub offset_hours: f64,
    pub value: Option<f64>,
    /// False for missing and imputed samples.
    pub observed: bool,
}

/// Irregular measurements of one stay, grouped by variable, each series in time order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TimeSeriesPanel {
    pub series: BTreeMap<String, Vec<Sample>>,
}

impl TimeSeriesPanel {
    pub fn from_vitals(vitals: &[VitalObs]) -> Self {
        let mut series: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
        for v in vitals {
            series.entry(v.variable.clone()).or_default().push(Sample {
                offset_hours: v.offset_hours,
                value: Some(v.value),
                observed: true,
            });
        }
        // value as secondary key makes the panel independent of input order
        for s in series.values_mut() {
            s.sort_by(|a, b| {
                a.offset_hours.total_cmp(&b.offset_hours).then_with(|| {
                    a.value
                        .unwrap_or(f64::NAN)
                        .total_cmp(&b.value.unwrap_or(f64::NAN))
                })
            });
        }
        Self { series }
    }

    pub fn observed_count(&self) -> usize {
        self.series
            .values()
            .flat_map(|s| s.iter())
            .filter(|s| s.observed)
            .count()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OutlierReport {
    pub removed: usize,
    /// Variables seen in the panel with no configured range.
    pub unfiltered_variables: Vec<String>,
}

/// Marks values outside the inclusive `[min_valid, max_valid]` range as missing.
pub fn remove_outliers(
    panel: &TimeSeriesPanel,
    ranges: &VariableRangeTable,
) -> (TimeSeriesPanel, OutlierReport) {
    let mut report = OutlierReport::default();
    let mut out = panel.clone();
    for (var, samples) in out.series.iter_mut() {
        if !ranges.ranges.contains_key(var) {
            log::warn!("no plausibility range for variable {var:?}; values kept as-is");
            report.unfiltered_variables.push(var.clone());
            continue;
        }
        for s in samples.iter_mut() {
            if let Some(v) = s.value {
                if ranges.contains(var, v) == Some(false) {
                    s.value = None;
                    s.observed = false;
                    report.removed += 1;
                }
            }
        }
    }
    (out, report)
}

/// Replaces each gap with the most recent earlier value. Leading gaps stay empty.
pub fn forward_fill(values: &mut [Option<f64>]) {
    let mut last = None;
    for v in values.iter_mut() {
        match v {
            Some(x) => last = Some(*x),
            None => *v = last,
        }
    }
}

pub fn forward_impute(panel: &TimeSeriesPanel) -> TimeSeriesPanel {
    let mut out = panel.clone();
    for samples in out.series.values_mut() {
        let mut values: Vec<Option<f64>> = samples.iter().map(|s| s.value).collect();
        forward_fill(&mut values);
        for (s, v) in samples.iter_mut().zip(values) {
            s.value = v;
        }
    }
    out
}

/// Variable-major grid of per-bin means with an observation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct HourlyGrid {
    pub variables: Vec<String>,
    pub bins: usize,
    /// `values[v * bins + h]`
    pub values: Vec<f64>,
    pub mask: Vec<u8>,
}

impl HourlyGrid {
    pub fn dimension(&self) -> usize {
        self.variables.len() * self.bins
    }

    pub fn get(&self, variable: usize, bin: usize) -> (f64, u8) {
        let i = variable * self.bins + bin;
        (self.values[i], self.mask[i])
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.clone()
    }
}

pub fn bin_count(bin_hours: f64, horizon_hours: f64) -> usize {
    (horizon_hours / bin_hours).ceil() as usize
}

/// Averages observed samples into `[h*bin, (h+1)*bin)` bins over `[0, horizon)`.
/// Empty cells are forward-filled across bins, then filled with `fill_means[v]`
/// (the training-set mean), then with 0.
pub fn fixed_interval_aggregate(
    panel: &TimeSeriesPanel,
    variables: &[String],
    bin_hours: f64,
    horizon_hours: f64,
    fill_means: Option<&[Option<f64>]>,
) -> HourlyGrid {
    let bins = bin_count(bin_hours, horizon_hours);
    let mut values = Vec::with_capacity(variables.len() * bins);
    let mut mask = Vec::with_capacity(variables.len() * bins);
    for (vi, var) in variables.iter().enumerate() {
        let mut sums = vec![0.0f64; bins];
        let mut counts = vec![0usize; bins];
        if let Some(samples) = panel.series.get(var) {
            for s in samples.iter().filter(|s| s.observed) {
                let (Some(v), t) = (s.value, s.offset_hours) else {
                    continue;
                };
                if !(0.0..horizon_hours).contains(&t) {
                    continue;
                }
                let b = ((t / bin_hours).floor() as usize).min(bins - 1);
                sums[b] += v;
                counts[b] += 1;
            }
        }
        let mut row: Vec<Option<f64>> = sums
            .iter()
            .zip(&counts)
            .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
            .collect();
        mask.extend(counts.iter().map(|&c| (c > 0) as u8));
        forward_fill(&mut row);
        let fallback = fill_means
            .and_then(|m| m.get(vi).copied().flatten())
            .unwrap_or(0.0);
        values.extend(row.into_iter().map(|v| v.unwrap_or(fallback)));
    }
    HourlyGrid {
        variables: variables.to_vec(),
        bins,
        values,
        mask,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericStat {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalVocab {
    pub name: String,
    /// Sorted; an extra trailing "unknown" slot is always emitted.
    pub vocab: Vec<String>,
}

/// Standardization and one-hot vocabularies fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemographicStats {
    pub numeric: Vec<NumericStat>,
    pub categorical: Vec<CategoricalVocab>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemographicRow {
    pub numeric: Vec<f64>,
    pub categorical: Vec<String>,
}

impl DemographicStats {
    pub fn fit(
        numeric_names: &[&str],
        categorical_names: &[&str],
        rows: &[DemographicRow],
    ) -> Self {
        let n = rows.len() as f64;
        let numeric = numeric_names
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let mean = rows.iter().map(|r| r.numeric[i]).sum::<f64>() / n;
                let var = rows.iter().map(|r| (r.numeric[i] - mean).powi(2)).sum::<f64>() / n;
                NumericStat {
                    name: name.to_string(),
                    mean,
                    std: var.sqrt(),
                }
            })
            .collect();
        let categorical = categorical_names
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let mut vocab: Vec<String> = rows.iter().map(|r| r.categorical[i].clone()).collect();
                vocab.sort();
                vocab.dedup();
                CategoricalVocab {
                    name: name.to_string(),
                    vocab,
                }
            })
            .collect();
        Self {
            numeric,
            categorical,
        }
    }

    pub fn dimension(&self) -> usize {
        self.numeric.len() + self.categorical.iter().map(|c| c.vocab.len() + 1).sum::<usize>()
    }

    /// Feature names in output order.
    pub fn feature_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.numeric.iter().map(|s| s.name.clone()).collect();
        for c in &self.categorical {
            names.extend(c.vocab.iter().map(|v| format!("{}={v}", c.name)));
            names.push(format!("{}=<unknown>", c.name));
        }
        names
    }
}

/// Numeric fields become `(x - mean) / std` (0 when std is 0); each
/// categorical field becomes a one-hot block over its training vocabulary
/// followed by an unknown slot.
pub fn encode_demographics(row: &DemographicRow, stats: &DemographicStats) -> Vec<f64> {
    let mut out = Vec::with_capacity(stats.dimension());
    for (x, s) in row.numeric.iter().zip(&stats.numeric) {
        if s.std > 0.0 {
            out.push((x - s.mean) / s.std);
        } else {
            log::warn!("constant demographic feature {:?}; standardized to 0", s.name);
            out.push(0.0);
        }
    }
    for (value, c) in row.categorical.iter().zip(&stats.categorical) {
        let mut block = vec![0.0; c.vocab.len() + 1];
        match c.vocab.binary_search(value) {
            Ok(i) => block[i] = 1.0,
            Err(_) => block[c.vocab.len()] = 1.0,
        }
        out.extend(block);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeaturizerConfig {
    pub variables: Vec<String>,
    pub bin_hours: f64,
    pub horizon_hours: f64,
    pub include_demographics: bool,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        Self {
            variables: DEFAULT_VARIABLES.iter().map(|s| s.to_string()).collect(),
            bin_hours: 1.0,
            horizon_hours: 24.0,
            include_demographics: true,
        }
    }
}

impl FeaturizerConfig {
    pub fn timeseries_dimension(&self) -> usize {
        self.variables.len() * bin_count(self.bin_hours, self.horizon_hours)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsProvenance {
    pub split: String,
    pub n_stays: usize,
    pub stay_ids_sha256: String,
}

/// Everything needed to featurize an unseen stay exactly as during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturizerState {
    pub config: FeaturizerConfig,
    pub ranges: VariableRangeTable,
    pub variable_means: Vec<Option<f64>>,
    pub demographics: DemographicStats,
    pub provenance: StatsProvenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructuredFeatures {
    pub timeseries: Vec<f64>,
    pub demographics: Vec<f64>,
    pub has_vitals: bool,
    pub outliers_removed: usize,
}

pub fn demographic_row(stay: &LabeledStay) -> DemographicRow {
    DemographicRow {
        numeric: vec![stay.stay.demographics.age_years],
        categorical: vec![stay.groups.gender.clone(), stay.groups.race.clone()],
    }
}

impl FeaturizerState {
    /// Fits fill means and demographic statistics on `train` only.
    pub fn fit(
        train: &[&LabeledStay],
        config: &FeaturizerConfig,
        ranges: &VariableRangeTable,
    ) -> Result<Self, FeaturizeError> {
        if train.is_empty() {
            return Err(FeaturizeError::EmptyTrainingSet);
        }
        let mut sums = vec![0.0; config.variables.len()];
        let mut counts = vec![0usize; config.variables.len()];
        for stay in train {
            let panel = TimeSeriesPanel::from_vitals(&stay.stay.vitals);
            let (clean, _) = remove_outliers(&panel, ranges);
            for (i, var) in config.variables.iter().enumerate() {
                if let Some(samples) = clean.series.get(var) {
                    for s in samples {
                        if s.observed && (0.0..config.horizon_hours).contains(&s.offset_hours) {
                            if let Some(v) = s.value {
                                sums[i] += v;
                                counts[i] += 1;
                            }
                        }
                    }
                }
            }
        }
        let variable_means = sums
            .iter()
            .zip(&counts)
            .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
            .collect();
        let rows: Vec<DemographicRow> = train.iter().map(|s| demographic_row(s)).collect();
        let demographics = DemographicStats::fit(&["age_years"], &["gender", "race"], &rows);

        let mut ids: Vec<i64> = train.iter().map(|s| s.stay_id()).collect();
        ids.sort_unstable();
        Ok(Self {
            config: config.clone(),
            ranges: ranges.clone(),
            variable_means,
            demographics,
            provenance: StatsProvenance {
                split: "train".into(),
                n_stays: train.len(),
                stay_ids_sha256: crate::util::sha256_hex(
                    ids.iter()
                        .map(|i| i.to_string())
                        .collect::<Vec<_>>()
                        .join(",")
                        .as_bytes(),
                ),
            },
        })
    }

    pub fn transform(&self, stay: &LabeledStay) -> StructuredFeatures {
        let panel = TimeSeriesPanel::from_vitals(&stay.stay.vitals);
        let (clean, report) = remove_outliers(&panel, &self.ranges);
        let grid = fixed_interval_aggregate(
            &clean,
            &self.config.variables,
            self.config.bin_hours,
            self.config.horizon_hours,
            Some(&self.variable_means),
        );
        let demographics = if self.config.include_demographics {
            encode_demographics(&demographic_row(stay), &self.demographics)
        } else {
            Vec::new()
        };
        StructuredFeatures {
            has_vitals: grid.mask.contains(&1),
            timeseries: grid.flatten(),
            demographics,
            outliers_removed: report.removed,
        }
    }

    pub fn demographic_dimension(&self) -> usize {
        if self.config.include_demographics {
            self.demographics.dimension()
        } else {
            0
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), FeaturizeError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FeaturizeError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
