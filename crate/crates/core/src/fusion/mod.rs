//! Fused design matrix assembly, train/test splitting and the logistic
//! regression head.

mod logreg;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Groups, LabeledStay, Task};
use crate::encoders::EmbeddingManifest;
use crate::featurize::StructuredFeatures;

pub use logreg::{
    log_loss, minimize, objective, objective_and_gradient, predict_proba, sigmoid, train_logreg, LogRegHyper,
    LogRegModel, Optimum, TrainMetadata,
};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("block {block:?} changed dimension between runs: {previous} -> {current}")]
    DimensionDrift {
        block: String,
        previous: usize,
        current: usize,
    },
    #[error("dimension mismatch: expected {expected} columns, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("training set contains a single class")]
    SingleClassTrainingSet,
    #[error("need at least 5 rows to split, got {0}")]
    TooFewRows(usize),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{0} rows supplied for {1} stays")]
    LengthMismatch(usize, usize),
    #[error("invalid model file: {0}")]
    InvalidModel(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, FusionError> {
    let text = std::fs::read_to_string(path).map_err(|source| FusionError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| FusionError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FusionError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| FusionError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|source| FusionError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Features,
    Presence,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureBlock {
    pub name: String,
    pub modality: String,
    pub kind: BlockKind,
    /// Half-open column range.
    pub start: usize,
    pub end: usize,
}

impl FeatureBlock {
    pub fn width(&self) -> usize {
        self.end - self.start
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub dimension: usize,
    pub blocks: Vec<FeatureBlock>,
}

impl FeatureMap {
    /// True when blocks tile `[0, dimension)` without gaps or overlap.
    pub fn is_partition(&self) -> bool {
        let mut next = 0;
        for b in &self.blocks {
            if b.start != next || b.end < b.start {
                return false;
            }
            next = b.end;
        }
        next == self.dimension
    }

    pub fn modalities(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.blocks
            .iter()
            .filter(|b| b.kind == BlockKind::Features)
            .filter(|b| seen.insert(b.modality.clone()))
            .map(|b| b.modality.clone())
            .collect()
    }

    /// Errors when a block present in both maps has changed width.
    pub fn check_drift(&self, previous: &FeatureMap) -> Result<(), FusionError> {
        let old: BTreeMap<&str, usize> = previous
            .blocks
            .iter()
            .map(|b| (b.name.as_str(), b.width()))
            .collect();
        for b in &self.blocks {
            if let Some(&w) = old.get(b.name.as_str()) {
                if w != b.width() {
                    return Err(FusionError::DimensionDrift {
                        block: b.name.clone(),
                        previous: w,
                        current: b.width(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), FusionError> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self, FusionError> {
        read_json(path)
    }
}

pub const STRUCTURED_BLOCK: &str = "structured";
pub const DEMOGRAPHICS_BLOCK: &str = "demographics";

/// Row-major fused design matrix with labels and bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedDataset {
    pub x: Vec<f64>,
    pub y: Vec<u8>,
    pub n: usize,
    pub d: usize,
    pub feature_map: FeatureMap,
    /// Presence modality names, in flag column order.
    pub presence_names: Vec<String>,
    /// `n * presence_names.len()` row-major flags.
    pub presence: Vec<u8>,
    pub groups: Vec<Groups>,
    pub stay_ids: Vec<i64>,
    pub subject_ids: Vec<i64>,
}

impl FusedDataset {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn presence_row(&self, i: usize) -> &[u8] {
        let m = self.presence_names.len();
        &self.presence[i * m..(i + 1) * m]
    }

    pub fn subset(&self, rows: &[usize]) -> FusedDataset {
        let m = self.presence_names.len();
        let mut out = FusedDataset {
            x: Vec::with_capacity(rows.len() * self.d),
            y: Vec::with_capacity(rows.len()),
            n: rows.len(),
            d: self.d,
            feature_map: self.feature_map.clone(),
            presence_names: self.presence_names.clone(),
            presence: Vec::with_capacity(rows.len() * m),
            groups: Vec::with_capacity(rows.len()),
            stay_ids: Vec::with_capacity(rows.len()),
            subject_ids: Vec::with_capacity(rows.len()),
        };
        for &r in rows {
            out.x.extend_from_slice(self.row(r));
            out.y.push(self.y[r]);
            out.presence.extend_from_slice(self.presence_row(r));
            out.groups.push(self.groups[r].clone());
            out.stay_ids.push(self.stay_ids[r]);
            out.subject_ids.push(self.subject_ids[r]);
        }
        out
    }

    /// Per-column mean, accumulated in row order.
    pub fn column_means(&self) -> Vec<f64> {
        let mut mu = vec![0.0; self.d];
        for i in 0..self.n {
            for (m, v) in mu.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        if self.n > 0 {
            for m in &mut mu {
                *m /= self.n as f64;
            }
        }
        mu
    }
}

/// Concatenates `[structured | demographics | manifests in order | presence flags]`
/// per stay. A stay absent from a manifest gets a zero block and flag 0.
pub fn assemble_fused(
    stays: &[LabeledStay],
    task: Task,
    structured: &[StructuredFeatures],
    manifests: &[&EmbeddingManifest],
    previous: Option<&FeatureMap>,
) -> Result<FusedDataset, FusionError> {
    if structured.len() != stays.len() {
        return Err(FusionError::LengthMismatch(structured.len(), stays.len()));
    }
    let ts_dim = structured.first().map_or(0, |s| s.timeseries.len());
    let demo_dim = structured.first().map_or(0, |s| s.demographics.len());

    let mut blocks = Vec::new();
    let mut at = 0;
    let mut push = |name: &str, modality: &str, kind: BlockKind, width: usize| {
        blocks.push(FeatureBlock {
            name: name.to_string(),
            modality: modality.to_string(),
            kind,
            start: at,
            end: at + width,
        });
        at += width;
    };
    push(STRUCTURED_BLOCK, STRUCTURED_BLOCK, BlockKind::Features, ts_dim);
    if demo_dim > 0 {
        push(DEMOGRAPHICS_BLOCK, DEMOGRAPHICS_BLOCK, BlockKind::Features, demo_dim);
    }
    for m in manifests {
        push(&m.encoder_name, m.modality.name(), BlockKind::Features, m.dimension);
    }
    let mut presence_names = vec![STRUCTURED_BLOCK.to_string()];
    presence_names.extend(manifests.iter().map(|m| m.encoder_name.clone()));
    push("present:structured", STRUCTURED_BLOCK, BlockKind::Presence, 1);
    for m in manifests {
        push(&format!("present:{}", m.encoder_name), m.modality.name(), BlockKind::Presence, 1);
    }
    let feature_map = FeatureMap { dimension: at, blocks };
    if let Some(prev) = previous {
        feature_map.check_drift(prev)?;
    }

    let d = feature_map.dimension;
    let n = stays.len();
    let indices: Vec<_> = manifests.iter().map(|m| m.index()).collect();
    let mut x = Vec::with_capacity(n * d);
    let mut presence = Vec::with_capacity(n * presence_names.len());
    for (stay, feats) in stays.iter().zip(structured) {
        if feats.timeseries.len() != ts_dim || feats.demographics.len() != demo_dim {
            return Err(FusionError::DimensionMismatch {
                expected: ts_dim + demo_dim,
                found: feats.timeseries.len() + feats.demographics.len(),
            });
        }
        let start = x.len();
        if feats.has_vitals {
            x.extend_from_slice(&feats.timeseries);
        } else {
            x.extend(std::iter::repeat_n(0.0, ts_dim));
        }
        x.extend_from_slice(&feats.demographics);
        let mut flags = vec![u8::from(feats.has_vitals)];
        for (m, idx) in manifests.iter().zip(&indices) {
            match idx.get(&stay.stay_id()) {
                Some(&r) => {
                    x.extend(m.row(r).iter().map(|&v| v as f64));
                    flags.push(1);
                }
                None => {
                    x.extend(std::iter::repeat_n(0.0, m.dimension));
                    flags.push(0);
                }
            }
        }
        x.extend(flags.iter().map(|&f| f as f64));
        presence.extend_from_slice(&flags);
        if let Some(bad) = x[start..].iter().position(|v| !v.is_finite()) {
            return Err(FusionError::NonFinite(format!(
                "stay {} column {bad}",
                stay.stay_id()
            )));
        }
    }
    Ok(FusedDataset {
        x,
        y: stays.iter().map(|s| s.label(task)).collect(),
        n,
        d,
        feature_map,
        presence_names,
        presence,
        groups: stays.iter().map(|s| s.groups.clone()).collect(),
        stay_ids: stays.iter().map(|s| s.stay_id()).collect(),
        subject_ids: stays.iter().map(|s| s.stay.key.subject_id).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitBy {
    #[default]
    Stay,
    Patient,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub split_by: SplitBy,
    pub seed: u64,
    /// Row indices, ascending.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffled 80/20 split; `floor(0.8 * units)` go to train. With
/// [`SplitBy::Patient`] the units are distinct subjects and every stay of a
/// subject lands on the same side.
pub fn split_80_20(subject_ids: &[i64], seed: u64, by: SplitBy) -> Result<Split, FusionError> {
    let n = subject_ids.len();
    if n < 5 {
        return Err(FusionError::TooFewRows(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = match by {
        SplitBy::Stay => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let k = n * 4 / 5;
            (order[..k].to_vec(), order[k..].to_vec())
        }
        SplitBy::Patient => {
            let mut subjects: Vec<i64> = subject_ids.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
            subjects.shuffle(&mut rng);
            let k = subjects.len() * 4 / 5;
            let chosen: BTreeSet<i64> = subjects[..k].iter().copied().collect();
            (0..n).partition(|&i| chosen.contains(&subject_ids[i]))
        }
    };
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split {
        split_by: by,
        seed,
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EmbeddingModality;
    use crate::ingest::{AdmissionInfo, Demographics, StayKey, StayRecord};
    use proptest::prelude::*;

    fn stay(id: i64, subject: i64, y: u8) -> LabeledStay {
        LabeledStay {
            stay: StayRecord {
                key: StayKey {
                    stay_id: id,
                    hadm_id: id,
                    subject_id: subject,
                    intime: 0,
                    outtime: 86_400,
                },
                demographics: Demographics {
                    age_years: 60.0,
                    gender: "F".into(),
                    race: "WHITE".into(),
                },
                admission: AdmissionInfo {
                    admittime: 0,
                    dischtime: 86_400,
                    deathtime: None,
                    hospital_expire_flag: Some(y == 1),
                },
                vitals: vec![],
                notes: vec![],
                images: vec![],
            },
            mortality: y,
            los: 0,
            groups: Groups {
                gender: "F".into(),
                race: "White".into(),
                age_band: "45–64".into(),
            },
        }
    }

    fn feats(v: f64, ts: usize) -> StructuredFeatures {
        StructuredFeatures {
            timeseries: vec![v; ts],
            demographics: vec![],
            has_vitals: true,
            outliers_removed: 0,
        }
    }

    fn manifest(name: &str, m: EmbeddingModality, dim: usize, ids: &[i64]) -> EmbeddingManifest {
        let rows = ids.iter().map(|&i| (i, vec![i as f32; dim])).collect();
        EmbeddingManifest::from_rows(m, name, dim, rows).unwrap()
    }

    #[test]
    fn table_one_dimensions() {
        let stays = vec![stay(1, 1, 0), stay(2, 2, 1)];
        let f = vec![feats(0.5, 312), feats(1.5, 312)];
        let img = manifest("img", EmbeddingModality::Image, 1376, &[1, 2]);
        let txt = manifest("txt", EmbeddingModality::Text, 768, &[1, 2]);
        let ds = assemble_fused(&stays, Task::Mortality, &f, &[&img, &txt], None).unwrap();
        assert_eq!(ds.d, 2459);
        assert!(ds.feature_map.is_partition());
        let base = assemble_fused(&stays, Task::Mortality, &f, &[], None).unwrap();
        assert_eq!(base.d, 313);
    }

    #[test]
    fn missing_block_is_zero_with_flag() {
        let stays = vec![stay(1, 1, 0), stay(2, 2, 1)];
        let f = vec![feats(0.5, 4), feats(1.5, 4)];
        let img = manifest("img", EmbeddingModality::Image, 3, &[2]);
        let ds = assemble_fused(&stays, Task::Mortality, &f, &[&img], None).unwrap();
        assert_eq!(ds.row(0), &[0.5, 0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(ds.row(1), &[1.5, 1.5, 1.5, 1.5, 2.0, 2.0, 2.0, 1.0, 1.0]);
        assert_eq!(ds.presence_row(0), &[1, 0]);
    }

    #[test]
    fn drift_is_detected() {
        let stays = vec![stay(1, 1, 0)];
        let f = vec![feats(0.0, 4)];
        let a = manifest("txt", EmbeddingModality::Text, 3, &[1]);
        let b = manifest("txt", EmbeddingModality::Text, 5, &[1]);
        let first = assemble_fused(&stays, Task::Mortality, &f, &[&a], None).unwrap();
        let err = assemble_fused(&stays, Task::Mortality, &f, &[&b], Some(&first.feature_map)).unwrap_err();
        assert!(matches!(err, FusionError::DimensionDrift { previous: 3, current: 5, .. }));
    }

    #[test]
    fn split_sizes() {
        let ids: Vec<i64> = (0..100).collect();
        let s = split_80_20(&ids, 1, SplitBy::Stay).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (80, 20));
        let s = split_80_20(&ids[..5], 1, SplitBy::Stay).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (4, 1));
        assert!(matches!(split_80_20(&ids[..4], 1, SplitBy::Stay), Err(FusionError::TooFewRows(4))));
        assert_eq!(split_80_20(&ids, 9, SplitBy::Stay).unwrap(), split_80_20(&ids, 9, SplitBy::Stay).unwrap());
    }

    #[test]
    fn patient_split_keeps_subjects_together() {
        let subjects: Vec<i64> = (0..60).map(|i| i / 3).collect();
        let s = split_80_20(&subjects, 4, SplitBy::Patient).unwrap();
        let train: BTreeSet<i64> = s.train.iter().map(|&i| subjects[i]).collect();
        let test: BTreeSet<i64> = s.test.iter().map(|&i| subjects[i]).collect();
        assert!(train.is_disjoint(&test));
        assert_eq!(train.len(), 16);
    }

    proptest! {
        #[test]
        fn split_partitions_rows(n in 5usize..300, seed in any::<u64>()) {
            let ids: Vec<i64> = (0..n as i64).collect();
            let s = split_80_20(&ids, seed, SplitBy::Stay).unwrap();
            prop_assert_eq!(s.train.len(), n * 4 / 5);
            let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
