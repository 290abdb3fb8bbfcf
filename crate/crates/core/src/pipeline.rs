//! Stage orchestration with checksum-based provenance.
//!
//! Every stage records a digest of its inputs (relevant config, predecessor
//! outputs, external files) and checksums of what it wrote in
//! `<work_dir>/provenance.json`. A stage whose input digest is unchanged and
//! whose outputs are intact is skipped as up to date.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::cohort::{apply_cohort, label_cohort, CohortError, ExclusionTally, LabeledStay};
use crate::config::{ConfigError, RunConfig};
use crate::encoders::{
    encode_native, read_manifest, run_external_encoder, write_manifest, Coverage, CoveragePolicy, EmbeddingManifest,
    EncoderBackend, EncoderError,
};
use crate::eval::{evaluate, write_evaluation, EvalError, EvalReport};
use crate::featurize::{FeaturizeError, FeaturizerState, StructuredFeatures, VariableRangeTable};
use crate::fusion::{assemble_fused, split_80_20, train_logreg, FeatureMap, FusedDataset, FusionError, LogRegModel, Split};
use crate::ingest::{ingest_dir, IngestError, MasterDataset, SchemaSet};
use crate::lvlm::{
    parse_answer, render_prompt, run_lvlm, score_lvlm, write_log, ChatTransport, HttpTransport, LvlmError, LvlmReport,
    MockScript, MockServer,
};
use crate::synth::{generate, SynthError};
use crate::util::{file_sha256, sha256_hex};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{stage}: input {path} changed since it was produced; rerun the stage that writes it")]
    StaleInput { stage: String, path: String },
    #[error("{stage}: stage {needs} has not been run")]
    MissingInput { stage: String, needs: String },
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Featurize(#[from] FeaturizeError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Lvlm(#[from] LvlmError),
    #[error("{stage}: {message}")]
    Data { stage: String, message: String },
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl PipelineError {
    /// 2 for configuration problems, 4 for external encoder or endpoint
    /// failures, 3 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Synth(SynthError::InvalidConfig(_)) => 2,
            PipelineError::Cohort(CohortError::InvalidCriteria(_)) => 2,
            PipelineError::Encoder(_) | PipelineError::Lvlm(_) => 4,
            _ => 3,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Synth,
    Ingest,
    Cohort,
    Featurize,
    Encode,
    Train,
    Evaluate,
    LvlmEval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Synth,
        Stage::Ingest,
        Stage::Cohort,
        Stage::Featurize,
        Stage::Encode,
        Stage::Train,
        Stage::Evaluate,
        Stage::LvlmEval,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::Cohort => "cohort",
            Stage::Featurize => "featurize",
            Stage::Encode => "encode",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::LvlmEval => "lvlm-eval",
            Stage::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }

    fn requires(self) -> &'static [Stage] {
        use Stage::*;
        match self {
            Synth | Ingest => &[],
            Cohort => &[Ingest],
            Featurize | Encode => &[Ingest, Cohort],
            Train => &[Ingest, Cohort, Featurize, Encode],
            Evaluate => &[Ingest, Cohort, Featurize, Encode, Train],
            LvlmEval => &[Ingest, Cohort, Featurize],
            Report => &[Evaluate],
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StageStatus {
    Ran(String),
    UpToDate,
    Skipped(String),
}

impl std::fmt::Display for StageStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StageStatus::Ran(s) => write!(f, "done ({s})"),
            StageStatus::UpToDate => f.write_str("up to date"),
            StageStatus::Skipped(s) => write!(f, "skipped ({s})"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub input_sha256: String,
    /// Keyed by `work/<path>` or `input/<path>`.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_sha256: String,
    pub stages: BTreeMap<String, StageRecord>,
}

/// Files under `dir`, recursively, sorted.
fn list_files(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| io_err(&d, e))? {
            let p = entry.map_err(|e| io_err(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn digest_dir(dir: &Path) -> Result<Value, PipelineError> {
    let mut m = serde_json::Map::new();
    for f in list_files(dir)? {
        let rel = f.strip_prefix(dir).unwrap_or(&f).to_string_lossy().replace('\\', "/");
        m.insert(rel, Value::String(file_sha256(&f).map_err(|e| io_err(&f, e))?));
    }
    Ok(Value::Object(m))
}

fn digest_file(path: Option<&Path>) -> Result<Value, PipelineError> {
    match path {
        Some(p) => Ok(Value::String(file_sha256(p).map_err(|e| io_err(p, e))?)),
        None => Ok(Value::Null),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortRow {
    pub stay_id: i64,
    pub subject_id: i64,
    pub mortality: u8,
    pub los: u8,
    pub gender: String,
    pub race: String,
    pub age_band: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortFile {
    pub tally: ExclusionTally,
    pub n_stays: usize,
    pub mortality_positive: usize,
    pub los_positive: usize,
    pub stays: Vec<CohortRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitFile {
    #[serde(flatten)]
    pub split: Split,
    pub train_stay_ids: Vec<i64>,
    pub test_stay_ids: Vec<i64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StructuredMeta {
    stay_ids: Vec<i64>,
    timeseries_dim: usize,
    demographics_dim: usize,
    has_vitals: Vec<bool>,
    outliers_removed: usize,
}

pub struct Pipeline {
    pub config: RunConfig,
    provenance: Provenance,
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Self, PipelineError> {
        let path = config.paths.work_dir.join("provenance.json");
        let mut provenance: Provenance = if path.exists() { read_json(&path)? } else { Provenance::default() };
        provenance.config_sha256 = sha256_hex(config.to_json().as_bytes());
        Ok(Self { config, provenance })
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    fn work(&self, rel: &str) -> PathBuf {
        self.config.paths.work_dir.join(rel)
    }

    fn resolve(&self, key: &str) -> PathBuf {
        match key.split_once('/') {
            Some(("input", rest)) => self.config.paths.input_dir.join(rest),
            Some(("work", rest)) => self.config.paths.work_dir.join(rest),
            _ => PathBuf::from(key),
        }
    }

    fn key_for(&self, path: &Path) -> String {
        let p = &self.config.paths;
        if let Ok(r) = path.strip_prefix(&p.work_dir) {
            format!("work/{}", r.to_string_lossy().replace('\\', "/"))
        } else if let Ok(r) = path.strip_prefix(&p.input_dir) {
            format!("input/{}", r.to_string_lossy().replace('\\', "/"))
        } else {
            path.to_string_lossy().into_owned()
        }
    }

    /// `Some(key)` of the first output that is missing or differs.
    fn first_changed(&self, rec: &StageRecord) -> Option<String> {
        rec.outputs
            .iter()
            .find(|(k, sha)| file_sha256(&self.resolve(k)).ok().as_ref() != Some(*sha))
            .map(|(k, _)| k.clone())
    }

    fn save_provenance(&self) -> Result<(), PipelineError> {
        write_json(&self.work("provenance.json"), &self.provenance)
    }

    fn stage_inputs(&self, stage: Stage) -> Result<Value, PipelineError> {
        let c = &self.config;
        Ok(match stage {
            Stage::Synth => json!({"synth": c.synth}),
            Stage::Ingest => json!({"source": digest_dir(&c.paths.input_dir)?}),
            Stage::Cohort => json!({"cohort": c.cohort, "grouping": c.grouping}),
            Stage::Featurize => json!({
                "featurizer": c.featurizer,
                "split_by": c.model.split_by,
                "seed": c.evaluation.seed,
                "ranges": digest_file(c.paths.ranges_csv.as_deref())?,
            }),
            Stage::Encode => json!({
                "encoders": c.encoders,
                "window_hours": c.cohort.criteria.window_hours,
                "images": digest_dir(&c.paths.input_dir.join("images"))?,
            }),
            Stage::Train => json!({"task": c.task, "model": c.model, "seed": c.evaluation.seed}),
            Stage::Evaluate => json!({
                "task": c.task,
                "evaluation": c.evaluation,
                "grouping": c.grouping,
                "split_by": c.model.split_by,
            }),
            Stage::LvlmEval => json!({
                "task": c.task,
                "lvlm": c.lvlm,
                "mock_script": digest_file(c.lvlm.mock_script.as_deref())?,
                "images": digest_dir(&c.paths.input_dir.join("images"))?,
            }),
            Stage::Report => {
                let lvlm = self.provenance.stages.get(Stage::LvlmEval.name()).map(|r| &r.outputs);
                json!({"lvlm": lvlm})
            }
        })
    }

    /// Runs one stage unless it is up to date.
    pub fn run(&mut self, stage: Stage) -> Result<StageStatus, PipelineError> {
        if stage == Stage::Synth && self.config.synth.is_none() {
            return Ok(StageStatus::Skipped("no synth section in config".into()));
        }
        if stage == Stage::LvlmEval && !self.config.lvlm.enabled {
            return Ok(StageStatus::Skipped("lvlm.enabled is false".into()));
        }
        let mut deps = BTreeMap::new();
        for &p in stage.requires() {
            let rec = self.provenance.stages.get(p.name()).ok_or_else(|| PipelineError::MissingInput {
                stage: stage.name().into(),
                needs: p.name().into(),
            })?;
            if let Some(path) = self.first_changed(rec) {
                return Err(PipelineError::StaleInput {
                    stage: stage.name().into(),
                    path,
                });
            }
            deps.insert(p.name(), rec.outputs.clone());
        }
        let input = json!({"stage": stage.name(), "inputs": self.stage_inputs(stage)?, "deps": deps});
        let input_sha256 = sha256_hex(input.to_string().as_bytes());
        if let Some(rec) = self.provenance.stages.get(stage.name()) {
            if rec.input_sha256 == input_sha256 && self.first_changed(rec).is_none() {
                return Ok(StageStatus::UpToDate);
            }
        }

        fs::create_dir_all(&self.config.paths.work_dir).map_err(|e| io_err(&self.config.paths.work_dir, e))?;
        let (outputs, summary) = match stage {
            Stage::Synth => self.synth()?,
            Stage::Ingest => self.ingest()?,
            Stage::Cohort => self.cohort()?,
            Stage::Featurize => self.featurize()?,
            Stage::Encode => self.encode()?,
            Stage::Train => self.train()?,
            Stage::Evaluate => self.evaluate()?,
            Stage::LvlmEval => self.lvlm_eval()?,
            Stage::Report => self.report()?,
        };
        let mut record = StageRecord {
            input_sha256,
            outputs: BTreeMap::new(),
        };
        for path in outputs {
            let sha = file_sha256(&path).map_err(|e| io_err(&path, e))?;
            record.outputs.insert(self.key_for(&path), sha);
        }
        self.provenance.stages.insert(stage.name().into(), record);
        self.save_provenance()?;
        Ok(StageStatus::Ran(summary))
    }

    /// Chains every stage in order, reporting each status.
    pub fn run_all(&mut self, mut on_status: impl FnMut(Stage, &StageStatus)) -> Result<(), PipelineError> {
        for stage in Stage::ALL {
            let status = self.run(stage)?;
            on_status(stage, &status);
        }
        Ok(())
    }

    fn synth(&self) -> Result<(Vec<PathBuf>, String), PipelineError> {
        let cfg = self.config.synth.as_ref().expect("checked by run");
        let dir = &self.config.paths.input_dir;
        let truth = generate(cfg, dir)?;
        Ok((list_files(dir)?, format!("{} stays, {} deaths", truth.n_stays, truth.n_deaths)))
    }

    fn ingest(&self) -> Result<(Vec<PathBuf>, String), PipelineError> {
        let input = &self.config.paths.input_dir;
        let schema_path = input.join("schemas.json");
        let schemas = if schema_path.exists() {
            SchemaSet::load(&schema_path)?
        } else {
            SchemaSet::mimic_default()
        };
        let (master, report) = ingest_dir(input, &schemas)?;
        let master_dir = self.work("master");
        master.write(&master_dir)?;
        let report_path = self.work("ingest_report.json");
        write_json(&report_path, &report)?;
        let mut outputs = list_files(&master_dir)?;
        outputs.push(report_path);
        Ok((outputs, format!("{} stays, {} rejects", master.len(), report.rejects.len())))
    }

    fn cohort(&self) -> Result<(Vec<PathBuf>, String), PipelineError> {
        let c = &self.config;
        let master = MasterDataset::read(&self.work("master"))?;
        let cohort = apply_cohort(&master, &c.cohort.criteria)?;
        let labeled = label_cohort(&cohort.stays, &c.cohort.criteria, &c.grouping, c.cohort.los_threshold_days)?;
        let stays: Vec<CohortRow> = labeled
            .iter()
            .map(|l| CohortRow {
                stay_id: l.stay_id(),
                subject_id: l.stay.key.subject_id,
                mortality: l.mortality,
                los: l.los,
                gender: l.groups.gender.clone(),
                race: l.groups.race.clone(),
                age_band: l.groups.age_band.clone(),
            })
            .collect();
        let file = CohortFile {
            tally: cohort.tally,
            n_stays: stays.len(),
            mortality_positive: stays.iter().filter(|s| s.mortality == 1).count(),
            los_positive: stays.iter().filter(|s| s.los == 1).count(),
            stays,
        };
        let path = self.work("cohort.json");
        write_json(&path, &file)?;
        Ok((vec![path], format!("{} stays", file.n_stays)))
    }

    /// The labeled cohort, in `cohort.json` order.
    pub fn labeled_stays(&self) -> Result<Vec<LabeledStay>, PipelineError> {
        let c = &self.config;
        let file: CohortFile = read_json(&self.work("cohort.json"))?;
        let master = MasterDataset::read(&self.work("master"))?;
        let by_id: BTreeMap<i64, usize> = master.stays.iter().enumerate().map(|(i, s)| (s.key.stay_id, i)).collect();
        let mut records = Vec::with_capacity(file.stays.len());
        for row in &file.stays {
            let i = by_id.get(&row.stay_id).ok_or_else(|| PipelineError::Data {
                stage: "cohort".into(),
                message: format!("stay {} in cohort.json is not in the master dataset", row.stay_id),
            })?;
            records.push(master.stays[*i].clone());
        }
        Ok(label_cohort(&records, &c.cohort.criteria, &c.grouping, c.cohort.los_threshold_days)?)
    }

    pub fn load_split(&self) -> Result<SplitFile, PipelineError> {
        read_json(&self.work("split.json"))
    }

    fn featurize(&self) -> Result<(Vec<PathBuf>, String), PipelineError> {
        let c = &self.config;
        let stays = self.labeled_stays()?;
        let subjects: Vec<i64> = stays.iter().map(|s| s.stay.key.subject_id).collect();
        let split = split_80_20(&subjects, c.evaluation.seed, c.model.split_by)?;
        let ids = |idx: &[usize]| idx.iter().map(|&i| stays[i].stay_id()).collect::<Vec<_>>();
        let split_file = SplitFile {
            train_stay_ids: ids(&split.train),
            test_stay_ids: ids(&split.test),
            split,
        };

        let ranges = match &c.paths.ranges_csv {
            Some(p) => VariableRangeTable::read_csv(p)?,
            None => VariableRangeTable::clinical_default(),
        };
        let train: Vec<&LabeledStay> = split_file.split.train.iter().map(|&i| &stays[i]).collect();
        let state = FeaturizerState::fit(&train, &c.featurizer, &ranges)?;
        let features: Vec<StructuredFeatures> = stays.iter().map(|s| state.transform(s)).collect();

        let ts_dim = c.featurizer.timeseries_dimension();
        let demo_dim = state.demographic_dimension();
        let mut bytes = Vec::with_capacity(features.len() * (ts_dim + demo_dim) * 8);
        for f in &features {
            for v in f.timeseries.iter().chain(&f.demographics) {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = StructuredMeta {
            stay_ids: stays.iter().map(|s| s.stay_id()).collect(),
            timeseries_dim: ts_dim,
            demographics_dim: demo_dim,
            has_vitals: features.iter().map(|f| f.has_vitals).collect(),
            outliers_removed: features.iter().map(|f| f.outliers_removed).sum(),
        };

        let split_path = self.work("split.json");
        let state_path = self.work("featurizer_state.json");
        let meta_path = self.work("structured.json");
        let bin_path = self.work("structured.f64le");
        write_json(&split_path, &split_file)?;
        state.save(&state_path)?;
        write_json(&meta_path, &meta)?;
        fs::write(&bin_path, bytes).map_err(|e| io_err(&bin_path, e))?;
        Ok((
            vec![split_path, state_path, meta_path, bin_path],
            format!(
                "{} train / {} test, {} structured features per stay",
                split_file.train_stay_ids.len(),
                split_file.test_stay_ids.len(),
                ts_dim + demo_dim
            ),
        ))
    }

    pub fn load_structured(&self, stays: &[LabeledStay]) -> Result<Vec<StructuredFeatures>, PipelineError> {
        let meta: StructuredMeta = read_json(&self.work("structured.json"))?;
        let stale = || PipelineError::Data {
            stage: "featurize".into(),
            message: "structured features do not match the cohort".into(),
        };
        if meta.stay_ids.len() != stays.len() || meta.stay_ids.iter().zip(stays).any(|(&a, s)| a != s.stay_id()) {
            return Err(stale());
        }
        let bin_path = self.work("structured.f64le");
        let bytes = fs::read(&bin_path).map_err(|e| io_err(&bin_path, e))?;
        let width = meta.timeseries_dim + meta.demographics_dim;
        if bytes.len() != stays.len() * width * 8 {
            return Err(stale());
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        Ok((0..stays.len())
            .map(|i| {
                let row = &values[i * width..(i + 1) * width];
                StructuredFeatures {
                    timeseries: row[..meta.timeseries_dim].to_vec(),
                    demographics: row[meta.timeseries_dim..].to_vec(),
                    has_vitals: meta.has_vitals[i],
                    outliers_removed: 0,
                }
            })
            .collect())
    }

    fn encode(&self) -> Result<(Vec<PathBuf>, String), PipelineError> {
        let c = &self.config;
        let stays = self.labeled_stays()?;
        let expected: Vec<i64> = stays.iter().map(|s| s.stay_id()).collect();
        let mut coverage = BTreeMap::new();
        let mut outputs = Vec::new();
        for spec in &c.encoders.selected {
            let dir = self.work(&format!("embeddings/{}", spec.name));
            let cov = match &spec.backend {
                EncoderBackend::Native { .. } => {
                    let m = encode_native(spec, &stays, &c.paths.input_dir)?;
                    let cov = Coverage::of(&m, &expected);
                    if c.encoders.coverage == CoveragePolicy::Strict && !cov.missing.is_empty() {
                        return Err(EncoderError::CoverageGap {
                            missing: cov.missing.clone(),
                            expected: cov.expected,
                        }
                        .into());
                    }
                    write_manifest(&m, &dir)?;
                    cov
                }
                EncoderBackend::External { .. } => {
                    run_external_encoder(
                        spec,
                        &self.work("master"),
                        &dir,
                        c.cohort.criteria.window_hours,
                        &expected,
                        c.encoders.coverage,
                    )?
                    .1
                }
            };
            if !cov.missing.is_empty() {
                log::info!(
                    "encoder {}: {} of {} stays without an embedding",
                    spec.name,
                    cov.missing.len(),
                    cov.expected
                );
            }
            coverage.insert(spec.name.clone(), cov);
            outputs.extend(list_files(&dir)?);
        }
        let path = self.work("embeddings/coverage.json");
        write_json(&path, &coverage)?;
        outputs.push(path);
        Ok((outputs, format!("{} encoder(s)", c.encoders.selected.len())))
    }

    fn load_manifests(&self) -> Result<Vec<EmbeddingManifest>, PipelineError> {
        self.config
            .encoders
            .selected
            .iter()
            .map(|s| Ok(read_manifest(&self.work(&format!("embeddings/{}", s.name)))?))
            .collect()
    }

    /// Fused train and test sets. `previous` guards against dimension drift.
    pub fn fused_split(&self, previous: Option<&FeatureMap>) -> Result<(FusedDataset, FusedDataset), PipelineError> {
        let stays = self.labeled_stays()?;
        let structured = self.load_structured(&stays)?;
        let manifests = self.load_manifests()?;
        let refs: Vec<&EmbeddingManifest> = manifests.iter().collect();
        let fused = assemble_fused(&stays, self.config.task, &structured, &refs, previous)?;
        let split = self.load_split()?;
        Ok((fused.subset(&split.split.train), fused.subset(&split.split.test)))
    }

    fn train(&self) -> Result<(Vec<PathBuf>, String), PipelineError> {
        let c = &self.config;
        let map_path = self.work("feature_map.json");
        let previous = if map_path.exists() { Some(FeatureMap::load(&map_path)?) } else { None };
        let (train, _) = self.fused_split(previous.as_ref())?;
        let mut model = train_logreg(&train.x, &train.y, train.d, &c.model.hyper, c.evaluation.seed)?;
        for name in ["featurizer_state.json", "split.json", "structured.f64le"] {
            let p = self.work(name);
            model.references.insert(name.into(), file_sha256(&p).map_err(|e| io_err(&p, e))?);
        }
        train.feature_map.save(&map_path)?;
        model
            .references
            .insert("feature_map.json".into(), file_sha256(&map_path).map_err(|e| io_err(&map_path, e))?);
        let model_path = self.work("model.json");
        model.save(&model_path)?;
        Ok((
            vec![map_path, model_path],
            format!(
                "D={}, {} iterations, {}",
                train.d, model.metadata.iterations, model.metadata.status
            ),
        ))
    }

    fn evaluate(&self) -> Result<(Vec<PathBuf>, String), PipelineError> {
        let c = &self.config;
        let map = FeatureMap::load(&self.work("feature_map.json"))?;
        let model = LogRegModel::load(&self.work("model.json"))?;
        let (train, test) = self.fused_split(Some(&map))?;
        let mut eval = evaluate(&model, &train, &test, c.task, c.model.split_by, &c.evaluation, &c.grouping)?;
        let state = FeaturizerState::load(&self.work("featurizer_state.json"))?;
        eval.report.feature_statistics = Some(state.provenance);
        let dir = self.work("reports");
        write_evaluation(&eval, &dir)?;

        let pred_path = dir.join("predictions.csv");
        let split = self.load_split()?;
        let mut w = csv::Writer::from_path(&pred_path).map_err(|e| io_err(&pred_path, e))?;
        w.write_record(["stay_id", "label", "probability"]).map_err(|e| io_err(&pred_path, e))?;
        for ((id, y), p) in split.test_stay_ids.iter().zip(&test.y).zip(&eval.probabilities) {
            w.write_record([id.to_string(), y.to_string(), p.to_string()])
                .map_err(|e| io_err(&pred_path, e))?;
        }
        w.flush().map_err(|e| io_err(&pred_path, e))?;

        let auroc = eval.report.metric("auroc").and_then(|m| m.point);
        Ok((
            vec![
                dir.join("eval_report.json"),
                dir.join("roc_points.csv"),
                dir.join("pr_points.csv"),
                pred_path,
            ],
            format!("test AUROC {}", fmt_opt(auroc)),
        ))
    }

    fn lvlm_eval(&self) -> Result<(Vec<PathBuf>, String), PipelineError> {
        let c = &self.config;
        let stays = self.labeled_stays()?;
        let split = self.load_split()?;
        let instances: Vec<_> = split
            .split
            .test
            .iter()
            .map(|&i| render_prompt(&stays[i], c.task, c.lvlm.endpoint.max_images))
            .collect();
        let mut endpoint = c.lvlm.endpoint.clone();
        let _server;
        let transport: Box<dyn ChatTransport> = match &c.lvlm.mock_script {
            Some(p) => {
                let server = MockServer::start(MockScript::load(p)?).map_err(|e| io_err(p, e))?;
                endpoint.base_url = server.base_url();
                _server = server;
                Box::new(HttpTransport::new(&endpoint)?)
            }
            None => Box::new(HttpTransport::new(&endpoint)?),
        };
        let answers = run_lvlm(&instances, transport.as_ref(), &endpoint, &c.paths.input_dir)?;
        let dir = self.work("reports");
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let log_path = dir.join("lvlm_log.jsonl");
        write_log(&log_path, &instances, &answers, endpoint.redact_prompts)?;
        let parsed: Vec<_> = answers.iter().map(|a| parse_answer(&a.raw)).collect();
        let truth: Vec<u8> = instances.iter().map(|i| i.ground_truth).collect();
        let report = score_lvlm(c.task, &parsed, &truth, c.lvlm.policy);
        let report_path = dir.join("lvlm_report.json");
        write_json(&report_path, &report)?;
        Ok((
            vec![report_path, log_path],
            format!("{} prompts, answerable {}%", report.total, fmt_opt(report.answerable_pct)),
        ))
    }

    fn report(&self) -> Result<(Vec<PathBuf>, String), PipelineError> {
        let dir = self.work("reports");
        let eval: EvalReport = read_json(&dir.join("eval_report.json"))?;
        let lvlm_path = dir.join("lvlm_report.json");
        let lvlm: Option<LvlmReport> = if self.provenance.stages.contains_key(Stage::LvlmEval.name()) && lvlm_path.exists()
        {
            Some(read_json(&lvlm_path)?)
        } else {
            None
        };
        let outputs = write_report(&eval, lvlm.as_ref(), &dir)?;
        Ok((outputs, format!("{}", dir.join("summary.md").display())))
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

/// Renders the evaluation (and optional LVLM) report as `summary.md` plus
/// CSV tables for plotting. Returns the written paths.
pub fn write_report(eval: &EvalReport, lvlm: Option<&LvlmReport>, dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut md = String::new();
    let _ = writeln!(md, "# Evaluation summary\n");
    let _ = writeln!(md, "- task: {}", eval.task.name());
    let _ = writeln!(
        md,
        "- split: by {} ({} train, {} test, {} test positives)",
        match eval.split_by {
            crate::fusion::SplitBy::Stay => "stay",
            crate::fusion::SplitBy::Patient => "patient",
        },
        eval.n_train,
        eval.n_test,
        eval.test_positives
    );
    let _ = writeln!(md, "- modalities: {}", eval.modalities.join(", "));
    let _ = writeln!(
        md,
        "- model: {} features, lambda {:.3e}, {} iterations, {}",
        eval.model.dimension, eval.model.lambda, eval.model.iterations, eval.model.status
    );
    let _ = writeln!(md, "- threshold: {}\n", eval.threshold);

    let _ = writeln!(md, "## Metrics\n");
    let _ = writeln!(md, "| metric | value | CI low | CI high |");
    let _ = writeln!(md, "|---|---|---|---|");
    let mut metrics_csv = csv::Writer::from_writer(Vec::new());
    let _ = metrics_csv.write_record(["metric", "value", "ci_low", "ci_high", "level", "n_boot"]);
    for m in &eval.metrics {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} |",
            m.name,
            fmt_opt(m.point),
            fmt_opt(m.ci_low),
            fmt_opt(m.ci_high)
        );
        let _ = metrics_csv.write_record([
            m.name.clone(),
            fmt_opt(m.point),
            fmt_opt(m.ci_low),
            fmt_opt(m.ci_high),
            m.level.to_string(),
            m.n_boot.to_string(),
        ]);
    }
    for m in eval.metrics.iter().filter(|m| m.note.is_some()) {
        let _ = writeln!(md, "\n> {}: {}", m.name, m.note.as_deref().unwrap_or_default());
    }
    let c = eval.confusion;
    let _ = writeln!(md, "\nConfusion at threshold: TP {} FP {} TN {} FN {}\n", c.tp, c.fp, c.tn, c.fn_);

    let _ = writeln!(md, "## Fairness\n");
    let _ = writeln!(md, "| attribute | demographic parity | equalized odds | TPR ratio | FPR ratio |");
    let _ = writeln!(md, "|---|---|---|---|---|");
    let mut fair_csv = csv::Writer::from_writer(Vec::new());
    let _ = fair_csv.write_record([
        "attribute",
        "group",
        "n",
        "n_positive",
        "auroc",
        "accuracy",
        "selection_rate",
        "tpr",
        "fpr",
    ]);
    for f in &eval.fairness {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} |",
            f.attribute,
            fmt_opt(f.demographic_parity),
            fmt_opt(f.equalized_odds),
            fmt_opt(f.tpr_ratio),
            fmt_opt(f.fpr_ratio)
        );
        for g in &f.groups {
            let _ = fair_csv.write_record([
                f.attribute.clone(),
                g.group.clone(),
                g.n.to_string(),
                g.n_positive.to_string(),
                fmt_opt(g.auroc),
                fmt_opt(g.accuracy),
                fmt_opt(g.selection_rate),
                fmt_opt(g.tpr),
                fmt_opt(g.fpr),
            ]);
        }
    }
    for f in &eval.fairness {
        let _ = writeln!(md, "\n### Subgroups by {}\n", f.attribute);
        let _ = writeln!(md, "| group | n | positives | AUROC | accuracy | selection rate | TPR | FPR |");
        let _ = writeln!(md, "|---|---|---|---|---|---|---|---|");
        for g in &f.groups {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} | {} | {} | {} |",
                g.group,
                g.n,
                g.n_positive,
                fmt_opt(g.auroc),
                fmt_opt(g.accuracy),
                fmt_opt(g.selection_rate),
                fmt_opt(g.tpr),
                fmt_opt(g.fpr)
            );
        }
        for n in &f.notes {
            let _ = writeln!(md, "\n> {n}");
        }
    }

    let _ = writeln!(md, "\n## Modality importance\n");
    let _ = writeln!(md, "| modality | width | mean abs SHAP share | abs coefficient share |");
    let _ = writeln!(md, "|---|---|---|---|");
    let mut imp_csv = csv::Writer::from_writer(Vec::new());
    let _ = imp_csv.write_record(["modality", "width", "shap_raw", "shap_share", "coef_raw", "coef_share"]);
    for s in &eval.modality_importance {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} |",
            s.modality,
            s.width,
            fmt_opt(s.shap_share),
            fmt_opt(s.coef_share)
        );
        let _ = imp_csv.write_record([
            s.modality.clone(),
            s.width.to_string(),
            format!("{:.6}", s.shap_raw),
            fmt_opt(s.shap_share),
            format!("{:.6}", s.coef_raw),
            fmt_opt(s.coef_share),
        ]);
    }

    if let Some(l) = lvlm {
        let _ = writeln!(md, "\n## Vision-language model\n");
        let _ = writeln!(
            md,
            "- {} prompts: {} yes, {} no, {} refusals (answerable {}%)",
            l.total,
            l.yes,
            l.no,
            l.refusals,
            fmt_opt(l.answerable_pct)
        );
        let m = &l.metrics;
        let _ = writeln!(
            md,
            "- accuracy {}, precision {}, recall {}, specificity {}, F1 {}",
            fmt_opt(m.accuracy),
            fmt_opt(m.precision),
            fmt_opt(m.recall),
            fmt_opt(m.specificity),
            fmt_opt(m.f1)
        );
    }
    if let Some(s) = &eval.feature_statistics {
        let _ = writeln!(
            md,
            "\nFeature statistics fitted on the {} split ({} stays, id digest {}).",
            s.split,
            s.n_stays,
            &s.stay_ids_sha256[..12.min(s.stay_ids_sha256.len())]
        );
    }

    let mut written = Vec::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<(), PipelineError> {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| io_err(&p, e))?;
        written.push(p);
        Ok(())
    };
    put("summary.md", md.into_bytes())?;
    for (name, w) in [("metrics.csv", metrics_csv), ("fairness.csv", fair_csv), ("modality_importance.csv", imp_csv)] {
        let bytes = w.into_inner().map_err(|e| io_err(&dir.join(name), e))?;
        put(name, bytes)?;
    }
    Ok(written)
}
