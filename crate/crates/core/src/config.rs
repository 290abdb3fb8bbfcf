//! Run configuration: one JSON document with a section per stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::cohort::{CohortCriteria, GroupingConfig, Task};
use crate::encoders::{CoveragePolicy, EncoderSpec};
use crate::eval::EvalConfig;
use crate::featurize::FeaturizerConfig;
use crate::fusion::{LogRegHyper, SplitBy};
use crate::lvlm::{EndpointConfig, RefusalPolicy};
use crate::synth::SynthConfig;

#[derive(Debug, Error)]
#[error("config error at {field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: &str, message: impl Into<String>) -> Self {
        Self {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub input_dir: PathBuf,
    pub work_dir: PathBuf,
    /// Optional `variable_id,min_valid,max_valid` table replacing the built-in ranges.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranges_csv: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            input_dir: "data/source".into(),
            work_dir: "work".into(),
            ranges_csv: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSection {
    #[serde(flatten)]
    pub criteria: CohortCriteria,
    pub los_threshold_days: f64,
}

impl Default for CohortSection {
    fn default() -> Self {
        Self {
            criteria: CohortCriteria::default(),
            los_threshold_days: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodersSection {
    pub selected: Vec<EncoderSpec>,
    pub coverage: CoveragePolicy,
}

impl Default for EncodersSection {
    fn default() -> Self {
        Self {
            selected: Vec::new(),
            coverage: CoveragePolicy::AllowGaps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    #[serde(flatten)]
    pub hyper: LogRegHyper,
    pub split_by: SplitBy,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hyper: LogRegHyper::default(),
            split_by: SplitBy::Stay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LvlmSection {
    pub enabled: bool,
    #[serde(flatten)]
    pub endpoint: EndpointConfig,
    pub policy: RefusalPolicy,
    /// When set, an in-process mock endpoint serving this script is used.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mock_script: Option<PathBuf>,
}

impl Default for LvlmSection {
    fn default() -> Self {
        Self {
            enabled: false,
            endpoint: EndpointConfig::default(),
            policy: RefusalPolicy::AnsweredOnly,
            mock_script: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub paths: PathsConfig,
    /// Present when `synth` should generate the source tables.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    #[serde(default)]
    pub cohort: CohortSection,
    #[serde(default)]
    pub grouping: GroupingConfig,
    #[serde(default)]
    pub featurizer: FeaturizerConfig,
    #[serde(default)]
    pub encoders: EncodersSection,
    #[serde(default = "default_task")]
    pub task: Task,
    #[serde(default)]
    pub model: ModelSection,
    pub evaluation: EvalConfig,
    #[serde(default)]
    pub lvlm: LvlmSection,
}

fn default_task() -> Task {
    Task::Mortality
}

impl RunConfig {
    /// A complete configuration with every key at its default value.
    pub fn template() -> Self {
        Self {
            paths: PathsConfig::default(),
            synth: Some(SynthConfig::default()),
            cohort: CohortSection::default(),
            grouping: GroupingConfig::default(),
            featurizer: FeaturizerConfig::default(),
            encoders: EncodersSection::default(),
            task: Task::Mortality,
            model: ModelSection::default(),
            evaluation: EvalConfig::default(),
            lvlm: LvlmSection::default(),
        }
    }

    pub fn from_value(value: Value) -> Result<Self, ConfigError> {
        let seed = value.get("evaluation").and_then(|e| e.get("seed"));
        if seed.is_none_or(Value::is_null) {
            return Err(ConfigError::new("evaluation.seed", "a seed is required"));
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(value.clone()).map_err(|e| {
            let path = e.path().to_string();
            refine_flattened(&path, &value).unwrap_or_else(|| ConfigError::new(&path, e.into_inner().to_string()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, applies `key=value` overrides, then validates.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("<file>", format!("{}: {e}", path.display())))?;
        let mut value: Value = serde_json::from_str(&text)
            .map_err(|e| ConfigError::new("<file>", format!("{}: {e}", path.display())))?;
        for (k, v) in overrides {
            apply_override(&mut value, k, v)?;
        }
        let mut cfg = Self::from_value(value)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Relative paths are taken relative to the config file's directory.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.input_dir);
        fix(&mut self.paths.work_dir);
        if let Some(r) = &mut self.paths.ranges_csv {
            fix(r);
        }
        if let Some(m) = &mut self.lvlm.mock_script {
            fix(m);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.cohort
            .criteria
            .validate()
            .map_err(|e| ConfigError::new("cohort", e.to_string()))?;
        if !(self.cohort.los_threshold_days > 0.0) {
            return Err(ConfigError::new("cohort.los_threshold_days", "must be > 0"));
        }
        if let Some(s) = &self.synth {
            s.validate().map_err(|e| ConfigError::new("synth", e.to_string()))?;
        }
        if self.featurizer.variables.is_empty() {
            return Err(ConfigError::new("featurizer.variables", "at least one variable is required"));
        }
        if !(self.featurizer.bin_hours > 0.0 && self.featurizer.horizon_hours >= self.featurizer.bin_hours) {
            return Err(ConfigError::new("featurizer.bin_hours", "need 0 < bin_hours <= horizon_hours"));
        }
        let mut names = std::collections::BTreeSet::new();
        for (i, e) in self.encoders.selected.iter().enumerate() {
            e.validate()
                .map_err(|err| ConfigError::new(&format!("encoders.selected[{i}]"), err.to_string()))?;
            if !names.insert(&e.name) || e.name.contains(['/', '\\']) || e.name.is_empty() {
                return Err(ConfigError::new(
                    &format!("encoders.selected[{i}].name"),
                    "names must be unique, non-empty and free of path separators",
                ));
            }
        }
        if let Some(l) = self.model.hyper.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(ConfigError::new("model.lambda", "must be a finite non-negative number"));
            }
        }
        if self.model.hyper.max_iter == 0 {
            return Err(ConfigError::new("model.max_iter", "must be positive"));
        }
        let ev = &self.evaluation;
        if ev.n_boot == 0 {
            return Err(ConfigError::new("evaluation.n_boot", "must be positive"));
        }
        if !(ev.level > 0.0 && ev.level < 1.0) {
            return Err(ConfigError::new("evaluation.level", "must be in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&ev.threshold) {
            return Err(ConfigError::new("evaluation.threshold", "must be in [0, 1]"));
        }
        for (i, a) in ev.fairness_attributes.iter().enumerate() {
            if !["gender", "race", "age_band"].contains(&a.as_str()) {
                return Err(ConfigError::new(
                    &format!("evaluation.fairness_attributes[{i}]"),
                    format!("unknown attribute {a:?}"),
                ));
            }
        }
        if self.lvlm.enabled && self.lvlm.endpoint.max_attempts == 0 {
            return Err(ConfigError::new("lvlm.max_attempts", "must be positive"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn path_error<T: serde::de::DeserializeOwned>(section: &str, v: Value) -> Option<ConfigError> {
    serde_path_to_error::deserialize::<_, T>(v).err().map(|e| {
        ConfigError::new(&format!("{section}.{}", e.path()), e.inner().to_string())
    })
}

/// Flattened sections lose the inner key in deserializer paths; re-run the
/// inner type alone to recover it.
fn refine_flattened(path: &str, root: &Value) -> Option<ConfigError> {
    let mut obj = root.get(path)?.as_object()?.clone();
    let strip = |obj: &mut serde_json::Map<String, Value>, keys: &[&str]| {
        for k in keys {
            obj.remove(*k);
        }
    };
    match path {
        "model" => {
            strip(&mut obj, &["split_by"]);
            path_error::<LogRegHyper>(path, Value::Object(obj))
        }
        "cohort" => {
            strip(&mut obj, &["los_threshold_days"]);
            path_error::<CohortCriteria>(path, Value::Object(obj))
        }
        "lvlm" => {
            strip(&mut obj, &["enabled", "policy", "mock_script"]);
            path_error::<EndpointConfig>(path, Value::Object(obj))
        }
        _ => None,
    }
}

/// Sets a dotted key inside `root`. The value is parsed as JSON when
/// possible and kept as a string otherwise.
pub fn apply_override(root: &mut Value, key: &str, raw: &str) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::new(key, "malformed override key"));
    }
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            if node.is_null() {
                *node = Value::Object(Default::default());
            } else {
                return Err(ConfigError::new(&parts[..i].join("."), "is not an object"));
            }
        }
        let map = node.as_object_mut().expect("checked above");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

/// Splits `--section.key=value` arguments out of `args`.
pub fn extract_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        if let Some(body) = a.strip_prefix("--") {
            if let Some((k, v)) = body.split_once('=') {
                if k.contains('.') {
                    overrides.push((k.to_string(), v.to_string()));
                    continue;
                }
            }
        }
        rest.push(a);
    }
    (rest, overrides)
}

/// Every leaf key of the template config with its default value.
pub fn documented_keys() -> Vec<(String, String)> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
        match v {
            Value::Object(m) if !m.is_empty() => {
                for (k, child) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            other => out.push((prefix.to_string(), other.to_string())),
        }
    }
    let mut out = Vec::new();
    let value = serde_json::to_value(RunConfig::template()).expect("template serializes");
    walk("", &value, &mut out);
    out.push(("paths.ranges_csv".into(), "null".into()));
    out.push(("lvlm.mock_script".into(), "null".into()));
    out.push((
        "encoders.selected".into(),
        r#"[{"name":..,"modality":"text|image|timeseries","dimension":..,"kind":"native","encoder":"reference|hashed_tokens"} or {"kind":"external","command":[..]}]"#.into(),
    ));
    out.sort();
    out.dedup_by(|a, b| a.0 == b.0);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn minimal() -> Value {
        json!({"evaluation": {"seed": 7}})
    }

    #[test]
    fn missing_seed_names_the_field() {
        let err = RunConfig::from_value(json!({"evaluation": {"n_boot": 10}})).unwrap_err();
        assert_eq!(err.field, "evaluation.seed");
        let err = RunConfig::from_value(json!({})).unwrap_err();
        assert_eq!(err.field, "evaluation.seed");
    }

    #[test]
    fn defaults_fill_in() {
        let cfg = RunConfig::from_value(minimal()).unwrap();
        assert_eq!(cfg.evaluation.seed, 7);
        assert_eq!(cfg.evaluation.n_boot, 1000);
        assert_eq!(cfg.cohort.los_threshold_days, 3.0);
        assert_eq!(cfg.featurizer.timeseries_dimension(), 312);
    }

    #[test]
    fn bad_type_reports_path() {
        let mut v = minimal();
        apply_override(&mut v, "model.max_iter", "\"lots\"").unwrap();
        let err = RunConfig::from_value(v).unwrap_err();
        assert_eq!(err.field, "model.max_iter");
    }

    #[test]
    fn overrides_are_typed() {
        let mut v = minimal();
        apply_override(&mut v, "model.lambda", "0.25").unwrap();
        apply_override(&mut v, "task", "los").unwrap();
        apply_override(&mut v, "cohort.required_modalities", "[\"notes\"]").unwrap();
        let cfg = RunConfig::from_value(v).unwrap();
        assert_eq!(cfg.model.hyper.lambda, Some(0.25));
        assert_eq!(cfg.task, Task::Los);
        assert_eq!(cfg.cohort.criteria.required_modalities.len(), 1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = minimal();
        apply_override(&mut v, "model.lamda", "1").unwrap();
        assert!(RunConfig::from_value(v).is_err());
    }

    #[test]
    fn override_extraction() {
        let args = vec!["ehrbench".into(), "run-all".into(), "--model.lambda=0.1".into(), "--config=x".into()];
        let (rest, o) = extract_overrides(args);
        assert_eq!(rest, vec!["ehrbench", "run-all", "--config=x"]);
        assert_eq!(o, vec![("model.lambda".to_string(), "0.1".to_string())]);
    }

    #[test]
    fn template_round_trips() {
        let t = RunConfig::template();
        let back = RunConfig::from_value(serde_json::to_value(&t).unwrap()).unwrap();
        assert_eq!(back, t);
        assert!(documented_keys().iter().any(|(k, _)| k == "evaluation.seed"));
    }
}
