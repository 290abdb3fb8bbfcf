//! Embedding interchange: manifests, the encoder registry, native encoders,
//! and the subprocess adapter protocol for external encoders.
//!
//! External adapters are invoked as
//! `<command...> --input <master_dir> --output <manifest_dir> --window-hours <H>`
//! and must exit 0 after writing a manifest directory. Stays an encoder
//! cannot embed are left out of the manifest; the fusion step decides what
//! to do with them.

mod manifest;
mod native;

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::LabeledStay;

pub use manifest::{
    read_header, read_manifest, write_manifest, EmbeddingManifest, EmbeddingModality,
    ManifestHeader, DTYPE_F32LE,
};
pub use native::{
    aggregate_image_embeddings, concat_notes, hashed_token_encode, note_header, reference_encode,
    tokenize, NoteText,
};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest header: {0}")]
    Header(String),
    #[error("dimension mismatch ({context}): expected {expected}, found {found}")]
    DimensionMismatch {
        expected: usize,
        found: usize,
        context: String,
    },
    #[error("non-finite value for stay {stay_id} at index {index}")]
    NonFiniteValue { stay_id: i64, index: usize },
    #[error("checksum mismatch: header {expected}, data {found}")]
    ChecksumMismatch { expected: String, found: String },
    #[error("manifest declares {header} rows but ids.csv has {found}")]
    CountMismatch { header: usize, found: usize },
    #[error("duplicate stay_id {0} in manifest")]
    DuplicateId(i64),
    #[error("no vectors to aggregate")]
    EmptyInput,
    #[error("encoder {encoder:?} does not support modality {modality}")]
    Unsupported { encoder: String, modality: String },
    #[error("adapter failure: {0}")]
    AdapterFailure(String),
    #[error("{} of {} stays missing from manifest ({:.1}%)", missing.len(), expected, 100.0 * missing.len() as f64 / *expected as f64)]
    CoverageGap { missing: Vec<i64>, expected: usize },
}

impl EncoderError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        EncoderError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NativeEncoder {
    /// Identity-keyed Gaussian vectors.
    Reference,
    /// Bag-of-tokens feature hashing over note text or image file contents.
    HashedTokens,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EncoderBackend {
    Native { encoder: NativeEncoder },
    External { command: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub name: String,
    pub modality: EmbeddingModality,
    pub dimension: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(flatten)]
    pub backend: EncoderBackend,
}

impl EncoderSpec {
    pub fn native(name: &str, modality: EmbeddingModality, dimension: usize, encoder: NativeEncoder) -> Self {
        Self {
            name: name.to_string(),
            modality,
            dimension,
            seed: 0,
            backend: EncoderBackend::Native { encoder },
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.dimension == 0 {
            return Err(EncoderError::Header(format!(
                "encoder {:?}: dimension must be positive",
                self.name
            )));
        }
        if let EncoderBackend::External { command } = &self.backend {
            if command.is_empty() {
                return Err(EncoderError::AdapterFailure(format!(
                    "encoder {:?}: empty command",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// Encodes one (windowed) stay with a native encoder. `Ok(None)` means the
/// stay has nothing to encode for this modality.
pub fn encode_stay(
    spec: &EncoderSpec,
    encoder: NativeEncoder,
    stay: &LabeledStay,
    input_dir: &Path,
) -> Result<Option<Vec<f32>>, EncoderError> {
    let s = &stay.stay;
    let id = s.key.stay_id;
    let dim = spec.dimension;
    match (spec.modality, encoder) {
        (EmbeddingModality::Timeseries, NativeEncoder::Reference) => Ok((!s.vitals.is_empty())
            .then(|| reference_encode(id, spec.modality, dim, spec.seed))),
        (EmbeddingModality::Text, NativeEncoder::Reference) => Ok((!s.notes.is_empty())
            .then(|| reference_encode(id, spec.modality, dim, spec.seed))),
        (EmbeddingModality::Image, NativeEncoder::Reference) => Ok((!s.images.is_empty())
            .then(|| reference_encode(id, spec.modality, dim, spec.seed))),
        (EmbeddingModality::Text, NativeEncoder::HashedTokens) => {
            let notes = concat_notes(&s.notes);
            if notes.missing {
                return Ok(None);
            }
            Ok(hashed_token_encode(&notes.text, dim, spec.seed))
        }
        (EmbeddingModality::Image, NativeEncoder::HashedTokens) => {
            let mut per_image = Vec::new();
            for im in &s.images {
                let path = input_dir.join(&im.path);
                match std::fs::read(&path) {
                    Ok(bytes) => {
                        if let Some(v) = hashed_token_encode(&String::from_utf8_lossy(&bytes), dim, spec.seed) {
                            per_image.push(v);
                        }
                    }
                    Err(e) => log::warn!("stay {id}: cannot read image {}: {e}", path.display()),
                }
            }
            if per_image.is_empty() {
                return Ok(None);
            }
            aggregate_image_embeddings(&per_image).map(Some)
        }
        (m, NativeEncoder::HashedTokens) => Err(EncoderError::Unsupported {
            encoder: spec.name.clone(),
            modality: m.name().to_string(),
        }),
    }
}

/// Runs a native encoder over the cohort, producing a validated manifest.
pub fn encode_native(
    spec: &EncoderSpec,
    stays: &[LabeledStay],
    input_dir: &Path,
) -> Result<EmbeddingManifest, EncoderError> {
    spec.validate()?;
    let EncoderBackend::Native { encoder } = spec.backend else {
        return Err(EncoderError::AdapterFailure(format!(
            "encoder {:?} is not native",
            spec.name
        )));
    };
    let mut rows = Vec::new();
    for stay in stays {
        if let Some(v) = encode_stay(spec, encoder, stay, input_dir)? {
            rows.push((stay.stay_id(), v));
        }
    }
    EmbeddingManifest::from_rows(spec.modality, &spec.name, spec.dimension, rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoveragePolicy {
    /// Any expected stay missing from the manifest is an error.
    Strict,
    /// Missing stays are reported and handled by the missing-modality policy.
    AllowGaps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub expected: usize,
    pub covered: usize,
    pub missing: Vec<i64>,
}

impl Coverage {
    pub fn of(manifest: &EmbeddingManifest, expected_ids: &[i64]) -> Self {
        let have: HashSet<i64> = manifest.ids.iter().copied().collect();
        let missing: Vec<i64> = expected_ids
            .iter()
            .copied()
            .filter(|id| !have.contains(id))
            .collect();
        Coverage {
            expected: expected_ids.len(),
            covered: expected_ids.len() - missing.len(),
            missing,
        }
    }

    pub fn missing_fraction(&self) -> f64 {
        if self.expected == 0 {
            0.0
        } else {
            self.missing.len() as f64 / self.expected as f64
        }
    }
}

/// Invokes an external adapter and validates what it wrote.
pub fn run_external_encoder(
    spec: &EncoderSpec,
    master_dir: &Path,
    out_dir: &Path,
    window_hours: f64,
    expected_ids: &[i64],
    policy: CoveragePolicy,
) -> Result<(EmbeddingManifest, Coverage), EncoderError> {
    spec.validate()?;
    let EncoderBackend::External { command } = &spec.backend else {
        return Err(EncoderError::AdapterFailure(format!(
            "encoder {:?} is not external",
            spec.name
        )));
    };
    std::fs::create_dir_all(out_dir).map_err(|e| EncoderError::io(out_dir, e))?;
    let output = Command::new(&command[0])
        .args(&command[1..])
        .arg("--input")
        .arg(master_dir)
        .arg("--output")
        .arg(out_dir)
        .arg("--window-hours")
        .arg(window_hours.to_string())
        .output()
        .map_err(|e| EncoderError::AdapterFailure(format!("cannot start {:?}: {e}", command[0])))?;
    if !output.status.success() {
        return Err(EncoderError::AdapterFailure(format!(
            "{:?} exited with {}: {}",
            spec.name,
            output.status,
            String::from_utf8_lossy(&output.stderr).trim()
        )));
    }
    let manifest = read_manifest(out_dir)
        .map_err(|e| EncoderError::AdapterFailure(format!("{:?} wrote an invalid manifest: {e}", spec.name)))?;
    if manifest.dimension != spec.dimension {
        return Err(EncoderError::AdapterFailure(format!(
            "{:?} declared dimension {} but the manifest has {}",
            spec.name, spec.dimension, manifest.dimension
        )));
    }
    if manifest.modality != spec.modality {
        return Err(EncoderError::AdapterFailure(format!(
            "{:?} declared modality {} but the manifest has {}",
            spec.name,
            spec.modality.name(),
            manifest.modality.name()
        )));
    }
    let coverage = Coverage::of(&manifest, expected_ids);
    if policy == CoveragePolicy::Strict && !coverage.missing.is_empty() {
        return Err(EncoderError::CoverageGap {
            missing: coverage.missing,
            expected: coverage.expected,
        });
    }
    if !coverage.missing.is_empty() {
        log::warn!(
            "encoder {:?}: {} of {} stays not covered",
            spec.name,
            coverage.missing.len(),
            coverage.expected
        );
    }
    Ok((manifest, coverage))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_json_shape() {
        let json = r#"{"name":"notes","modality":"text","dimension":768,"kind":"native","encoder":"hashed_tokens"}"#;
        let spec: EncoderSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.backend, EncoderBackend::Native { encoder: NativeEncoder::HashedTokens });
        let ext = r#"{"name":"radbert","modality":"text","dimension":768,"kind":"external","command":["python3","radbert.py"]}"#;
        let spec: EncoderSpec = serde_json::from_str(ext).unwrap();
        assert!(matches!(spec.backend, EncoderBackend::External { .. }));
    }

    #[test]
    fn coverage_counts_missing() {
        let m = EmbeddingManifest::new(EmbeddingModality::Text, "x", 1, (0..9).collect(), vec![0.0; 9]).unwrap();
        let expected: Vec<i64> = (0..10).collect();
        let c = Coverage::of(&m, &expected);
        assert_eq!(c.missing, vec![9]);
        assert!((c.missing_fraction() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn failing_adapter_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let spec = EncoderSpec {
            name: "broken".into(),
            modality: EmbeddingModality::Text,
            dimension: 4,
            seed: 0,
            backend: EncoderBackend::External {
                command: vec!["sh".into(), "-c".into(), "exit 3".into(), "adapter".into()],
            },
        };
        let err = run_external_encoder(&spec, dir.path(), &dir.path().join("out"), 24.0, &[1], CoveragePolicy::Strict)
            .unwrap_err();
        assert!(matches!(err, EncoderError::AdapterFailure(_)), "{err}");
    }
}
