//! Synthetic source tables with a known outcome model.
//!
//! Each stay draws two independent latents: `r` shifts the vitals and `t`
//! drives signal tokens in the notes (and, weakly, in the placeholder image
//! files). Mortality is Bernoulli with logit `b0 + a_v * r + a_t * t`.

use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurize::DEFAULT_VARIABLES;
use crate::fusion::sigmoid;
use crate::ingest::{format_timestamp, SchemaSet};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutcomeModel {
    pub intercept: f64,
    pub vital_coef: f64,
    pub text_coef: f64,
    /// Log-LOS shift per unit of `r`.
    pub los_coef: f64,
}

impl Default for OutcomeModel {
    fn default() -> Self {
        Self {
            intercept: -2.0,
            vital_coef: 4.0,
            text_coef: 4.0,
            los_coef: 0.35,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_patients: usize,
    /// Weights for 1, 2, 3, ... stays per patient.
    pub stays_per_patient: Vec<f64>,
    pub minor_fraction: f64,
    /// Probability of a measurement per variable per hour.
    pub vitals_rate: f64,
    /// Probability that a variable is never measured during a stay.
    pub vitals_missing: f64,
    pub outlier_rate: f64,
    /// Probability that a stay has no notes.
    pub note_missing: f64,
    pub max_notes: usize,
    /// Probability that a stay has no images.
    pub image_missing: f64,
    pub max_images: usize,
    /// Vital shift per unit of `r`, in units of the variable's noise sd.
    pub vital_signal: f64,
    /// Logit slope of signal-token inclusion in notes.
    pub note_signal: f64,
    pub image_signal: f64,
    /// Fraction of vitals rows written without a stay_id.
    pub unlinked_vitals_fraction: f64,
    pub outcome: OutcomeModel,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 400,
            stays_per_patient: vec![0.75, 0.2, 0.05],
            minor_fraction: 0.03,
            vitals_rate: 0.8,
            vitals_missing: 0.1,
            outlier_rate: 0.005,
            note_missing: 0.15,
            max_notes: 3,
            image_missing: 0.3,
            max_images: 3,
            vital_signal: 1.2,
            note_signal: 2.0,
            image_signal: 0.7,
            unlinked_vitals_fraction: 0.1,
            outcome: OutcomeModel::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let unit = [
            ("minor_fraction", self.minor_fraction),
            ("vitals_rate", self.vitals_rate),
            ("vitals_missing", self.vitals_missing),
            ("outlier_rate", self.outlier_rate),
            ("note_missing", self.note_missing),
            ("image_missing", self.image_missing),
            ("unlinked_vitals_fraction", self.unlinked_vitals_fraction),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(SynthError::InvalidConfig(format!("synth.{name} must be in [0, 1]")));
            }
        }
        if self.n_patients == 0 {
            return Err(SynthError::InvalidConfig("synth.n_patients must be positive".into()));
        }
        if self.stays_per_patient.is_empty()
            || self.stays_per_patient.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || self.stays_per_patient.iter().sum::<f64>() <= 0.0
        {
            return Err(SynthError::InvalidConfig(
                "synth.stays_per_patient must be non-negative weights with a positive sum".into(),
            ));
        }
        if self.max_notes == 0 || self.max_images == 0 {
            return Err(SynthError::InvalidConfig("synth.max_notes and synth.max_images must be positive".into()));
        }
        Ok(())
    }
}

/// (variable, mean, noise sd, direction of the risk shift, min, max)
const VITAL_PROFILES: [(&str, f64, f64, f64, f64, f64); 13] = [
    ("heart_rate", 85.0, 12.0, 1.0, 30.0, 220.0),
    ("sbp", 120.0, 15.0, -1.0, 50.0, 250.0),
    ("dbp", 65.0, 10.0, -1.0, 20.0, 150.0),
    ("mbp", 82.0, 11.0, -1.0, 30.0, 200.0),
    ("resp_rate", 18.0, 4.0, 1.0, 4.0, 60.0),
    ("spo2", 96.5, 2.0, -1.0, 60.0, 100.0),
    ("temperature", 37.0, 0.6, 1.0, 32.0, 42.0),
    ("glucose", 130.0, 30.0, 1.0, 40.0, 600.0),
    ("gcs_eye", 3.5, 0.6, -1.0, 1.0, 4.0),
    ("gcs_verbal", 4.2, 0.8, -1.0, 1.0, 5.0),
    ("gcs_motor", 5.5, 0.7, -1.0, 1.0, 6.0),
    ("fio2", 40.0, 10.0, 1.0, 21.0, 100.0),
    ("urine_output_rate", 80.0, 30.0, -1.0, 0.0, 800.0),
];

const RACES: [(&str, f64); 7] = [
    ("WHITE", 0.6),
    ("BLACK/AFRICAN AMERICAN", 0.14),
    ("HISPANIC/LATINO - PUERTO RICAN", 0.07),
    ("ASIAN - CHINESE", 0.05),
    ("OTHER", 0.05),
    ("UNKNOWN", 0.06),
    ("SOUTH AMERICAN", 0.03),
];

const ADVERSE_TOKENS: [&str; 6] = ["consolidation", "effusion", "edema", "worsening", "opacification", "intubated"];
const BENIGN_TOKENS: [&str; 5] = ["clear", "stable", "unremarkable", "improved", "resolved"];
const FILLER: [&str; 16] = [
    "portable", "chest", "radiograph", "frontal", "view", "lungs", "heart", "size", "mediastinum", "pleural",
    "tube", "line", "tip", "projects", "over", "silhouette",
];

/// Per-stay generative truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StayTruth {
    pub stay_id: i64,
    pub subject_id: i64,
    pub vital_latent: f64,
    pub text_latent: f64,
    pub mortality_probability: f64,
    pub died: bool,
    pub los_hours: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub config: SynthConfig,
    pub variables: Vec<String>,
    pub adverse_tokens: Vec<String>,
    pub benign_tokens: Vec<String>,
    pub n_stays: usize,
    pub n_deaths: usize,
    pub stays: Vec<StayTruth>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn note_text(rng: &mut ChaCha8Rng, latent: f64, slope: f64) -> String {
    let mut words: Vec<&str> = Vec::new();
    for _ in 0..rng.random_range(6..14) {
        words.push(FILLER[rng.random_range(0..FILLER.len())]);
    }
    for tok in ADVERSE_TOKENS {
        if rng.random::<f64>() < sigmoid(slope * latent - 1.0) {
            words.push(tok);
        }
    }
    for tok in BENIGN_TOKENS {
        if rng.random::<f64>() < sigmoid(-slope * latent - 1.0) {
            words.push(tok);
        }
    }
    for i in (1..words.len()).rev() {
        let j = rng.random_range(0..=i);
        words.swap(i, j);
    }
    let mut text = String::from("FINDINGS: ");
    text.push_str(&words.join(" "));
    text.push_str(".\nIMPRESSION: see above.");
    text
}

struct Writers {
    dir: PathBuf,
    patients: csv::Writer<Vec<u8>>,
    admissions: csv::Writer<Vec<u8>>,
    icustays: csv::Writer<Vec<u8>>,
    vitals: csv::Writer<Vec<u8>>,
    notes: csv::Writer<Vec<u8>>,
    images: csv::Writer<Vec<u8>>,
}

fn writer(header: &[&str]) -> csv::Writer<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    w
}

impl Writers {
    fn io(&self, path: &Path, e: impl std::fmt::Display) -> SynthError {
        SynthError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }

    fn finish(self) -> Result<(), SynthError> {
        let dir = self.dir.clone();
        for (name, w) in [
            ("patients", self.patients),
            ("admissions", self.admissions),
            ("icustays", self.icustays),
            ("vitals", self.vitals),
            ("notes", self.notes),
            ("images", self.images),
        ] {
            let path = dir.join(format!("{name}.csv"));
            let bytes = w.into_inner().map_err(|e| SynthError::Io {
                path: path.clone(),
                message: e.to_string(),
            })?;
            std::fs::write(&path, bytes).map_err(|e| SynthError::Io {
                path: path.clone(),
                message: e.to_string(),
            })?;
        }
        Ok(())
    }
}

const HOUR: i64 = 3600;
/// 2150-01-01 00:00:00 UTC.
const BASE_TIME: i64 = 5_680_281_600;
const ANCHOR_YEAR: i64 = 2150;

/// Writes the six source tables, `schemas.json`, placeholder image files
/// and `synth_truth.json` into `out_dir`.
pub fn generate(config: &SynthConfig, out_dir: &Path) -> Result<SynthTruth, SynthError> {
    config.validate()?;
    std::fs::create_dir_all(out_dir.join("images")).map_err(|e| SynthError::Io {
        path: out_dir.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let stays_dist = WeightedIndex::new(&config.stays_per_patient)
        .map_err(|e| SynthError::InvalidConfig(format!("synth.stays_per_patient: {e}")))?;
    let race_dist = WeightedIndex::new(RACES.iter().map(|r| r.1)).expect("static weights");

    let mut w = Writers {
        dir: out_dir.to_path_buf(),
        patients: writer(&["subject_id", "gender", "anchor_age", "anchor_year"]),
        admissions: writer(&[
            "hadm_id",
            "subject_id",
            "admittime",
            "dischtime",
            "deathtime",
            "race",
            "hospital_expire_flag",
        ]),
        icustays: writer(&["stay_id", "hadm_id", "subject_id", "intime", "outtime"]),
        vitals: writer(&["stay_id", "hadm_id", "charttime", "variable", "value"]),
        notes: writer(&["note_id", "hadm_id", "charttime", "text"]),
        images: writer(&["dicom_id", "hadm_id", "studytime", "path"]),
    };
    let mut truths = Vec::new();
    let mut next_hadm = 20_000_000i64;
    let mut next_stay = 30_000_000i64;

    for p in 0..config.n_patients {
        let subject_id = 10_000_000 + p as i64;
        let gender = if rng.random::<bool>() { "F" } else { "M" };
        let minor = rng.random::<f64>() < config.minor_fraction;
        let anchor_age = if minor {
            rng.random_range(12..17)
        } else {
            rng.random_range(20..90)
        };
        let race = RACES[race_dist.sample(&mut rng)].0;
        let n_stays = stays_dist.sample(&mut rng) + 1;
        let rows = [
            subject_id.to_string(),
            gender.to_string(),
            anchor_age.to_string(),
            ANCHOR_YEAR.to_string(),
        ];
        w.patients.write_record(&rows).map_err(|e| w.io(Path::new("patients.csv"), e))?;

        // stays are sequential admissions within the anchor year
        let mut cursor = BASE_TIME + rng.random_range(0..60 * 24) * HOUR;
        for _ in 0..n_stays {
            let hadm_id = next_hadm;
            let stay_id = next_stay;
            next_hadm += 1;
            next_stay += 1;

            let r = normal(&mut rng);
            let t = normal(&mut rng);
            let m = &config.outcome;
            let prob = sigmoid(m.intercept + m.vital_coef * r + m.text_coef * t);
            let died = rng.random::<f64>() < prob;
            let los_hours = (4.0f64.ln() + m.los_coef * r + 0.6 * normal(&mut rng)).exp() * 18.0;
            let los_hours = los_hours.clamp(6.0, 40.0 * 24.0);

            let admittime = cursor;
            let intime = admittime + rng.random_range(0..12) * HOUR + rng.random_range(0..3600);
            let outtime = intime + (los_hours * HOUR as f64) as i64;
            let dischtime = outtime + rng.random_range(1..5 * 24) * HOUR;
            let deathtime = died.then_some(dischtime);
            cursor = dischtime + rng.random_range(10..60) * 24 * HOUR;

            w.admissions
                .write_record([
                    hadm_id.to_string(),
                    subject_id.to_string(),
                    format_timestamp(admittime),
                    format_timestamp(dischtime),
                    deathtime.map(format_timestamp).unwrap_or_default(),
                    race.to_string(),
                    u8::from(died).to_string(),
                ])
                .map_err(|e| w.io(Path::new("admissions.csv"), e))?;
            w.icustays
                .write_record([
                    stay_id.to_string(),
                    hadm_id.to_string(),
                    subject_id.to_string(),
                    format_timestamp(intime),
                    format_timestamp(outtime),
                ])
                .map_err(|e| w.io(Path::new("icustays.csv"), e))?;

            let observed_hours = los_hours.min(30.0);
            for &(var, mean, sd, dir, lo, hi) in &VITAL_PROFILES {
                if rng.random::<f64>() < config.vitals_missing {
                    continue;
                }
                let stay_level = mean + dir * config.vital_signal * r * sd + 0.3 * sd * normal(&mut rng);
                let mut h = 0.0;
                while h < observed_hours {
                    if rng.random::<f64>() < config.vitals_rate {
                        let offset = (h + rng.random::<f64>()).min(observed_hours - 1.0 / 3600.0);
                        let mut value = (stay_level + sd * normal(&mut rng)).clamp(lo, hi);
                        if rng.random::<f64>() < config.outlier_rate {
                            value = if rng.random::<bool>() { hi * 10.0 } else { -lo.abs() - 999.0 };
                        }
                        let linked = rng.random::<f64>() >= config.unlinked_vitals_fraction;
                        w.vitals
                            .write_record([
                                if linked { stay_id.to_string() } else { String::new() },
                                hadm_id.to_string(),
                                format_timestamp(intime + (offset * HOUR as f64) as i64),
                                var.to_string(),
                                format!("{:.1}", value),
                            ])
                            .map_err(|e| w.io(Path::new("vitals.csv"), e))?;
                    }
                    h += 1.0;
                }
            }

            let window = los_hours.min(24.0);
            if rng.random::<f64>() >= config.note_missing {
                for k in 0..rng.random_range(1..=config.max_notes) {
                    let offset = rng.random::<f64>() * window;
                    let text = note_text(&mut rng, t, config.note_signal);
                    w.notes
                        .write_record([
                            format!("{hadm_id}-RR-{k}"),
                            hadm_id.to_string(),
                            format_timestamp(intime + (offset * HOUR as f64) as i64),
                            text,
                        ])
                        .map_err(|e| w.io(Path::new("notes.csv"), e))?;
                }
            }
            if rng.random::<f64>() >= config.image_missing {
                for k in 0..rng.random_range(1..=config.max_images) {
                    let offset = rng.random::<f64>() * window;
                    let dicom = format!("{stay_id}-{k}");
                    let rel = format!("images/{dicom}.img");
                    let content = format!(
                        "placeholder radiograph {dicom}\n{}\n",
                        note_text(&mut rng, t, config.image_signal)
                    );
                    let path = out_dir.join(&rel);
                    std::fs::write(&path, content).map_err(|e| w.io(&path, e))?;
                    w.images
                        .write_record([
                            dicom,
                            hadm_id.to_string(),
                            format_timestamp(intime + (offset * HOUR as f64) as i64),
                            rel,
                        ])
                        .map_err(|e| w.io(Path::new("images.csv"), e))?;
                }
            }
            truths.push(StayTruth {
                stay_id,
                subject_id,
                vital_latent: r,
                text_latent: t,
                mortality_probability: prob,
                died,
                los_hours,
            });
        }
    }
    w.finish()?;

    let schema_path = out_dir.join("schemas.json");
    let schemas = serde_json::to_string_pretty(&SchemaSet::mimic_default()).expect("schemas serialize");
    std::fs::write(&schema_path, schemas + "\n").map_err(|e| SynthError::Io {
        path: schema_path.clone(),
        message: e.to_string(),
    })?;

    let truth = SynthTruth {
        config: config.clone(),
        variables: DEFAULT_VARIABLES.iter().map(|s| s.to_string()).collect(),
        adverse_tokens: ADVERSE_TOKENS.iter().map(|s| s.to_string()).collect(),
        benign_tokens: BENIGN_TOKENS.iter().map(|s| s.to_string()).collect(),
        n_stays: truths.len(),
        n_deaths: truths.iter().filter(|s| s.died).count(),
        stays: truths,
    };
    let truth_path = out_dir.join("synth_truth.json");
    let text = serde_json::to_string_pretty(&truth).expect("truth serializes");
    std::fs::write(&truth_path, text + "\n").map_err(|e| SynthError::Io {
        path: truth_path,
        message: e.to_string(),
    })?;
    Ok(truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::ingest_dir;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            n_patients: 40,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn profiles_cover_default_variables() {
        let names: Vec<&str> = VITAL_PROFILES.iter().map(|p| p.0).collect();
        assert_eq!(names, DEFAULT_VARIABLES.to_vec());
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate(&small(3), a.path()).unwrap();
        generate(&small(3), b.path()).unwrap();
        for f in ["patients.csv", "admissions.csv", "icustays.csv", "vitals.csv", "notes.csv", "images.csv", "synth_truth.json"] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn output_ingests_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let truth = generate(&small(11), dir.path()).unwrap();
        let schemas = SchemaSet::load(&dir.path().join("schemas.json")).unwrap();
        let (master, report) = ingest_dir(dir.path(), &schemas).unwrap();
        assert!(report.rejects.is_empty(), "{:?}", report.rejects);
        assert_eq!(master.stays.len(), truth.n_stays);
        for counts in report.events.values() {
            assert_eq!(counts.orphaned + counts.ambiguous, 0, "{:?}", report.events);
        }
    }

    #[test]
    fn invalid_rates_are_rejected() {
        let cfg = SynthConfig {
            image_missing: 1.5,
            ..SynthConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(SynthError::InvalidConfig(_))));
    }
}
