//! Cohort selection, observation-window clipping, task labels, and subgroup assignment.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Demographics, MasterDataset, StayKey, StayRecord};

#[derive(Debug, Error, PartialEq)]
pub enum CohortError {
    #[error("no stays satisfy the cohort criteria")]
    EmptyCohort,
    #[error("invalid cohort criteria: {0}")]
    InvalidCriteria(String),
    #[error("stay {stay_id}: no death timestamp or discharge disposition to derive mortality")]
    MissingOutcomeField { stay_id: i64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Vitals,
    Images,
    Notes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortCriteria {
    pub min_age_years: f64,
    pub min_stay_hours: f64,
    pub required_modalities: BTreeSet<Modality>,
    pub window_hours: f64,
    /// Drop stays whose death falls inside the observation window.
    pub exclude_early_death: bool,
}

impl Default for CohortCriteria {
    fn default() -> Self {
        Self {
            min_age_years: 18.0,
            min_stay_hours: 0.0,
            required_modalities: BTreeSet::new(),
            window_hours: 24.0,
            exclude_early_death: false,
        }
    }
}

impl CohortCriteria {
    pub fn validate(&self) -> Result<(), CohortError> {
        if !(self.min_age_years >= 0.0) {
            return Err(CohortError::InvalidCriteria(
                "min_age_years must be >= 0".into(),
            ));
        }
        if !(self.window_hours > 0.0) {
            return Err(CohortError::InvalidCriteria("window_hours must be > 0".into()));
        }
        if !(self.min_stay_hours >= 0.0) {
            return Err(CohortError::InvalidCriteria(
                "min_stay_hours must be >= 0".into(),
            ));
        }
        Ok(())
    }

    fn has_modality(&self, stay: &StayRecord, modality: Modality) -> bool {
        let w = self.window_hours;
        let inside = |t: f64| (0.0..w).contains(&t);
        match modality {
            Modality::Vitals => stay.vitals.iter().any(|v| inside(v.offset_hours)),
            Modality::Images => stay.images.iter().any(|i| inside(i.offset_hours)),
            Modality::Notes => stay.notes.iter().any(|n| inside(n.offset_hours)),
        }
    }

    fn died_in_window(&self, stay: &StayRecord) -> bool {
        stay.admission
            .deathtime
            .is_some_and(|d| stay.key.offset_hours(d) < self.window_hours)
    }
}

/// Exclusion counts, in the order the criteria are applied.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionTally {
    pub total: usize,
    pub age: usize,
    pub min_stay: usize,
    pub modality: usize,
    pub early_death: usize,
    pub retained: usize,
}

#[derive(Debug, Clone)]
pub struct Cohort {
    pub stays: Vec<StayRecord>,
    pub tally: ExclusionTally,
}

/// Filters the master dataset: age, then minimum stay length, then modality
/// availability inside the observation window, then (optionally) early death.
pub fn apply_cohort(master: &MasterDataset, criteria: &CohortCriteria) -> Result<Cohort, CohortError> {
    criteria.validate()?;
    let mut tally = ExclusionTally {
        total: master.len(),
        ..Default::default()
    };
    let mut stays = Vec::new();
    for stay in &master.stays {
        if stay.demographics.age_years < criteria.min_age_years {
            tally.age += 1;
        } else if stay.key.duration_hours() < criteria.min_stay_hours {
            tally.min_stay += 1;
        } else if !criteria
            .required_modalities
            .iter()
            .all(|&m| criteria.has_modality(stay, m))
        {
            tally.modality += 1;
        } else if criteria.exclude_early_death && criteria.died_in_window(stay) {
            tally.early_death += 1;
        } else {
            stays.push(stay.clone());
        }
    }
    tally.retained = stays.len();
    if stays.is_empty() {
        return Err(CohortError::EmptyCohort);
    }
    Ok(Cohort { stays, tally })
}

/// Keeps only events with offsets in the half-open window `[0, window_hours)`.
pub fn clip_window(stay: &StayRecord, window_hours: f64) -> StayRecord {
    let inside = |t: f64| (0.0..window_hours).contains(&t);
    StayRecord {
        key: stay.key,
        demographics: stay.demographics.clone(),
        admission: stay.admission.clone(),
        vitals: stay
            .vitals
            .iter()
            .filter(|v| inside(v.offset_hours))
            .cloned()
            .collect(),
        notes: stay
            .notes
            .iter()
            .filter(|n| inside(n.offset_hours))
            .cloned()
            .collect(),
        images: stay
            .images
            .iter()
            .filter(|i| inside(i.offset_hours))
            .cloned()
            .collect(),
    }
}

/// 1 iff the patient died during the hospital admission of this stay.
pub fn label_mortality(stay: &StayRecord) -> Result<u8, CohortError> {
    let adm = &stay.admission;
    if let Some(death) = adm.deathtime {
        if adm.admittime <= death && death <= adm.dischtime {
            return Ok(1);
        }
    }
    match adm.hospital_expire_flag {
        Some(true) => Ok(1),
        Some(false) => Ok(0),
        None if adm.deathtime.is_some() => Ok(0),
        None => Err(CohortError::MissingOutcomeField {
            stay_id: stay.key.stay_id,
        }),
    }
}

/// 1 iff the ICU stay strictly exceeds `threshold_days`.
pub fn label_los(key: &StayKey, threshold_days: f64) -> u8 {
    (key.duration_hours() > threshold_days * 24.0) as u8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeBand {
    pub lower: f64,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaceRule {
    /// Matched as a prefix of the upper-cased source string.
    pub prefix: String,
    pub group: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupingConfig {
    /// Ascending lower bounds, inclusive.
    pub age_bands: Vec<AgeBand>,
    pub race_rules: Vec<RaceRule>,
    pub race_fallback: String,
    pub below_first_band: String,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        let band = |lower: f64, label: &str| AgeBand {
            lower,
            label: label.to_string(),
        };
        let rule = |prefix: &str, group: &str| RaceRule {
            prefix: prefix.to_string(),
            group: group.to_string(),
        };
        Self {
            age_bands: vec![
                band(18.0, "18–44"),
                band(45.0, "45–64"),
                band(65.0, "65–79"),
                band(80.0, "80+"),
            ],
            race_rules: vec![
                rule("WHITE", "White"),
                rule("BLACK", "Black"),
                rule("HISPANIC", "Hispanic"),
                rule("LATINO", "Hispanic"),
                rule("SOUTH AMERICAN", "Hispanic"),
                rule("ASIAN", "Asian"),
            ],
            race_fallback: "Other".into(),
            below_first_band: "<18".into(),
        }
    }
}

impl GroupingConfig {
    pub fn race_group(&self, race: &str) -> String {
        let upper = race.trim().to_uppercase();
        self.race_rules
            .iter()
            .find(|r| upper.starts_with(&r.prefix))
            .map(|r| r.group.clone())
            .unwrap_or_else(|| self.race_fallback.clone())
    }

    pub fn age_band(&self, age: f64) -> String {
        self.age_bands
            .iter()
            .rev()
            .find(|b| age >= b.lower)
            .map(|b| b.label.clone())
            .unwrap_or_else(|| self.below_first_band.clone())
    }

    /// Every label this config can emit for `attribute`, in a stable order.
    pub fn known_groups(&self, attribute: &str) -> Vec<String> {
        match attribute {
            "race" => {
                let mut seen = Vec::new();
                for r in &self.race_rules {
                    if !seen.contains(&r.group) {
                        seen.push(r.group.clone());
                    }
                }
                if !seen.contains(&self.race_fallback) {
                    seen.push(self.race_fallback.clone());
                }
                seen
            }
            "age_band" => self.age_bands.iter().map(|b| b.label.clone()).collect(),
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Groups {
    pub gender: String,
    pub race: String,
    pub age_band: String,
}

impl Groups {
    pub fn get(&self, attribute: &str) -> Option<&str> {
        match attribute {
            "gender" => Some(&self.gender),
            "race" => Some(&self.race),
            "age_band" | "age" => Some(&self.age_band),
            _ => None,
        }
    }
}

pub fn assign_groups(demo: &Demographics, config: &GroupingConfig) -> Groups {
    Groups {
        gender: demo.gender.clone(),
        race: config.race_group(&demo.race),
        age_band: config.age_band(demo.age_years),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Mortality,
    Los,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Mortality => "mortality",
            Task::Los => "los",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledStay {
    /// Events clipped to the observation window.
    pub stay: StayRecord,
    pub mortality: u8,
    pub los: u8,
    pub groups: Groups,
}

impl LabeledStay {
    pub fn label(&self, task: Task) -> u8 {
        match task {
            Task::Mortality => self.mortality,
            Task::Los => self.los,
        }
    }

    pub fn stay_id(&self) -> i64 {
        self.stay.key.stay_id
    }
}

pub fn label_cohort(
    stays: &[StayRecord],
    criteria: &CohortCriteria,
    grouping: &GroupingConfig,
    los_threshold_days: f64,
) -> Result<Vec<LabeledStay>, CohortError> {
    stays
        .iter()
        .map(|s| {
            Ok(LabeledStay {
                stay: clip_window(s, criteria.window_hours),
                mortality: label_mortality(s)?,
                los: label_los(&s.key, los_threshold_days),
                groups: assign_groups(&s.demographics, grouping),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{AdmissionInfo, ImageRef, NoteRecord, VitalObs};

    const H: i64 = 3600;

    fn stay(id: i64, age: f64, hours: i64) -> StayRecord {
        StayRecord::new(
            StayKey {
                stay_id: id,
                hadm_id: id,
                subject_id: id,
                intime: 0,
                outtime: hours * H,
            },
            Demographics {
                age_years: age,
                gender: "M".into(),
                race: "WHITE".into(),
            },
            AdmissionInfo {
                admittime: -H,
                dischtime: (hours + 10) * H,
                deathtime: None,
                hospital_expire_flag: Some(false),
            },
        )
    }

    fn vital(t: f64) -> VitalObs {
        VitalObs {
            offset_hours: t,
            variable: "hr".into(),
            value: 80.0,
        }
    }

    #[test]
    fn under_age_is_excluded() {
        let master = MasterDataset {
            stays: vec![stay(1, 17.9, 30), stay(2, 18.0, 30)],
        };
        let c = apply_cohort(&master, &CohortCriteria::default()).unwrap();
        assert_eq!(c.stays.len(), 1);
        assert_eq!(c.stays[0].key.stay_id, 2);
        assert_eq!(c.tally.age, 1);
    }

    #[test]
    fn image_requirement_excludes_imageless_stays() {
        let mut with = stay(1, 50.0, 30);
        with.images.push(ImageRef {
            offset_hours: 3.0,
            path: "x".into(),
        });
        let master = MasterDataset {
            stays: vec![with, stay(2, 50.0, 30)],
        };
        let criteria = CohortCriteria {
            required_modalities: [Modality::Images].into(),
            ..Default::default()
        };
        let c = apply_cohort(&master, &criteria).unwrap();
        assert_eq!(c.stays.len(), 1);
        assert_eq!(c.tally.modality, 1);
    }

    #[test]
    fn tally_on_constructed_fixture() {
        // 100 stays: 20 under-age, of the remaining 80, 10 shorter than 12h
        let mut stays = Vec::new();
        for i in 0..100 {
            let age = if i < 20 { 10.0 + (i as f64) / 4.0 } else { 40.0 };
            let hours = if (20..30).contains(&i) { 6 } else { 48 };
            stays.push(stay(i, age, hours));
        }
        let criteria = CohortCriteria {
            min_stay_hours: 12.0,
            ..Default::default()
        };
        let c = apply_cohort(&MasterDataset { stays }, &criteria).unwrap();
        assert_eq!(c.stays.len(), 70);
        assert_eq!(c.tally.age, 20);
        assert_eq!(c.tally.min_stay, 10);
        assert_eq!(c.tally.modality, 0);
    }

    #[test]
    fn empty_cohort_is_an_error() {
        let master = MasterDataset {
            stays: vec![stay(1, 5.0, 30)],
        };
        assert_eq!(
            apply_cohort(&master, &CohortCriteria::default()).unwrap_err(),
            CohortError::EmptyCohort
        );
    }

    #[test]
    fn window_is_half_open() {
        let mut s = stay(1, 50.0, 48);
        s.vitals = [1.0, 23.9, 24.0, 24.1].into_iter().map(vital).collect();
        let clipped = clip_window(&s, 24.0);
        let offsets: Vec<f64> = clipped.vitals.iter().map(|v| v.offset_hours).collect();
        assert_eq!(offsets, vec![1.0, 23.9]);
    }

    #[test]
    fn window_longer_than_stay_is_identity() {
        let mut s = stay(1, 50.0, 10);
        s.vitals = [0.0, 5.0, 9.5].into_iter().map(vital).collect();
        s.notes.push(NoteRecord {
            seq: 0,
            offset_hours: 2.0,
            text: "n".into(),
        });
        assert_eq!(clip_window(&s, 24.0), s);
    }

    #[test]
    fn mortality_labels() {
        let mut s = stay(1, 50.0, 10);
        s.admission.deathtime = Some(5 * H);
        s.admission.hospital_expire_flag = None;
        assert_eq!(label_mortality(&s), Ok(1));

        let alive = stay(2, 50.0, 10);
        assert_eq!(label_mortality(&alive), Ok(0));

        let mut after = stay(3, 50.0, 10);
        after.admission.deathtime = Some(after.admission.dischtime + 24 * H);
        after.admission.hospital_expire_flag = None;
        assert_eq!(label_mortality(&after), Ok(0));

        let mut unknown = stay(4, 50.0, 10);
        unknown.admission.hospital_expire_flag = None;
        assert!(label_mortality(&unknown).is_err());
    }

    #[test]
    fn los_is_strict() {
        let key = |hours: f64| StayKey {
            stay_id: 1,
            hadm_id: 1,
            subject_id: 1,
            intime: 0,
            outtime: (hours * 3600.0) as i64,
        };
        assert_eq!(label_los(&key(4.2 * 24.0), 3.0), 1);
        assert_eq!(label_los(&key(72.0), 3.0), 0);
        assert_eq!(label_los(&key(48.0), 3.0), 0);
    }

    #[test]
    fn age_bands_are_lower_inclusive() {
        let g = GroupingConfig::default();
        assert_eq!(g.age_band(65.0), "65–79");
        assert_eq!(g.age_band(64.99), "45–64");
        assert_eq!(g.age_band(80.0), "80+");
        assert_eq!(g.age_band(18.0), "18–44");
    }

    #[test]
    fn race_alias_table() {
        let g = GroupingConfig::default();
        let curated = [
            ("HISPANIC/LATINO - PUERTO RICAN", "Hispanic"),
            ("HISPANIC OR LATINO", "Hispanic"),
            ("HISPANIC/LATINO - DOMINICAN", "Hispanic"),
            ("SOUTH AMERICAN", "Hispanic"),
            ("WHITE", "White"),
            ("WHITE - OTHER EUROPEAN", "White"),
            ("BLACK/AFRICAN AMERICAN", "Black"),
            ("BLACK/CAPE VERDEAN", "Black"),
            ("ASIAN - CHINESE", "Asian"),
            ("ASIAN - SOUTH EAST ASIAN", "Asian"),
            ("AMERICAN INDIAN/ALASKA NATIVE", "Other"),
            ("UNKNOWN", "Other"),
            ("PATIENT DECLINED TO ANSWER", "Other"),
            ("", "Other"),
        ];
        for (raw, want) in curated {
            assert_eq!(g.race_group(raw), want, "{raw}");
        }
    }

    #[test]
    fn early_death_switch() {
        let mut s = stay(1, 50.0, 48);
        s.admission.deathtime = Some(10 * H);
        let master = MasterDataset {
            stays: vec![s, stay(2, 50.0, 48)],
        };
        let keep = apply_cohort(&master, &CohortCriteria::default()).unwrap();
        assert_eq!(keep.stays.len(), 2);
        let drop = apply_cohort(
            &master,
            &CohortCriteria {
                exclude_early_death: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(drop.stays.len(), 1);
        assert_eq!(drop.tally.early_death, 1);
    }

    #[test]
    fn relabeling_is_idempotent() {
        let stays = vec![stay(1, 50.0, 100), stay(2, 70.0, 20)];
        let c = CohortCriteria::default();
        let g = GroupingConfig::default();
        let a = label_cohort(&stays, &c, &g, 3.0).unwrap();
        let b = label_cohort(&stays, &c, &g, 3.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].los, 1);
        assert_eq!(a[1].groups.age_band, "65–79");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_master() -> impl Strategy<Value = MasterDataset> {
            prop::collection::vec((0.0f64..100.0, 1i64..200, 0usize..5), 1..60).prop_map(|rows| {
                let stays = rows
                    .into_iter()
                    .enumerate()
                    .map(|(i, (age, hours, nv))| {
                        let mut s = stay(i as i64, age, hours);
                        s.vitals = (0..nv).map(|k| vital(k as f64 * 7.0)).collect();
                        s
                    })
                    .collect();
                MasterDataset { stays }
            })
        }

        fn size(m: &MasterDataset, c: &CohortCriteria) -> usize {
            apply_cohort(m, c).map(|c| c.stays.len()).unwrap_or(0)
        }

        proptest! {
            #[test]
            fn tightening_never_grows_cohort(m in arb_master(), age in 0.0f64..90.0, extra in 0.0f64..30.0, hours in 0.0f64..100.0) {
                let base = CohortCriteria { min_age_years: age, min_stay_hours: hours, ..Default::default() };
                let n = size(&m, &base);
                let older = CohortCriteria { min_age_years: age + extra, ..base.clone() };
                let longer = CohortCriteria { min_stay_hours: hours + extra, ..base.clone() };
                prop_assert!(size(&m, &older) <= n);
                prop_assert!(size(&m, &longer) <= n);
                let mut with_vitals = base.clone();
                with_vitals.required_modalities.insert(Modality::Vitals);
                prop_assert!(size(&m, &with_vitals) <= n);
            }

            #[test]
            fn retained_stays_satisfy_every_criterion(m in arb_master(), age in 0.0f64..90.0, hours in 0.0f64..100.0) {
                let mut c = CohortCriteria { min_age_years: age, min_stay_hours: hours, ..Default::default() };
                c.required_modalities.insert(Modality::Vitals);
                if let Ok(cohort) = apply_cohort(&m, &c) {
                    for s in &cohort.stays {
                        prop_assert!(s.demographics.age_years >= age);
                        prop_assert!(s.key.duration_hours() >= hours);
                        prop_assert!(s.vitals.iter().any(|v| v.offset_hours < c.window_hours));
                    }
                    let t = &cohort.tally;
                    prop_assert_eq!(t.total, t.age + t.min_stay + t.modality + t.early_death + t.retained);
                }
            }

            #[test]
            fn clipping_matches_brute_force(offsets in prop::collection::vec(-5.0f64..50.0, 0..40), w in 0.5f64..48.0) {
                let mut s = stay(1, 50.0, 60);
                s.vitals = offsets.iter().copied().map(vital).collect();
                let clipped = clip_window(&s, w);
                let mut expected = 0;
                for &o in &offsets {
                    if o >= 0.0 && o < w {
                        expected += 1;
                    }
                }
                prop_assert_eq!(clipped.vitals.len(), expected);
            }
        }
    }
}
