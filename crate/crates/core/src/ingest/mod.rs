//! Source table parsing, patient/admission/stay linkage, and event attachment.
//!
//! Linkage runs on key identifiers (`subject_id`, `hadm_id`, `stay_id`).
//! Events that carry a `stay_id` are attached directly; events that only carry
//! a `hadm_id` are matched to the stay of that admission whose
//! `[intime, outtime]` interval contains the event timestamp. When several
//! stays of one admission contain the timestamp the stay with the later
//! `intime` wins. Nothing is dropped silently: unresolved stays land in the
//! rejects list and unattached events in the orphans list.

mod master;
mod table;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use chrono::{Datelike, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use master::{ImageRef, MasterDataset, NoteRecord, StayRecord, VitalObs};
pub use table::{
    format_timestamp, parse_table, parse_table_bytes, parse_timestamp, ColumnKind, ColumnSpec,
    SchemaSet, SourceSchema, Table, Value, TIMESTAMP_FORMAT,
};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(String),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("unexpected column {0:?} not declared in schema")]
    UnexpectedColumn(String),
    #[error("cannot coerce value {value:?} at row {row}, column {column:?}")]
    TypeCoercion {
        row: usize,
        column: String,
        value: String,
    },
    #[error("duplicate key ({key}) in table {table}: rows {first_row} and {row}")]
    DuplicateKey {
        table: String,
        key: String,
        first_row: usize,
        row: usize,
    },
    #[error("malformed master dataset: {0}")]
    Malformed(String),
}

impl IngestError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        IngestError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

const SECONDS_PER_HOUR: f64 = 3600.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StayKey {
    pub stay_id: i64,
    pub hadm_id: i64,
    pub subject_id: i64,
    /// Seconds since epoch.
    pub intime: i64,
    pub outtime: i64,
}

impl StayKey {
    pub fn duration_hours(&self) -> f64 {
        (self.outtime - self.intime) as f64 / SECONDS_PER_HOUR
    }

    pub fn contains(&self, ts: i64) -> bool {
        self.intime <= ts && ts <= self.outtime
    }

    pub fn offset_hours(&self, ts: i64) -> f64 {
        (ts - self.intime) as f64 / SECONDS_PER_HOUR
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demographics {
    pub age_years: f64,
    pub gender: String,
    pub race: String,
}

/// Outcome-relevant fields of the hospital admission a stay belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmissionInfo {
    pub admittime: i64,
    pub dischtime: i64,
    pub deathtime: Option<i64>,
    pub hospital_expire_flag: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkedStay {
    pub key: StayKey,
    pub demographics: Demographics,
    pub admission: AdmissionInfo,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum RejectReason {
    UnknownAdmission { hadm_id: i64 },
    UnknownPatient { subject_id: i64 },
    SubjectMismatch { stay_subject: i64, admission_subject: i64 },
    InvalidInterval,
    MissingField { column: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub row: usize,
    pub stay_id: Option<i64>,
    #[serde(flatten)]
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Default)]
pub struct Linkage {
    /// Sorted by `stay_id`.
    pub stays: Vec<LinkedStay>,
    pub rejects: Vec<Reject>,
}

fn int_field(table: &Table, row: usize, col: &str) -> Result<i64, RejectReason> {
    table
        .get(row, col)
        .and_then(Value::as_int)
        .ok_or_else(|| RejectReason::MissingField {
            column: col.to_string(),
        })
}

fn ts_field(table: &Table, row: usize, col: &str) -> Result<i64, RejectReason> {
    table
        .get(row, col)
        .and_then(Value::as_timestamp)
        .ok_or_else(|| RejectReason::MissingField {
            column: col.to_string(),
        })
}

fn text_field(table: &Table, row: usize, col: &str) -> String {
    table
        .get(row, col)
        .and_then(Value::as_text)
        .unwrap_or("")
        .to_string()
}

fn year_of(ts: i64) -> i64 {
    Utc.timestamp_opt(ts, 0)
        .single()
        .map(|dt| dt.year() as i64)
        .unwrap_or(0)
}

/// Links every `icustays` row to its admission and patient.
///
/// Age at admission is `anchor_age + (year(admittime) - anchor_year)`.
pub fn link_stays(
    patients: &Table,
    admissions: &Table,
    icustays: &Table,
) -> Result<Linkage, IngestError> {
    for (table, cols) in [
        (patients, &["subject_id", "gender", "anchor_age", "anchor_year"][..]),
        (
            admissions,
            &["hadm_id", "subject_id", "admittime", "dischtime", "race"][..],
        ),
        (
            icustays,
            &["stay_id", "hadm_id", "subject_id", "intime", "outtime"][..],
        ),
    ] {
        for col in cols {
            table.require_column(col)?;
        }
    }

    let mut patient_rows = HashMap::new();
    for row in 0..patients.len() {
        if let Ok(id) = int_field(patients, row, "subject_id") {
            patient_rows.insert(id, row);
        }
    }
    let mut admission_rows = HashMap::new();
    for row in 0..admissions.len() {
        if let Ok(id) = int_field(admissions, row, "hadm_id") {
            admission_rows.insert(id, row);
        }
    }

    let mut linkage = Linkage::default();
    for row in 0..icustays.len() {
        let stay_id = icustays.get(row, "stay_id").and_then(Value::as_int);
        match link_one(patients, admissions, icustays, row, &patient_rows, &admission_rows) {
            Ok(stay) => linkage.stays.push(stay),
            Err(reason) => linkage.rejects.push(Reject {
                row,
                stay_id,
                reason,
            }),
        }
    }
    linkage.stays.sort_by_key(|s| s.key.stay_id);
    Ok(linkage)
}

fn link_one(
    patients: &Table,
    admissions: &Table,
    icustays: &Table,
    row: usize,
    patient_rows: &HashMap<i64, usize>,
    admission_rows: &HashMap<i64, usize>,
) -> Result<LinkedStay, RejectReason> {
    let stay_id = int_field(icustays, row, "stay_id")?;
    let hadm_id = int_field(icustays, row, "hadm_id")?;
    let subject_id = int_field(icustays, row, "subject_id")?;
    let intime = ts_field(icustays, row, "intime")?;
    let outtime = ts_field(icustays, row, "outtime")?;
    if intime >= outtime {
        return Err(RejectReason::InvalidInterval);
    }
    let adm = *admission_rows
        .get(&hadm_id)
        .ok_or(RejectReason::UnknownAdmission { hadm_id })?;
    let admission_subject = int_field(admissions, adm, "subject_id")?;
    if admission_subject != subject_id {
        return Err(RejectReason::SubjectMismatch {
            stay_subject: subject_id,
            admission_subject,
        });
    }
    let pat = *patient_rows
        .get(&subject_id)
        .ok_or(RejectReason::UnknownPatient { subject_id })?;

    let admittime = ts_field(admissions, adm, "admittime")?;
    let dischtime = ts_field(admissions, adm, "dischtime")?;
    let anchor_age = patients
        .get(pat, "anchor_age")
        .and_then(Value::as_float)
        .ok_or_else(|| RejectReason::MissingField {
            column: "anchor_age".into(),
        })?;
    let anchor_year = int_field(patients, pat, "anchor_year")?;
    let age_years = anchor_age + (year_of(admittime) - anchor_year) as f64;

    Ok(LinkedStay {
        key: StayKey {
            stay_id,
            hadm_id,
            subject_id,
            intime,
            outtime,
        },
        demographics: Demographics {
            age_years,
            gender: text_field(patients, pat, "gender"),
            race: text_field(admissions, adm, "race"),
        },
        admission: AdmissionInfo {
            admittime,
            dischtime,
            deathtime: admissions.get(adm, "deathtime").and_then(Value::as_timestamp),
            hospital_expire_flag: admissions
                .get(adm, "hospital_expire_flag")
                .and_then(Value::as_int)
                .map(|v| v != 0),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Vital,
    ImageRef,
    Note,
}

impl EventKind {
    /// Default column names for this kind of event table: (time, variable, value).
    pub fn columns(self) -> EventColumns {
        match self {
            EventKind::Vital => EventColumns {
                time: "charttime".into(),
                variable: Some("variable".into()),
                value: "value".into(),
            },
            EventKind::Note => EventColumns {
                time: "charttime".into(),
                variable: None,
                value: "text".into(),
            },
            EventKind::ImageRef => EventColumns {
                time: "studytime".into(),
                variable: None,
                value: "path".into(),
            },
        }
    }

    fn default_variable(self) -> &'static str {
        match self {
            EventKind::Vital => "",
            EventKind::Note => "note",
            EventKind::ImageRef => "image",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventColumns {
    pub time: String,
    pub variable: Option<String>,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventValue {
    Number(f64),
    Text(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimedEvent {
    pub stay_id: i64,
    pub offset_hours: f64,
    pub variable_id: String,
    pub value: EventValue,
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrphanReason {
    NoIdentifier,
    MissingTimestamp,
    MissingValue,
    NoContainingStay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Orphan {
    pub row: usize,
    pub reason: OrphanReason,
}

#[derive(Debug, Clone, Default)]
pub struct Attachment {
    pub streams: BTreeMap<i64, Vec<TimedEvent>>,
    pub parsed: usize,
    pub attached: usize,
    pub orphans: Vec<Orphan>,
    /// Events that fell inside more than one stay of the same admission.
    pub ambiguous: usize,
}

/// Attaches the rows of an event table to stays.
pub fn attach_events(
    stays: &[StayKey],
    events: &Table,
    kind: EventKind,
) -> Result<Attachment, IngestError> {
    attach_events_with(stays, events, kind, &kind.columns())
}

pub fn attach_events_with(
    stays: &[StayKey],
    events: &Table,
    kind: EventKind,
    cols: &EventColumns,
) -> Result<Attachment, IngestError> {
    let stay_col = events.column("stay_id");
    let hadm_col = events.column("hadm_id");
    if stay_col.is_none() && hadm_col.is_none() {
        return Err(IngestError::MissingColumn("stay_id".into()));
    }
    let time_col = events.require_column(&cols.time)?;
    let value_col = events.require_column(&cols.value)?;
    let var_col = match &cols.variable {
        Some(name) => Some(events.require_column(name)?),
        None => None,
    };

    let by_stay: HashMap<i64, &StayKey> = stays.iter().map(|s| (s.stay_id, s)).collect();
    let mut by_hadm: HashMap<i64, Vec<&StayKey>> = HashMap::new();
    for s in stays {
        by_hadm.entry(s.hadm_id).or_default().push(s);
    }
    for list in by_hadm.values_mut() {
        // later intime first, then larger stay_id for full determinism
        list.sort_by(|a, b| b.intime.cmp(&a.intime).then(b.stay_id.cmp(&a.stay_id)));
    }

    let mut out = Attachment {
        parsed: events.len(),
        ..Default::default()
    };
    for (row_no, row) in events.rows.iter().enumerate() {
        let orphan = |reason| Orphan {
            row: row_no,
            reason,
        };
        let Some(ts) = row[time_col].as_timestamp() else {
            out.orphans.push(orphan(OrphanReason::MissingTimestamp));
            continue;
        };
        let value = match (&row[value_col], kind) {
            (Value::Null, _) => None,
            (v, EventKind::Vital) => v.as_float().map(EventValue::Number),
            (Value::Text(s), _) => Some(EventValue::Text(s.clone())),
            _ => None,
        };
        let Some(value) = value else {
            out.orphans.push(orphan(OrphanReason::MissingValue));
            continue;
        };
        let stay_id = stay_col.and_then(|c| row[c].as_int());
        let hadm_id = hadm_col.and_then(|c| row[c].as_int());
        if stay_id.is_none() && hadm_id.is_none() {
            out.orphans.push(orphan(OrphanReason::NoIdentifier));
            continue;
        }

        let direct = stay_id.and_then(|id| by_stay.get(&id).copied());
        let target = match direct {
            Some(stay) => stay.contains(ts).then_some(stay),
            None => hadm_id.and_then(|h| {
                let candidates = by_hadm.get(&h)?;
                let mut hits = candidates.iter().filter(|s| s.contains(ts));
                let first = hits.next().copied();
                if first.is_some() && hits.next().is_some() {
                    out.ambiguous += 1;
                }
                first
            }),
        };
        let Some(stay) = target else {
            out.orphans.push(orphan(OrphanReason::NoContainingStay));
            continue;
        };

        let variable_id = match var_col {
            Some(c) => match &row[c] {
                Value::Text(s) => s.clone(),
                Value::Int(i) => i.to_string(),
                _ => {
                    out.orphans.push(orphan(OrphanReason::MissingValue));
                    continue;
                }
            },
            None => kind.default_variable().to_string(),
        };
        out.streams.entry(stay.stay_id).or_default().push(TimedEvent {
            stay_id: stay.stay_id,
            offset_hours: stay.offset_hours(ts),
            variable_id,
            value,
            kind,
        });
        out.attached += 1;
    }
    for stream in out.streams.values_mut() {
        sort_stream(stream);
    }
    Ok(out)
}

/// Ascending offset, then variable id; the sort is stable so insertion order
/// breaks remaining ties.
pub fn sort_stream(stream: &mut [TimedEvent]) {
    stream.sort_by(|a, b| {
        a.offset_hours
            .total_cmp(&b.offset_hours)
            .then_with(|| a.variable_id.cmp(&b.variable_id))
    });
}

/// Per-table counts reported by ingestion.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IngestReport {
    pub stays_linked: usize,
    pub rejects: Vec<Reject>,
    pub events: BTreeMap<String, EventCounts>,
    pub tie_rule: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EventCounts {
    pub parsed: usize,
    pub attached: usize,
    pub orphaned: usize,
    pub ambiguous: usize,
    pub orphan_reasons: BTreeMap<String, usize>,
}

impl From<&Attachment> for EventCounts {
    fn from(a: &Attachment) -> Self {
        let mut orphan_reasons = BTreeMap::new();
        for o in &a.orphans {
            let name = serde_json::to_value(o.reason)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            *orphan_reasons.entry(name).or_insert(0) += 1;
        }
        EventCounts {
            parsed: a.parsed,
            attached: a.attached,
            orphaned: a.orphans.len(),
            ambiguous: a.ambiguous,
            orphan_reasons,
        }
    }
}

pub const TIE_RULE: &str = "events without stay_id are matched by hadm_id to the stay whose [intime, outtime] contains the timestamp; overlapping stays resolve to the later intime";

/// Parses the six source tables in `input_dir` and builds the master dataset.
pub fn ingest_dir(
    input_dir: &Path,
    schemas: &SchemaSet,
) -> Result<(MasterDataset, IngestReport), IngestError> {
    let load = |name: &str| -> Result<Table, IngestError> {
        parse_table(&input_dir.join(format!("{name}.csv")), schemas.get(name)?)
    };
    let patients = load("patients")?;
    let admissions = load("admissions")?;
    let icustays = load("icustays")?;
    let linkage = link_stays(&patients, &admissions, &icustays)?;
    let keys: Vec<StayKey> = linkage.stays.iter().map(|s| s.key).collect();

    let mut report = IngestReport {
        stays_linked: linkage.stays.len(),
        rejects: linkage.rejects.clone(),
        tie_rule: TIE_RULE.to_string(),
        ..Default::default()
    };
    let mut attachments = BTreeMap::new();
    for (name, kind) in [
        ("vitals", EventKind::Vital),
        ("notes", EventKind::Note),
        ("images", EventKind::ImageRef),
    ] {
        let table = load(name)?;
        let attached = attach_events(&keys, &table, kind)?;
        report.events.insert(name.to_string(), EventCounts::from(&attached));
        attachments.insert(kind, attached);
    }
    let master = MasterDataset::build(&linkage, &attachments);
    Ok((master, report))
}
