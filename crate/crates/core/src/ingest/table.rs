//! Typed CSV tables driven by a declared schema.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::Read;
use std::path::Path;

use chrono::{NaiveDateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use super::IngestError;

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Integer,
    Float,
    Text,
    Timestamp,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
}

impl ColumnSpec {
    pub fn new(name: &str, kind: ColumnKind) -> Self {
        Self {
            name: name.to_string(),
            kind,
        }
    }
}

/// Declared layout of one source table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSchema {
    pub table_name: String,
    pub columns: Vec<ColumnSpec>,
    #[serde(default)]
    pub key_columns: Vec<String>,
}

impl SourceSchema {
    pub fn new(table_name: &str, columns: Vec<ColumnSpec>, key_columns: &[&str]) -> Self {
        Self {
            table_name: table_name.to_string(),
            columns,
            key_columns: key_columns.iter().map(|k| k.to_string()).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        let mut seen = BTreeSet::new();
        for col in &self.columns {
            if !seen.insert(col.name.as_str()) {
                return Err(IngestError::InvalidSchema(format!(
                    "{}: duplicate column {:?}",
                    self.table_name, col.name
                )));
            }
        }
        for key in &self.key_columns {
            if !seen.contains(key.as_str()) {
                return Err(IngestError::InvalidSchema(format!(
                    "{}: key column {:?} is not a declared column",
                    self.table_name, key
                )));
            }
        }
        Ok(())
    }
}

/// The full set of source schemas, keyed by table name, as stored in `schemas.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaSet {
    pub tables: BTreeMap<String, SourceSchema>,
}

impl SchemaSet {
    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text = std::fs::read_to_string(path).map_err(|e| IngestError::io(path, e))?;
        let set: SchemaSet = serde_json::from_str(&text)
            .map_err(|e| IngestError::InvalidSchema(format!("{}: {e}", path.display())))?;
        for schema in set.tables.values() {
            schema.validate()?;
        }
        Ok(set)
    }

    pub fn get(&self, table: &str) -> Result<&SourceSchema, IngestError> {
        self.tables
            .get(table)
            .ok_or_else(|| IngestError::InvalidSchema(format!("no schema for table {table:?}")))
    }

    /// Schemas for the MIMIC-shaped tables the pipeline consumes.
    pub fn mimic_default() -> Self {
        use ColumnKind::*;
        let tables = [
            SourceSchema::new(
                "patients",
                vec![
                    ColumnSpec::new("subject_id", Integer),
                    ColumnSpec::new("gender", Categorical),
                    ColumnSpec::new("anchor_age", Float),
                    ColumnSpec::new("anchor_year", Integer),
                ],
                &["subject_id"],
            ),
            SourceSchema::new(
                "admissions",
                vec![
                    ColumnSpec::new("hadm_id", Integer),
                    ColumnSpec::new("subject_id", Integer),
                    ColumnSpec::new("admittime", Timestamp),
                    ColumnSpec::new("dischtime", Timestamp),
                    ColumnSpec::new("deathtime", Timestamp),
                    ColumnSpec::new("race", Categorical),
                    ColumnSpec::new("hospital_expire_flag", Integer),
                ],
                &["hadm_id"],
            ),
            SourceSchema::new(
                "icustays",
                vec![
                    ColumnSpec::new("stay_id", Integer),
                    ColumnSpec::new("hadm_id", Integer),
                    ColumnSpec::new("subject_id", Integer),
                    ColumnSpec::new("intime", Timestamp),
                    ColumnSpec::new("outtime", Timestamp),
                ],
                &["stay_id"],
            ),
            SourceSchema::new(
                "vitals",
                vec![
                    ColumnSpec::new("stay_id", Integer),
                    ColumnSpec::new("hadm_id", Integer),
                    ColumnSpec::new("charttime", Timestamp),
                    ColumnSpec::new("variable", Text),
                    ColumnSpec::new("value", Float),
                ],
                &[],
            ),
            SourceSchema::new(
                "notes",
                vec![
                    ColumnSpec::new("note_id", Text),
                    ColumnSpec::new("hadm_id", Integer),
                    ColumnSpec::new("charttime", Timestamp),
                    ColumnSpec::new("text", Text),
                ],
                &["note_id"],
            ),
            SourceSchema::new(
                "images",
                vec![
                    ColumnSpec::new("dicom_id", Text),
                    ColumnSpec::new("hadm_id", Integer),
                    ColumnSpec::new("studytime", Timestamp),
                    ColumnSpec::new("path", Text),
                ],
                &["dicom_id"],
            ),
        ];
        Self {
            tables: tables
                .into_iter()
                .map(|s| (s.table_name.clone(), s))
                .collect(),
        }
    }
}

/// A single typed cell. Empty CSV fields become `Null` regardless of kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Null,
    Int(i64),
    Float(f64),
    Text(String),
    /// Seconds since the Unix epoch, UTC-naive.
    Timestamp(i64),
}

impl Value {
    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_float(&self) -> Option<f64> {
        match self {
            Value::Float(v) => Some(*v),
            Value::Int(v) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_timestamp(&self) -> Option<i64> {
        match self {
            Value::Timestamp(t) => Some(*t),
            _ => None,
        }
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }
}

pub fn parse_timestamp(s: &str) -> Option<i64> {
    NaiveDateTime::parse_from_str(s.trim(), TIMESTAMP_FORMAT)
        .ok()
        .map(|dt| dt.and_utc().timestamp())
}

pub fn format_timestamp(secs: i64) -> String {
    match Utc.timestamp_opt(secs, 0).single() {
        Some(dt) => dt.naive_utc().format(TIMESTAMP_FORMAT).to_string(),
        None => secs.to_string(),
    }
}

fn coerce(raw: &str, kind: ColumnKind) -> Option<Value> {
    if raw.is_empty() {
        return Some(Value::Null);
    }
    match kind {
        ColumnKind::Integer => raw.trim().parse().ok().map(Value::Int),
        ColumnKind::Float => raw
            .trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(Value::Float),
        ColumnKind::Text | ColumnKind::Categorical => Some(Value::Text(raw.to_string())),
        ColumnKind::Timestamp => parse_timestamp(raw).map(Value::Timestamp),
    }
}

/// Rows of one parsed table, stored in the schema's column order.
#[derive(Debug, Clone)]
pub struct Table {
    pub schema: SourceSchema,
    pub rows: Vec<Vec<Value>>,
    index: HashMap<String, usize>,
}

impl Table {
    pub fn new(schema: SourceSchema, rows: Vec<Vec<Value>>) -> Self {
        let index = schema
            .columns
            .iter()
            .enumerate()
            .map(|(i, c)| (c.name.clone(), i))
            .collect();
        Self {
            schema,
            rows,
            index,
        }
    }

    pub fn name(&self) -> &str {
        &self.schema.table_name
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn require_column(&self, name: &str) -> Result<usize, IngestError> {
        self.column(name)
            .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
    }

    pub fn get(&self, row: usize, name: &str) -> Option<&Value> {
        self.column(name).map(|c| &self.rows[row][c])
    }
}

/// Parses a CSV file against `schema`. The header must contain exactly the
/// declared columns, in any order.
pub fn parse_table(path: &Path, schema: &SourceSchema) -> Result<Table, IngestError> {
    let mut file = File::open(path).map_err(|e| IngestError::io(path, e))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)
        .map_err(|e| IngestError::io(path, e))?;
    parse_table_bytes(&buf, schema)
}

pub fn parse_table_bytes(data: &[u8], schema: &SourceSchema) -> Result<Table, IngestError> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(data);
    let header = reader
        .headers()
        .map_err(|e| IngestError::Csv(e.to_string()))?
        .clone();

    // schema column index -> csv column index
    let mut mapping = Vec::with_capacity(schema.columns.len());
    for col in &schema.columns {
        match header.iter().position(|h| h == col.name) {
            Some(i) => mapping.push(i),
            None => return Err(IngestError::MissingColumn(col.name.clone())),
        }
    }
    if let Some(extra) = header
        .iter()
        .find(|h| !schema.columns.iter().any(|c| c.name == *h))
    {
        return Err(IngestError::UnexpectedColumn(extra.to_string()));
    }

    let key_idx: Vec<usize> = schema
        .key_columns
        .iter()
        .map(|k| schema.columns.iter().position(|c| &c.name == k).unwrap())
        .collect();
    let mut seen_keys: HashMap<Vec<String>, usize> = HashMap::new();

    let mut rows = Vec::new();
    for (row_no, record) in reader.records().enumerate() {
        let record = record.map_err(|e| IngestError::Csv(e.to_string()))?;
        let mut row = Vec::with_capacity(schema.columns.len());
        for (col, &src) in schema.columns.iter().zip(&mapping) {
            let raw = record.get(src).unwrap_or("");
            let value = coerce(raw, col.kind).ok_or_else(|| IngestError::TypeCoercion {
                row: row_no,
                column: col.name.clone(),
                value: raw.to_string(),
            })?;
            row.push(value);
        }
        if !key_idx.is_empty() {
            let key: Vec<String> = key_idx
                .iter()
                .map(|&i| record.get(mapping[i]).unwrap_or("").to_string())
                .collect();
            if let Some(first) = seen_keys.insert(key.clone(), row_no) {
                return Err(IngestError::DuplicateKey {
                    table: schema.table_name.clone(),
                    key: key.join(","),
                    first_row: first,
                    row: row_no,
                });
            }
        }
        rows.push(row);
    }
    Ok(Table::new(schema.clone(), rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patients_schema() -> SourceSchema {
        SchemaSet::mimic_default().tables["patients"].clone()
    }

    #[test]
    fn parses_well_formed_table() {
        let csv = "subject_id,gender,anchor_age,anchor_year\n1,F,60,2150\n2,M,71.5,2151\n3,F,,2152\n";
        let table = parse_table_bytes(csv.as_bytes(), &patients_schema()).unwrap();
        assert_eq!(table.len(), 3);
        assert_eq!(table.get(1, "anchor_age"), Some(&Value::Float(71.5)));
        assert!(table.get(2, "anchor_age").unwrap().is_null());
    }

    #[test]
    fn header_order_does_not_matter() {
        let csv = "gender,anchor_year,subject_id,anchor_age\nF,2150,1,60\n";
        let table = parse_table_bytes(csv.as_bytes(), &patients_schema()).unwrap();
        assert_eq!(table.get(0, "subject_id"), Some(&Value::Int(1)));
    }

    #[test]
    fn missing_column_is_reported() {
        let schema = SchemaSet::mimic_default().tables["icustays"].clone();
        let csv = "stay_id,hadm_id,subject_id,outtime\n1,2,3,2150-01-01 00:00:00\n";
        match parse_table_bytes(csv.as_bytes(), &schema) {
            Err(IngestError::MissingColumn(c)) => assert_eq!(c, "intime"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_float_is_a_coercion_error() {
        let csv = "subject_id,gender,anchor_age,anchor_year\n1,F,abc,2150\n";
        match parse_table_bytes(csv.as_bytes(), &patients_schema()) {
            Err(IngestError::TypeCoercion { row, column, .. }) => {
                assert_eq!(row, 0);
                assert_eq!(column, "anchor_age");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn repeated_key_is_rejected() {
        let csv = "subject_id,gender,anchor_age,anchor_year\n1,F,60,2150\n1,M,61,2150\n";
        assert!(matches!(
            parse_table_bytes(csv.as_bytes(), &patients_schema()),
            Err(IngestError::DuplicateKey { row: 1, .. })
        ));
    }

    #[test]
    fn quoted_fields_follow_rfc4180() {
        let schema = SchemaSet::mimic_default().tables["notes"].clone();
        let csv = "note_id,hadm_id,charttime,text\nn1,5,2150-01-01 10:00:00,\"line one, with comma\nline \"\"two\"\"\"\n";
        let table = parse_table_bytes(csv.as_bytes(), &schema).unwrap();
        assert_eq!(
            table.get(0, "text").unwrap().as_text(),
            Some("line one, with comma\nline \"two\"")
        );
    }

    #[test]
    fn timestamps_round_trip() {
        let t = parse_timestamp("2150-03-04 05:06:07").unwrap();
        assert_eq!(format_timestamp(t), "2150-03-04 05:06:07");
        assert!(parse_timestamp("2150-03-04T05:06:07").is_none());
    }

    #[test]
    fn schema_rejects_unknown_key() {
        let schema = SourceSchema::new("t", vec![ColumnSpec::new("a", ColumnKind::Integer)], &["b"]);
        assert!(schema.validate().is_err());
    }
}
