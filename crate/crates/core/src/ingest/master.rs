//! The stay-level master dataset and its on-disk directory layout.
//!
//! ```text
//! stays.csv      one row per stay: keys, timestamps, demographics, outcome fields
//! events.bin     per stay: u32 stay index, u32 count, then (f64 offset, u32 var, f64 value)*
//! variables.csv  variable index -> variable id
//! notes.csv      stay_id, seq, offset_hours, file
//! notes/         <stay_id>_<seq>.txt
//! images.csv     stay_id, offset_hours, path
//! ```
//! All integers and floats in `events.bin` are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{
    format_timestamp, parse_timestamp, AdmissionInfo, Attachment, Demographics, EventKind,
    EventValue, IngestError, Linkage, StayKey,
};

#[derive(Debug, Clone, PartialEq)]
pub struct VitalObs {
    pub offset_hours: f64,
    pub variable: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoteRecord {
    pub seq: u32,
    pub offset_hours: f64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRef {
    pub offset_hours: f64,
    pub path: String,
}

/// One ICU stay with everything linked to it.
#[derive(Debug, Clone, PartialEq)]
pub struct StayRecord {
    pub key: StayKey,
    pub demographics: Demographics,
    pub admission: AdmissionInfo,
    pub vitals: Vec<VitalObs>,
    pub notes: Vec<NoteRecord>,
    pub images: Vec<ImageRef>,
}

impl StayRecord {
    pub fn new(key: StayKey, demographics: Demographics, admission: AdmissionInfo) -> Self {
        Self {
            key,
            demographics,
            admission,
            vitals: Vec::new(),
            notes: Vec::new(),
            images: Vec::new(),
        }
    }

    pub fn stay_id(&self) -> i64 {
        self.key.stay_id
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MasterDataset {
    /// Sorted by `stay_id`.
    pub stays: Vec<StayRecord>,
}

const STAYS_HEADER: [&str; 12] = [
    "stay_id",
    "hadm_id",
    "subject_id",
    "intime",
    "outtime",
    "age_years",
    "gender",
    "race",
    "admittime",
    "dischtime",
    "deathtime",
    "hospital_expire_flag",
];

fn malformed(msg: impl Into<String>) -> IngestError {
    IngestError::Malformed(msg.into())
}

fn csv_err(e: csv::Error) -> IngestError {
    IngestError::Csv(e.to_string())
}

impl MasterDataset {
    /// Assembles one record per linked stay. Stays with no events still get a record.
    pub fn build(linkage: &Linkage, attachments: &BTreeMap<EventKind, Attachment>) -> Self {
        let mut stays: Vec<StayRecord> = linkage
            .stays
            .iter()
            .map(|s| StayRecord::new(s.key, s.demographics.clone(), s.admission.clone()))
            .collect();
        stays.sort_by_key(|s| s.key.stay_id);

        for record in &mut stays {
            let id = record.key.stay_id;
            for (kind, att) in attachments {
                let Some(stream) = att.streams.get(&id) else {
                    continue;
                };
                for ev in stream {
                    match (kind, &ev.value) {
                        (EventKind::Vital, EventValue::Number(v)) => record.vitals.push(VitalObs {
                            offset_hours: ev.offset_hours,
                            variable: ev.variable_id.clone(),
                            value: *v,
                        }),
                        (EventKind::Note, EventValue::Text(t)) => {
                            let seq = record.notes.len() as u32;
                            record.notes.push(NoteRecord {
                                seq,
                                offset_hours: ev.offset_hours,
                                text: t.clone(),
                            })
                        }
                        (EventKind::ImageRef, EventValue::Text(p)) => {
                            record.images.push(ImageRef {
                                offset_hours: ev.offset_hours,
                                path: p.clone(),
                            })
                        }
                        _ => {}
                    }
                }
            }
        }
        MasterDataset { stays }
    }

    pub fn len(&self) -> usize {
        self.stays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stays.is_empty()
    }

    pub fn get(&self, stay_id: i64) -> Option<&StayRecord> {
        self.stays
            .binary_search_by_key(&stay_id, |s| s.key.stay_id)
            .ok()
            .map(|i| &self.stays[i])
    }

    pub fn write(&self, dir: &Path) -> Result<(), IngestError> {
        let io = |e| IngestError::io(dir, e);
        if dir.join("notes").exists() {
            fs::remove_dir_all(dir.join("notes")).map_err(io)?;
        }
        fs::create_dir_all(dir.join("notes")).map_err(io)?;

        let mut w = csv::Writer::from_path(dir.join("stays.csv")).map_err(csv_err)?;
        w.write_record(STAYS_HEADER).map_err(csv_err)?;
        for s in &self.stays {
            let k = &s.key;
            let a = &s.admission;
            w.write_record([
                k.stay_id.to_string(),
                k.hadm_id.to_string(),
                k.subject_id.to_string(),
                format_timestamp(k.intime),
                format_timestamp(k.outtime),
                s.demographics.age_years.to_string(),
                s.demographics.gender.clone(),
                s.demographics.race.clone(),
                format_timestamp(a.admittime),
                format_timestamp(a.dischtime),
                a.deathtime.map(format_timestamp).unwrap_or_default(),
                a.hospital_expire_flag
                    .map(|f| (f as u8).to_string())
                    .unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(io)?;

        let mut variables: BTreeMap<&str, u32> = BTreeMap::new();
        for s in &self.stays {
            for v in &s.vitals {
                variables.insert(v.variable.as_str(), 0);
            }
        }
        for (i, idx) in variables.values_mut().enumerate() {
            *idx = i as u32;
        }
        let mut w = csv::Writer::from_path(dir.join("variables.csv")).map_err(csv_err)?;
        w.write_record(["index", "variable_id"]).map_err(csv_err)?;
        for (name, idx) in &variables {
            w.write_record([idx.to_string(), name.to_string()])
                .map_err(csv_err)?;
        }
        w.flush().map_err(io)?;

        let mut bin = Vec::new();
        for (i, s) in self.stays.iter().enumerate() {
            bin.extend_from_slice(&(i as u32).to_le_bytes());
            bin.extend_from_slice(&(s.vitals.len() as u32).to_le_bytes());
            for v in &s.vitals {
                bin.extend_from_slice(&v.offset_hours.to_le_bytes());
                bin.extend_from_slice(&variables[v.variable.as_str()].to_le_bytes());
                bin.extend_from_slice(&v.value.to_le_bytes());
            }
        }
        fs::File::create(dir.join("events.bin"))
            .and_then(|mut f| f.write_all(&bin))
            .map_err(io)?;

        let mut w = csv::Writer::from_path(dir.join("notes.csv")).map_err(csv_err)?;
        w.write_record(["stay_id", "seq", "offset_hours", "file"])
            .map_err(csv_err)?;
        for s in &self.stays {
            for n in &s.notes {
                let file = format!("{}_{}.txt", s.key.stay_id, n.seq);
                fs::write(dir.join("notes").join(&file), n.text.as_bytes()).map_err(io)?;
                w.write_record([
                    s.key.stay_id.to_string(),
                    n.seq.to_string(),
                    n.offset_hours.to_string(),
                    file,
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush().map_err(io)?;

        let mut w = csv::Writer::from_path(dir.join("images.csv")).map_err(csv_err)?;
        w.write_record(["stay_id", "offset_hours", "path"])
            .map_err(csv_err)?;
        for s in &self.stays {
            for im in &s.images {
                w.write_record([
                    s.key.stay_id.to_string(),
                    im.offset_hours.to_string(),
                    im.path.clone(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush().map_err(io)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self, IngestError> {
        let mut stays = Vec::new();
        let mut r = csv::Reader::from_path(dir.join("stays.csv")).map_err(csv_err)?;
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let field = |i: usize| rec.get(i).unwrap_or("");
            let int = |i: usize| {
                field(i)
                    .parse::<i64>()
                    .map_err(|_| malformed(format!("stays.csv: bad {}", STAYS_HEADER[i])))
            };
            let ts = |i: usize| {
                parse_timestamp(field(i))
                    .ok_or_else(|| malformed(format!("stays.csv: bad {}", STAYS_HEADER[i])))
            };
            let key = StayKey {
                stay_id: int(0)?,
                hadm_id: int(1)?,
                subject_id: int(2)?,
                intime: ts(3)?,
                outtime: ts(4)?,
            };
            let demographics = Demographics {
                age_years: field(5)
                    .parse()
                    .map_err(|_| malformed("stays.csv: bad age_years"))?,
                gender: field(6).to_string(),
                race: field(7).to_string(),
            };
            let admission = AdmissionInfo {
                admittime: ts(8)?,
                dischtime: ts(9)?,
                deathtime: if field(10).is_empty() {
                    None
                } else {
                    Some(ts(10)?)
                },
                hospital_expire_flag: match field(11) {
                    "" => None,
                    "0" => Some(false),
                    "1" => Some(true),
                    _ => return Err(malformed("stays.csv: bad hospital_expire_flag")),
                },
            };
            stays.push(StayRecord::new(key, demographics, admission));
        }

        let mut variables = Vec::new();
        let mut r = csv::Reader::from_path(dir.join("variables.csv")).map_err(csv_err)?;
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let idx: usize = rec
                .get(0)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| malformed("variables.csv: bad index"))?;
            if idx != variables.len() {
                return Err(malformed("variables.csv: indices not contiguous"));
            }
            variables.push(rec.get(1).unwrap_or("").to_string());
        }

        let bin = fs::read(dir.join("events.bin")).map_err(|e| IngestError::io(dir, e))?;
        let mut cur = ByteCursor::new(&bin);
        while !cur.done() {
            let stay_idx = cur.u32()? as usize;
            let count = cur.u32()? as usize;
            let stay = stays
                .get_mut(stay_idx)
                .ok_or_else(|| malformed("events.bin: stay index out of range"))?;
            for _ in 0..count {
                let offset_hours = cur.f64()?;
                let var = cur.u32()? as usize;
                let value = cur.f64()?;
                let variable = variables
                    .get(var)
                    .ok_or_else(|| malformed("events.bin: variable index out of range"))?
                    .clone();
                stay.vitals.push(VitalObs {
                    offset_hours,
                    variable,
                    value,
                });
            }
        }

        let position: BTreeMap<i64, usize> = stays
            .iter()
            .enumerate()
            .map(|(i, s)| (s.key.stay_id, i))
            .collect();
        let lookup = |id: &str| -> Result<usize, IngestError> {
            id.parse::<i64>()
                .ok()
                .and_then(|id| position.get(&id).copied())
                .ok_or_else(|| malformed(format!("unknown stay_id {id:?}")))
        };

        let mut r = csv::Reader::from_path(dir.join("notes.csv")).map_err(csv_err)?;
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let i = lookup(rec.get(0).unwrap_or(""))?;
            let seq = rec
                .get(1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| malformed("notes.csv: bad seq"))?;
            let offset_hours = rec
                .get(2)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| malformed("notes.csv: bad offset_hours"))?;
            let path = dir.join("notes").join(rec.get(3).unwrap_or(""));
            let text = fs::read_to_string(&path).map_err(|e| IngestError::io(&path, e))?;
            stays[i].notes.push(NoteRecord {
                seq,
                offset_hours,
                text,
            });
        }

        let mut r = csv::Reader::from_path(dir.join("images.csv")).map_err(csv_err)?;
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let i = lookup(rec.get(0).unwrap_or(""))?;
            let offset_hours = rec
                .get(1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| malformed("images.csv: bad offset_hours"))?;
            stays[i].images.push(ImageRef {
                offset_hours,
                path: rec.get(2).unwrap_or("").to_string(),
            });
        }
        Ok(MasterDataset { stays })
    }
}

struct ByteCursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn done(&self) -> bool {
        self.pos >= self.buf.len()
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N], IngestError> {
        let end = self.pos + N;
        let bytes = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| malformed("events.bin: truncated"))?;
        self.pos = end;
        Ok(bytes.try_into().unwrap())
    }

    fn u32(&mut self) -> Result<u32, IngestError> {
        self.take::<4>().map(u32::from_le_bytes)
    }

    fn f64(&mut self) -> Result<f64, IngestError> {
        self.take::<8>().map(f64::from_le_bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MasterDataset {
        let mk = |id: i64| {
            StayRecord::new(
                StayKey {
                    stay_id: id,
                    hadm_id: id * 10,
                    subject_id: id * 100,
                    intime: 5_000_000_000 + id * 7,
                    outtime: 5_000_100_000 + id * 7,
                },
                Demographics {
                    age_years: 40.0 + id as f64 / 3.0,
                    gender: "F".into(),
                    race: "WHITE, \"quoted\"".into(),
                },
                AdmissionInfo {
                    admittime: 5_000_000_000,
                    dischtime: 5_000_200_000,
                    deathtime: (id % 2 == 0).then_some(5_000_150_000),
                    hospital_expire_flag: Some(id % 2 == 0),
                },
            )
        };
        let mut a = mk(1);
        a.vitals = vec![
            VitalObs {
                offset_hours: 0.1 + 0.2,
                variable: "hr".into(),
                value: 88.25,
            },
            VitalObs {
                offset_hours: 1.0 / 3.0,
                variable: "sbp".into(),
                value: 120.0,
            },
        ];
        a.notes = vec![
            NoteRecord {
                seq: 0,
                offset_hours: 2.5,
                text: "first, note\nwith newline".into(),
            },
            NoteRecord {
                seq: 1,
                offset_hours: 2.5,
                text: String::new(),
            },
        ];
        a.images = vec![ImageRef {
            offset_hours: 7.0 / 9.0,
            path: "images/a.png".into(),
        }];
        let b = mk(2);
        MasterDataset { stays: vec![a, b] }
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample();
        ds.write(dir.path()).unwrap();
        let back = MasterDataset::read(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn rewriting_is_byte_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        sample().write(d1.path()).unwrap();
        MasterDataset::read(d1.path())
            .unwrap()
            .write(d2.path())
            .unwrap();
        for f in ["stays.csv", "events.bin", "variables.csv", "notes.csv", "images.csv"] {
            assert_eq!(
                fs::read(d1.path().join(f)).unwrap(),
                fs::read(d2.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn empty_streams_still_emit_record() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = sample();
        ds.stays.clear();
        ds.stays.push(sample().stays[1].clone());
        ds.write(dir.path()).unwrap();
        let back = MasterDataset::read(dir.path()).unwrap();
        assert_eq!(back.len(), 1);
        assert!(back.stays[0].vitals.is_empty());
    }

    #[test]
    fn truncated_events_bin_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        sample().write(dir.path()).unwrap();
        let path = dir.path().join("events.bin");
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            MasterDataset::read(dir.path()),
            Err(IngestError::Malformed(_))
        ));
    }
}
