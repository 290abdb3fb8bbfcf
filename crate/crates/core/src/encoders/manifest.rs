//! On-disk embedding manifests.
//!
//! A manifest directory holds `manifest.json` (header), `ids.csv` (one
//! `stay_id` per row, in vector order) and `vectors.bin` (row-major
//! little-endian f32). The header checksum is the SHA-256 of `vectors.bin`
//! followed by `ids.csv`.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EncoderError;

pub const DTYPE_F32LE: &str = "f32le";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingModality {
    Timeseries,
    Image,
    Text,
}

impl EmbeddingModality {
    pub fn name(self) -> &'static str {
        match self {
            EmbeddingModality::Timeseries => "timeseries",
            EmbeddingModality::Image => "image",
            EmbeddingModality::Text => "text",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "timeseries" => Some(EmbeddingModality::Timeseries),
            "image" => Some(EmbeddingModality::Image),
            "text" => Some(EmbeddingModality::Text),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub modality: EmbeddingModality,
    pub encoder_name: String,
    pub dimension: usize,
    pub count: usize,
    pub dtype: String,
    pub checksum: String,
}

/// Per-stay embeddings produced by one encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingManifest {
    pub modality: EmbeddingModality,
    pub encoder_name: String,
    pub dimension: usize,
    pub ids: Vec<i64>,
    /// `ids.len() * dimension` values, row-major.
    pub vectors: Vec<f32>,
}

impl EmbeddingManifest {
    pub fn new(
        modality: EmbeddingModality,
        encoder_name: &str,
        dimension: usize,
        ids: Vec<i64>,
        vectors: Vec<f32>,
    ) -> Result<Self, EncoderError> {
        let m = Self {
            modality,
            encoder_name: encoder_name.to_string(),
            dimension,
            ids,
            vectors,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn from_rows(
        modality: EmbeddingModality,
        encoder_name: &str,
        dimension: usize,
        rows: Vec<(i64, Vec<f32>)>,
    ) -> Result<Self, EncoderError> {
        let mut ids = Vec::with_capacity(rows.len());
        let mut vectors = Vec::with_capacity(rows.len() * dimension);
        for (id, row) in rows {
            if row.len() != dimension {
                return Err(EncoderError::DimensionMismatch {
                    expected: dimension,
                    found: row.len(),
                    context: format!("row for stay {id}"),
                });
            }
            ids.push(id);
            vectors.extend(row);
        }
        Self::new(modality, encoder_name, dimension, ids, vectors)
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.dimension == 0 {
            return Err(EncoderError::Header("dimension must be positive".into()));
        }
        if self.vectors.len() != self.ids.len() * self.dimension {
            return Err(EncoderError::DimensionMismatch {
                expected: self.ids.len() * self.dimension,
                found: self.vectors.len(),
                context: "vector buffer length".into(),
            });
        }
        let mut seen = HashSet::with_capacity(self.ids.len());
        for &id in &self.ids {
            if !seen.insert(id) {
                return Err(EncoderError::DuplicateId(id));
            }
        }
        if let Some(pos) = self.vectors.iter().position(|v| !v.is_finite()) {
            return Err(EncoderError::NonFiniteValue {
                stay_id: self.ids[pos / self.dimension],
                index: pos % self.dimension,
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dimension..(i + 1) * self.dimension]
    }

    pub fn index(&self) -> HashMap<i64, usize> {
        self.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect()
    }

    fn ids_csv(&self) -> Vec<u8> {
        let mut out = b"stay_id\n".to_vec();
        for id in &self.ids {
            out.extend_from_slice(id.to_string().as_bytes());
            out.push(b'\n');
        }
        out
    }

    fn vectors_bin(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.vectors.len() * 4);
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

fn checksum(vectors: &[u8], ids: &[u8]) -> String {
    let mut buf = Vec::with_capacity(vectors.len() + ids.len());
    buf.extend_from_slice(vectors);
    buf.extend_from_slice(ids);
    format!("sha256:{}", crate::util::sha256_hex(&buf))
}

pub fn write_manifest(manifest: &EmbeddingManifest, dir: &Path) -> Result<ManifestHeader, EncoderError> {
    manifest.validate()?;
    fs::create_dir_all(dir).map_err(|e| EncoderError::io(dir, e))?;
    let ids = manifest.ids_csv();
    let vectors = manifest.vectors_bin();
    let header = ManifestHeader {
        modality: manifest.modality,
        encoder_name: manifest.encoder_name.clone(),
        dimension: manifest.dimension,
        count: manifest.len(),
        dtype: DTYPE_F32LE.to_string(),
        checksum: checksum(&vectors, &ids),
    };
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| EncoderError::io(&p, e))
    };
    write("ids.csv", &ids)?;
    write("vectors.bin", &vectors)?;
    let json = serde_json::to_string_pretty(&header).map_err(|e| EncoderError::Header(e.to_string()))?;
    write("manifest.json", json.as_bytes())?;
    Ok(header)
}

pub fn read_header(dir: &Path) -> Result<ManifestHeader, EncoderError> {
    let p = dir.join("manifest.json");
    let text = fs::read_to_string(&p).map_err(|e| EncoderError::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| EncoderError::Header(format!("{}: {e}", p.display())))
}

pub fn read_manifest(dir: &Path) -> Result<EmbeddingManifest, EncoderError> {
    let header = read_header(dir)?;
    if header.dtype != DTYPE_F32LE {
        return Err(EncoderError::Header(format!(
            "unsupported dtype {:?}",
            header.dtype
        )));
    }
    if header.dimension == 0 {
        return Err(EncoderError::Header("dimension must be positive".into()));
    }
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read(&p).map_err(|e| EncoderError::io(&p, e))
    };
    let ids_bytes = read("ids.csv")?;
    let vec_bytes = read("vectors.bin")?;

    let text = std::str::from_utf8(&ids_bytes).map_err(|_| EncoderError::Header("ids.csv is not UTF-8".into()))?;
    let mut lines = text.lines();
    if lines.next() != Some("stay_id") {
        return Err(EncoderError::Header("ids.csv must start with a stay_id header".into()));
    }
    let ids = lines
        .map(|l| {
            l.trim()
                .parse::<i64>()
                .map_err(|_| EncoderError::Header(format!("bad stay_id {l:?} in ids.csv")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if ids.len() != header.count {
        return Err(EncoderError::CountMismatch {
            header: header.count,
            found: ids.len(),
        });
    }
    if vec_bytes.len() != header.count * header.dimension * 4 {
        return Err(EncoderError::DimensionMismatch {
            expected: header.count * header.dimension * 4,
            found: vec_bytes.len(),
            context: "vectors.bin byte length".into(),
        });
    }
    let found = checksum(&vec_bytes, &ids_bytes);
    if found != header.checksum {
        return Err(EncoderError::ChecksumMismatch {
            expected: header.checksum,
            found,
        });
    }
    let vectors = vec_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    EmbeddingManifest::new(
        header.modality,
        &header.encoder_name,
        header.dimension,
        ids,
        vectors,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize, dim: usize) -> EmbeddingManifest {
        let ids = (0..n as i64).map(|i| 1000 + i * 3).collect();
        let vectors = (0..n * dim).map(|i| (i as f32 * 0.37).sin() * 1e3).collect();
        EmbeddingManifest::new(EmbeddingModality::Text, "unit", dim, ids, vectors).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample(5, 8);
        write_manifest(&m, dir.path()).unwrap();
        let back = read_manifest(dir.path()).unwrap();
        assert_eq!(back.ids, m.ids);
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.vectors), bits(&m.vectors));
        assert_eq!(back, m);
    }

    #[test]
    fn short_row_is_dimension_mismatch() {
        let rows = vec![(1, vec![0.0; 8]), (2, vec![0.0; 7])];
        assert!(matches!(
            EmbeddingManifest::from_rows(EmbeddingModality::Image, "x", 8, rows),
            Err(EncoderError::DimensionMismatch { expected: 8, found: 7, .. })
        ));
    }

    #[test]
    fn nan_is_rejected() {
        let mut v = vec![0.0f32; 6];
        v[4] = f32::NAN;
        assert!(matches!(
            EmbeddingManifest::new(EmbeddingModality::Image, "x", 3, vec![1, 2], v),
            Err(EncoderError::NonFiniteValue { stay_id: 2, index: 1 })
        ));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        assert!(matches!(
            EmbeddingManifest::new(EmbeddingModality::Image, "x", 1, vec![1, 1], vec![0.0, 0.0]),
            Err(EncoderError::DuplicateId(1))
        ));
    }
}
