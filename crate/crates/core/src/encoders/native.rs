//! Deterministic in-process encoders and per-stay aggregation rules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{EmbeddingModality, EncoderError};
use crate::ingest::NoteRecord;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn modality_tag(m: EmbeddingModality) -> u64 {
    match m {
        EmbeddingModality::Timeseries => 1,
        EmbeddingModality::Image => 2,
        EmbeddingModality::Text => 3,
    }
}

fn gaussian_vector(seed: u64, dimension: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dimension)
        .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
        .collect()
}

/// Standard-normal pseudo-random vector keyed by `(stay_id, modality, seed)`.
///
/// Carries no information about the stay beyond its identity; used as a
/// stand-in encoder and as a noise block.
pub fn reference_encode(
    stay_id: i64,
    modality: EmbeddingModality,
    dimension: usize,
    seed: u64,
) -> Vec<f32> {
    let key = splitmix64(stay_id as u64)
        ^ splitmix64(modality_tag(modality).wrapping_mul(0xA24B_AED4_963E_E407))
        ^ splitmix64(seed.wrapping_add(0x5851_F42D_4C95_7F2D));
    gaussian_vector(splitmix64(key), dimension)
}

pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

/// Mean of per-token Gaussian vectors (feature hashing). Returns `None` for
/// text without tokens.
pub fn hashed_token_encode(text: &str, dimension: usize, seed: u64) -> Option<Vec<f32>> {
    let mut acc = vec![0.0f64; dimension];
    let mut n = 0usize;
    for token in tokenize(text) {
        let v = gaussian_vector(fnv1a(token.as_bytes()) ^ splitmix64(seed), dimension);
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x as f64;
        }
        n += 1;
    }
    (n > 0).then(|| acc.into_iter().map(|a| (a / n as f64) as f32).collect())
}

/// Element-wise mean of the per-image embeddings of one stay.
pub fn aggregate_image_embeddings(vectors: &[Vec<f32>]) -> Result<Vec<f32>, EncoderError> {
    let first = vectors.first().ok_or(EncoderError::EmptyInput)?;
    let dim = first.len();
    let mut acc = vec![0.0f64; dim];
    for v in vectors {
        if v.len() != dim {
            return Err(EncoderError::DimensionMismatch {
                expected: dim,
                found: v.len(),
                context: "per-image embedding".into(),
            });
        }
        for (a, x) in acc.iter_mut().zip(v) {
            *a += *x as f64;
        }
    }
    let n = vectors.len() as f64;
    Ok(acc.into_iter().map(|a| (a / n) as f32).collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoteText {
    pub text: String,
    /// True when the stay had no notes to combine.
    pub missing: bool,
}

pub fn note_header(offset_hours: f64) -> String {
    format!("[t=+{offset_hours:.2}h]")
}

/// Concatenates notes in chronological order (ties by sequence number), each
/// preceded by a `[t=+H.HHh]` header line, separated by blank lines.
pub fn concat_notes(notes: &[NoteRecord]) -> NoteText {
    let mut ordered: Vec<&NoteRecord> = notes.iter().collect();
    ordered.sort_by(|a, b| {
        a.offset_hours
            .total_cmp(&b.offset_hours)
            .then(a.seq.cmp(&b.seq))
    });
    let text = ordered
        .iter()
        .map(|n| format!("{}\n{}", note_header(n.offset_hours), n.text.trim_end()))
        .collect::<Vec<_>>()
        .join("\n\n");
    NoteText {
        text,
        missing: notes.is_empty(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn note(seq: u32, t: f64, text: &str) -> NoteRecord {
        NoteRecord {
            seq,
            offset_hours: t,
            text: text.into(),
        }
    }

    #[test]
    fn reference_encode_is_deterministic() {
        let a = reference_encode(42, EmbeddingModality::Text, 16, 7);
        let b = reference_encode(42, EmbeddingModality::Text, 16, 7);
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
        assert_ne!(a, reference_encode(42, EmbeddingModality::Image, 16, 7));
        assert_ne!(a, reference_encode(42, EmbeddingModality::Text, 16, 8));
    }

    #[test]
    fn reference_encode_distinguishes_stays() {
        let mut seen = std::collections::HashSet::new();
        for id in 0..2000 {
            let v = reference_encode(id, EmbeddingModality::Image, 8, 1);
            let bits: Vec<u32> = v.iter().map(|x| x.to_bits()).collect();
            assert!(seen.insert(bits), "collision at stay {id}");
        }
    }

    #[test]
    fn reference_encode_moments() {
        // 10,000 draws of one coordinate: one per stay id
        let n = 10_000;
        for coord in [0usize, 5, 15] {
            let xs: Vec<f64> = (0..n)
                .map(|id| reference_encode(id, EmbeddingModality::Text, 16, 3)[coord] as f64)
                .collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!(mean.abs() < 0.05, "coord {coord} mean {mean}");
            assert!((var - 1.0).abs() < 0.1, "coord {coord} var {var}");
        }
    }

    #[test]
    fn image_mean() {
        assert_eq!(
            aggregate_image_embeddings(&[vec![1.0, 3.0], vec![3.0, 5.0]]).unwrap(),
            vec![2.0, 4.0]
        );
        let single = vec![0.25f32, -1.5];
        assert_eq!(aggregate_image_embeddings(std::slice::from_ref(&single)).unwrap(), single);
        assert!(matches!(
            aggregate_image_embeddings(&[]),
            Err(EncoderError::EmptyInput)
        ));
    }

    #[test]
    fn image_mean_matches_high_precision_oracle() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for k in 1..20 {
            let vs: Vec<Vec<f32>> = (0..k)
                .map(|_| (0..12).map(|_| rng.random_range(-100.0f32..100.0)).collect())
                .collect();
            let got = aggregate_image_embeddings(&vs).unwrap();
            for d in 0..12 {
                // Neumaier-compensated sum as the oracle
                let (mut sum, mut comp) = (0.0f64, 0.0f64);
                for v in &vs {
                    let x = v[d] as f64;
                    let t = sum + x;
                    comp += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
                    sum = t;
                }
                let want = (sum + comp) / k as f64;
                assert!((got[d] as f64 - want).abs() <= 1e-6 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn image_mean_is_permutation_invariant() {
        let vs = vec![vec![1.5f32, 2.0], vec![-3.0, 0.5], vec![7.25, 1.0]];
        let mut rev = vs.clone();
        rev.reverse();
        assert_eq!(
            aggregate_image_embeddings(&vs).unwrap(),
            aggregate_image_embeddings(&rev).unwrap()
        );
    }

    #[test]
    fn notes_are_chronological() {
        let out = concat_notes(&[note(0, 5.0, "later"), note(1, 2.0, "earlier")]);
        assert_eq!(out.text, "[t=+2.00h]\nearlier\n\n[t=+5.00h]\nlater");
        assert!(!out.missing);
    }

    #[test]
    fn equal_offsets_use_sequence_order() {
        let out = concat_notes(&[note(2, 3.0, "c"), note(0, 3.0, "a"), note(1, 3.0, "b")]);
        assert_eq!(out.text, "[t=+3.00h]\na\n\n[t=+3.00h]\nb\n\n[t=+3.00h]\nc");
    }

    #[test]
    fn no_notes_is_missing() {
        let out = concat_notes(&[]);
        assert_eq!(out.text, "");
        assert!(out.missing);
    }

    #[test]
    fn hashed_tokens_depend_on_content() {
        let a = hashed_token_encode("Right lower lobe consolidation", 32, 0).unwrap();
        let b = hashed_token_encode("right LOWER lobe, consolidation.", 32, 0).unwrap();
        let c = hashed_token_encode("lungs are clear", 32, 0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(hashed_token_encode(" ,. ", 32, 0).is_none());
    }
}
