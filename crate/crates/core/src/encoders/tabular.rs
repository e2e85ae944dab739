//! Frozen sentence embedders for tabular attributes.
//!
//! Each attribute is rendered to a sentence and embedded into a 512-dim row.
//! Embedders are frozen: the resulting matrix always enters the model as a
//! constant, so no gradient ever reaches them.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::dataio::{TabularRecord, TemplateTable};
use crate::error::{CfcmlError, Result};
use crate::tensor::Matrix;

pub const EMBED_DIM: usize = 512;

pub trait SentenceEmbedder: Send + Sync {
    fn dim(&self) -> usize {
        EMBED_DIM
    }

    fn embed(&self, sentence: &str) -> Result<Vec<f64>>;
}

/// Signed hashing-trick bag of words, L2-normalized.
///
/// Tokens are lower-cased alphanumeric runs. Token `w` adds `±1` to bucket
/// `fnv1a64(w) mod 512`, with the sign taken from bit 63 of the hash
/// (set = negative).
#[derive(Clone, Copy, Debug, Default)]
pub struct HashEmbedder;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn tokenize(sentence: &str) -> Vec<String> {
    sentence
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl SentenceEmbedder for HashEmbedder {
    fn embed(&self, sentence: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; EMBED_DIM];
        for token in tokenize(sentence) {
            let h = fnv1a64(token.as_bytes());
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            v[(h % EMBED_DIM as u64) as usize] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
}

/// Sentence → vector table loaded from disk, e.g. embeddings produced
/// offline by a pretrained text encoder.
///
/// File format: UTF-8 lines `sentence<TAB>v1 v2 … v512`.
#[derive(Clone, Debug, Default)]
pub struct PrecomputedEmbedder {
    table: HashMap<String, Vec<f64>>,
}

impl PrecomputedEmbedder {
    pub fn parse(text: &str) -> Result<Self> {
        let mut table = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (sentence, values) = line.split_once('\t').ok_or_else(|| {
                CfcmlError::Config(format!("embedding line {} lacks a tab", i + 1))
            })?;
            let vector = values
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| CfcmlError::Config(format!("embedding line {}: {e}", i + 1)))?;
            if vector.len() != EMBED_DIM {
                return Err(CfcmlError::Config(format!(
                    "embedding line {} has {} values, expected {EMBED_DIM}",
                    i + 1,
                    vector.len()
                )));
            }
            table.insert(sentence.to_string(), vector);
        }
        Ok(Self { table })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CfcmlError::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl SentenceEmbedder for PrecomputedEmbedder {
    fn embed(&self, sentence: &str) -> Result<Vec<f64>> {
        self.table
            .get(sentence)
            .cloned()
            .ok_or_else(|| CfcmlError::Config(format!("no precomputed embedding for `{sentence}`")))
    }
}

/// `t × 512` embedding of one record, one row per attribute sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularEmbedding(pub Matrix);

impl TabularEmbedding {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

pub fn embed_tabular(
    record: &TabularRecord,
    templates: &TemplateTable,
    embedder: &dyn SentenceEmbedder,
) -> Result<TabularEmbedding> {
    let rows = record
        .iter()
        .map(|(name, value)| {
            let sentence = templates.render(name, value)?;
            let row = embedder.embed(&sentence)?;
            if row.len() != embedder.dim() {
                return Err(CfcmlError::Shape(format!(
                    "embedder returned {} values for `{sentence}`",
                    row.len()
                )));
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TabularEmbedding(Matrix::from_rows(&rows)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> TabularRecord {
        TabularRecord::new(vec![
            ("sex".into(), "female".into()),
            ("management".into(), "excision".into()),
            ("lesion location".into(), "back".into()),
            ("lesion elevation".into(), "palpable".into()),
            ("level of diagnostic difficulty".into(), "low".into()),
        ])
        .unwrap()
    }

    #[test]
    fn one_row_per_attribute() {
        let e = embed_tabular(&record(), &TemplateTable::standard(), &HashEmbedder).unwrap();
        assert_eq!(e.matrix().shape(), (5, 512));
        let again = embed_tabular(&record(), &TemplateTable::standard(), &HashEmbedder).unwrap();
        assert_eq!(e, again);
    }

    #[test]
    fn fnv_reference_values() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    /// Expected buckets computed by an independent Python re-implementation
    /// of the hashing scheme.
    #[test]
    fn hash_embedding_of_reference_sentence() {
        let v = HashEmbedder.embed("The sex of patient is male").unwrap();
        let k = 1.0 / 6f64.sqrt();
        let expected = [(135, -k), (264, k), (318, k), (380, k), (432, k), (469, k)];
        let nonzero: Vec<(usize, f64)> = v
            .iter()
            .enumerate()
            .filter(|(_, x)| **x != 0.0)
            .map(|(i, x)| (i, *x))
            .collect();
        assert_eq!(nonzero.len(), expected.len());
        for ((i, x), (ei, ex)) in nonzero.iter().zip(expected) {
            assert_eq!(*i, ei);
            assert!((x - ex).abs() < 1e-12);
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn template_errors_propagate() {
        let r = TabularRecord::new(vec![("blood type".into(), "A".into())]).unwrap();
        assert!(matches!(
            embed_tabular(&r, &TemplateTable::standard(), &HashEmbedder),
            Err(CfcmlError::UnknownAttribute(_))
        ));
    }

    #[test]
    fn precomputed_table_round_trip() {
        let v: Vec<String> = (0..512).map(|i| format!("{}", i as f64 / 512.0)).collect();
        let text = format!("The sex of patient is male\t{}\n", v.join(" "));
        let emb = PrecomputedEmbedder::parse(&text).unwrap();
        assert_eq!(emb.len(), 1);
        let row = emb.embed("The sex of patient is male").unwrap();
        assert_eq!(row[511], 511.0 / 512.0);
        assert!(emb.embed("The sex of patient is female").is_err());
        assert!(PrecomputedEmbedder::parse("x\t1 2 3").is_err());
    }
}
