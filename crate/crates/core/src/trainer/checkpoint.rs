//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "CFCK" | u32 version
//! u64 len | model spec (UTF-8 JSON: model config + data schema)
//! u32 epoch
//! rng: 32-byte seed | u64 stream | u128 word position
//! u64 optimizer step
//! u32 count, then per parameter:
//!   u32 len | name | u32 rows | u32 cols | values | adam m | adam v   (f64)
//! ```

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CfcmlError, Result};
use crate::params::ParamStore;
use crate::tensor::Matrix;

use super::config::ModelConfig;
use super::model::ModelSchema;
use super::optim::Adam;

pub const MAGIC: &[u8; 4] = b"CFCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub config: ModelConfig,
    pub schema: ModelSchema,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub value: Matrix,
    pub m: Matrix,
    pub v: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub model_spec: String,
    pub epoch: u32,
    pub rng: RngState,
    pub optimizer_step: u64,
    pub params: Vec<ParamRecord>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CfcmlError::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let n = rows.checked_mul(cols).ok_or_else(|| CfcmlError::Checkpoint("matrix too large".into()))?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| CfcmlError::Checkpoint("matrix too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Matrix::from_vec(rows, cols, data)
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| CfcmlError::Checkpoint("invalid UTF-8 string".into()))
    }
}

fn put_matrix(out: &mut Vec<u8>, m: &Matrix) {
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn capture(
        spec: &ModelSpec,
        store: &ParamStore,
        adam: &Adam,
        epoch: u32,
        rng: &ChaCha8Rng,
    ) -> Self {
        let params = store
            .iter()
            .enumerate()
            .map(|(k, (name, value))| ParamRecord {
                name: name.to_string(),
                value: value.clone(),
                m: adam.m[k].clone(),
                v: adam.v[k].clone(),
            })
            .collect();
        Self {
            version: VERSION,
            model_spec: serde_json::to_string(spec).expect("spec serializes"),
            epoch,
            rng: RngState::capture(rng),
            optimizer_step: adam.step,
            params,
        }
    }

    pub fn spec(&self) -> Result<ModelSpec> {
        serde_json::from_str(&self.model_spec)
            .map_err(|e| CfcmlError::Checkpoint(format!("model spec: {e}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.model_spec.len() as u64).to_le_bytes());
        out.extend_from_slice(self.model_spec.as_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&self.optimizer_step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
            put_matrix(&mut out, &p.value);
            put_matrix(&mut out, &p.m);
            put_matrix(&mut out, &p.v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CfcmlError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CfcmlError::Checkpoint(format!("unsupported version {version}")));
        }
        let spec_len = r.u64()? as usize;
        let model_spec = r.string(spec_len)?;
        let epoch = r.u32()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = r.u128()?;
        let optimizer_step = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = r.string(len)?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            params.push(ParamRecord {
                name,
                value: r.matrix(rows, cols)?,
                m: r.matrix(rows, cols)?,
                v: r.matrix(rows, cols)?,
            });
        }
        if r.pos != bytes.len() {
            return Err(CfcmlError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            version,
            model_spec,
            epoch,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
            optimizer_step,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| CfcmlError::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CfcmlError::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }

    /// Fails with [`CfcmlError::ConfigMismatch`] naming the first differing
    /// field of the model spec.
    pub fn check_compatible(&self, spec: &ModelSpec) -> Result<()> {
        let stored: Value = serde_json::from_str(&self.model_spec)
            .map_err(|e| CfcmlError::Checkpoint(format!("model spec: {e}")))?;
        let current = serde_json::to_value(spec).expect("spec serializes");
        match first_difference("", &stored, &current) {
            None => Ok(()),
            Some((field, a, b)) => Err(CfcmlError::ConfigMismatch {
                field,
                checkpoint: a,
                config: b,
            }),
        }
    }

    /// Copies parameter values and optimizer moments into `store`/`adam`.
    pub fn restore(&self, store: &mut ParamStore, adam: Option<&mut Adam>) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(CfcmlError::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for (rec, &id) in self.params.iter().zip(&ids) {
            if rec.name != store.name(id) || rec.value.shape() != store.get(id).shape() {
                return Err(CfcmlError::Checkpoint(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    rec.name,
                    rec.value.shape(),
                    store.name(id),
                    store.get(id).shape()
                )));
            }
        }
        for (rec, &id) in self.params.iter().zip(&ids) {
            *store.get_mut(id) = rec.value.clone();
        }
        if let Some(adam) = adam {
            adam.step = self.optimizer_step;
            adam.m = self.params.iter().map(|p| p.m.clone()).collect();
            adam.v = self.params.iter().map(|p| p.v.clone()).collect();
        }
        Ok(())
    }

    /// Largest absolute difference between the parameter tables.
    pub fn max_param_diff(&self, other: &Checkpoint) -> Option<f64> {
        if self.params.len() != other.params.len() {
            return None;
        }
        self.params.iter().zip(&other.params).try_fold(0.0f64, |acc, (a, b)| {
            (a.name == b.name && a.value.shape() == b.value.shape())
                .then(|| acc.max(a.value.max_abs_diff(&b.value)))
        })
    }
}

fn first_difference(path: &str, a: &Value, b: &Value) -> Option<(String, String, String)> {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            keys.into_iter().find_map(|k| {
                let child = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                first_difference(&child, x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null))
            })
        }
        _ if a == b => None,
        _ => Some((path.to_string(), a.to_string(), b.to_string())),
    }
}
