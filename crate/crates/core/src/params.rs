//! Named parameter storage and checkpoint container.
//!
//! Checkpoints reuse the `FieldPack` framing: an 8-byte little-endian length,
//! a JSON manifest listing every tensor's name and shape in name order, and
//! the tensors' values concatenated as little-endian `f32`.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::fields::{read_container, write_container, DTYPE_F32LE};
use crate::rng::Rng;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Arc<Tensor>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    dtype: String,
    entries: Vec<ManifestEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

const FORMAT_TAG: &str = "paramstore";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), Arc::new(t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name).map(|t| t.as_ref())
    }

    pub(crate) fn shared(&self, name: &str) -> Option<Arc<Tensor>> {
        self.tensors.get(name).cloned()
    }

    /// Mutable access, cloning the tensor if a graph still holds it.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name).map(Arc::make_mut)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors
            .remove(name)
            .map(|t| Arc::try_unwrap(t).unwrap_or_else(|a| (*a).clone()))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k, v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Copies every entry of `other` under `prefix.`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore) {
        for (k, v) in &other.tensors {
            self.tensors.insert(format!("{prefix}.{k}"), v.clone());
        }
    }

    /// Entries under `prefix.`, with the prefix stripped.
    pub fn sub_store(&self, prefix: &str) -> ParamStore {
        let p = format!("{prefix}.");
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Rounds every value to the nearest `f32`, so a checkpoint round trip is
    /// exact.
    pub fn quantize_f32(&mut self) {
        for t in self.tensors.values_mut() {
            Arc::make_mut(t).data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let manifest = Manifest {
            format: FORMAT_TAG.into(),
            dtype: DTYPE_F32LE.into(),
            entries: self
                .tensors
                .iter()
                .map(|(name, t)| ManifestEntry {
                    name: name.clone(),
                    rows: t.rows,
                    cols: t.cols,
                })
                .collect(),
            meta,
        };
        write_container(
            path,
            &manifest,
            self.tensors.values().flat_map(|t| t.data.iter().map(|&v| v as f32)),
        )
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (raw, payload) = read_container(path)?;
        let manifest: Manifest = serde_json::from_value(raw).map_err(|e| Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if manifest.format != FORMAT_TAG {
            return Err(Error::MalformedHeader {
                path: path.to_path_buf(),
                reason: format!("not a parameter checkpoint (format {:?})", manifest.format),
            });
        }
        if manifest.dtype != DTYPE_F32LE {
            return Err(Error::DtypeMismatch {
                path: path.to_path_buf(),
                found: manifest.dtype,
            });
        }
        let total: usize = manifest.entries.iter().map(|e| e.rows * e.cols).sum();
        if payload.len() < total * 4 {
            return Err(Error::TruncatedPayload {
                path: path.to_path_buf(),
                expected: total as u64 * 4,
                found: payload.len() as u64,
            });
        }
        let values = crate::fields::decode_f32le(&payload);
        let mut store = ParamStore::new();
        let mut offset = 0;
        for e in manifest.entries {
            let n = e.rows * e.cols;
            let data = values[offset..offset + n].iter().map(|&v| v as f64).collect();
            store.insert(e.name, Tensor::new(e.rows, e.cols, data));
            offset += n;
        }
        Ok((store, manifest.meta))
    }

    /// Maximum absolute difference over matching entries; `None` if the
    /// stores hold different names or shapes.
    pub fn max_abs_diff(&self, other: &ParamStore) -> Option<f64> {
        if self.tensors.len() != other.tensors.len() {
            return None;
        }
        let mut worst = 0.0f64;
        for ((ka, a), (kb, b)) in self.tensors.iter().zip(&other.tensors) {
            if ka != kb || a.shape() != b.shape() {
                return None;
            }
            for (x, y) in a.data.iter().zip(&b.data) {
                worst = worst.max((x - y).abs());
            }
        }
        Some(worst)
    }
}

/// Parameter initialisers.
pub mod init {
    use super::*;

    /// Glorot-uniform `fan_in x fan_out` matrix.
    pub fn xavier(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-limit..limit))
    }

    pub fn normal(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(rows, cols, |_, _| dist.sample(rng))
    }

    pub fn uniform(rng: &mut Rng, rows: usize, cols: usize, limit: f64) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-limit..limit))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip_is_exact_after_quantisation() {
        let mut rng = crate::rng::stream(1, "params-test");
        let mut store = ParamStore::new();
        store.insert("b.w", init::normal(&mut rng, 3, 5, 0.7));
        store.insert("a.bias", init::normal(&mut rng, 1, 5, 0.1));
        store.quantize_f32();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.fpk");
        store.save(&path, serde_json::json!({"epoch": 3})).unwrap();
        let (back, meta) = ParamStore::load(&path).unwrap();
        assert_eq!(back, store);
        assert_eq!(meta["epoch"], 3);
        let again = dir.path().join("ck2.fpk");
        back.save(&again, serde_json::json!({"epoch": 3})).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn prefixes() {
        let mut inner = ParamStore::new();
        inner.insert("w", Tensor::scalar(1.0));
        let mut outer = ParamStore::new();
        outer.extend_prefixed("enc", &inner);
        assert!(outer.contains("enc.w"));
        assert_eq!(outer.sub_store("enc"), inner);
    }
}
