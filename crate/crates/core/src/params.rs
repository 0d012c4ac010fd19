//! Named parameter storage and the on-disk checkpoint container.
//!
//! Checkpoint layout (JSON, documented here and in the README):
//!
//! ```json
//! {
//!   "format": "degia-checkpoint",
//!   "version": 1,
//!   "meta": { ... architecture metadata, free-form ... },
//!   "params": { "<name>": { "shape": [..], "data": [..] }, ... }
//! }
//! ```
//!
//! Values are f64 serialized with shortest-round-trip formatting, so
//! save/load is value-exact. Non-finite parameters are refused at save
//! time rather than written as invalid JSON.

use crate::error::{DegiaError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const CHECKPOINT_FORMAT: &str = "degia-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Ordered map of parameter name to tensor. Iteration order is the
/// lexicographic name order, which keeps optimizer traversal and
/// checkpoints deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| DegiaError::Checkpoint(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| DegiaError::Checkpoint(format!("missing parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }
}

/// Tape-side handles for one forward pass over a `ParamStore`.
#[derive(Debug, Clone, Default)]
pub struct ParamBinding {
    vars: BTreeMap<String, Var>,
}

impl ParamBinding {
    /// Insert every parameter as a tape leaf. `trainable` decides whether
    /// gradients flow; frozen passes (adversarial ascent) bind with `false`.
    pub fn bind(tape: &mut Tape, store: &ParamStore, trainable: bool) -> Self {
        let mut vars = BTreeMap::new();
        for (name, tensor) in store.iter() {
            vars.insert(name.to_string(), tape.leaf(tensor.clone(), trainable));
        }
        ParamBinding { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| DegiaError::Checkpoint(format!("unbound parameter {name:?}")))
    }

    /// Bind every parameter detached except `name`, which maps to an
    /// existing tape variable. Used to probe one parameter's gradient in
    /// isolation (finite-difference checks).
    pub fn bind_with_override(tape: &mut Tape, store: &ParamStore, name: &str, var: Var) -> Self {
        let mut vars = BTreeMap::new();
        for (pname, tensor) in store.iter() {
            if pname == name {
                vars.insert(pname.to_string(), var);
            } else {
                vars.insert(pname.to_string(), tape.leaf(tensor.clone(), false));
            }
        }
        ParamBinding { vars }
    }

    /// Collect gradients after a backward pass; untouched parameters get
    /// zero gradients.
    pub fn gradients(&self, tape: &Tape, store: &ParamStore) -> Result<BTreeMap<String, Vec<f64>>> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.vars {
            let g = match tape.grad(*var) {
                Some(g) => g.to_vec(),
                None => vec![0.0; store.get(name)?.len()],
            };
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    #[serde(default)]
    meta: serde_json::Value,
    params: BTreeMap<String, ParamRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamRecord {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub fn save_checkpoint(store: &ParamStore, meta: &serde_json::Value, path: &Path) -> Result<()> {
    let mut params = BTreeMap::new();
    for (name, tensor) in store.iter() {
        tensor.check_finite(&format!("checkpoint parameter {name:?}"))?;
        params.insert(
            name.to_string(),
            ParamRecord { shape: tensor.shape().to_vec(), data: tensor.data().to_vec() },
        );
    }
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        meta: meta.clone(),
        params,
    };
    let bytes = serde_json::to_vec(&file)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let bytes = std::fs::read(path)?;
    let file: CheckpointFile = serde_json::from_slice(&bytes)?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(DegiaError::Format(format!(
            "not a {CHECKPOINT_FORMAT} file: format field is {:?}",
            file.format
        )));
    }
    if file.version != CHECKPOINT_VERSION {
        return Err(DegiaError::Format(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            file.version
        )));
    }
    let mut store = ParamStore::new();
    for (name, rec) in file.params {
        store.insert(name, Tensor::new(rec.shape, rec.data)?);
    }
    Ok((store, file.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_roundtrip_is_value_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        // awkward values on purpose: subnormals, tiny, huge, negative zero
        let data: Vec<f64> = (0..64)
            .map(|i| match i % 5 {
                0 => rng.gen_range(-1.0..1.0),
                1 => f64::MIN_POSITIVE * rng.gen_range(0.5..2.0),
                2 => -0.0,
                3 => 1e300 * rng.gen_range(0.1..1.0),
                _ => rng.gen_range(-1e-12..1e-12),
            })
            .collect();
        store.insert("w", Tensor::new(vec![8, 8], data).unwrap());
        store.insert("b", Tensor::new(vec![3], vec![0.1, -2.5, 1.0 / 3.0]).unwrap());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let meta = serde_json::json!({"kind": "test"});
        save_checkpoint(&store, &meta, &path).unwrap();
        let (loaded, meta2) = load_checkpoint(&path).unwrap();
        assert_eq!(meta2["kind"], "test");
        for (name, t) in store.iter() {
            let l = loaded.get(name).unwrap();
            assert_eq!(l.shape(), t.shape());
            let same_bits = l
                .data()
                .iter()
                .zip(t.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same_bits, "parameter {name} not bit-identical after roundtrip");
        }
    }

    #[test]
    fn non_finite_parameters_are_refused() {
        let mut store = ParamStore::new();
        store.insert("bad", Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let res = save_checkpoint(&store, &serde_json::Value::Null, &dir.path().join("x.json"));
        assert!(matches!(res, Err(DegiaError::NonFinite { .. })));
    }

    #[test]
    fn wrong_format_field_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, br#"{"format":"other","version":1,"params":{}}"#).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(DegiaError::Format(_))));
    }
}
