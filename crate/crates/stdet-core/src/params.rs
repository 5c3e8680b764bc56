//! Named parameter storage and checkpointing.
//!
//! Parameters live outside the tape (the tape is rebuilt every step); a
//! [`ParamStore`] owns the master copies and hands out tape leaves per
//! forward pass. Checkpoints are a flat little-endian f32 blob plus a JSON
//! manifest of (name, shape, byte offset, sha256) records.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use rand::distributions::{Distribution, Uniform};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::{Adam, Elem, Tape, Var};

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("parameter '{0}' already registered")]
    Duplicate(String),
    #[error("unknown parameter '{0}'")]
    Unknown(String),
    #[error("parameter '{name}': shape {shape:?} wants {expected} values, got {got}")]
    SizeMismatch {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Manifest(String),
    #[error("checksum mismatch for parameter '{0}'")]
    Checksum(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, ParamError>;

#[derive(Debug, Clone)]
struct Entry<S> {
    shape: Vec<usize>,
    values: Vec<S>,
}

/// Ordered collection of named parameter arrays. Insertion order is the
/// serialization order, so checkpoints are deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S: Elem> {
    entries: IndexMap<String, Entry<S>>,
}

/// One checkpoint manifest row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the flat blob.
    pub offset: u64,
    /// sha256 of this entry's bytes, hex.
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub total_bytes: u64,
    pub entries: Vec<ManifestEntry>,
}

/// Map from parameter name to the tape leaf created for it in the current
/// forward pass. Produced by [`ParamStore::bind`].
#[derive(Debug, Clone, Default)]
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Points `name` at a different tape leaf (used to splice externally
    /// created leaves, e.g. by the gradient checker).
    pub fn insert(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }
}

impl<S: Elem> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], values: Vec<S>) -> Result<()> {
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(ParamError::SizeMismatch {
                name: name.to_string(),
                shape: shape.to_vec(),
                expected,
                got: values.len(),
            });
        }
        if self.entries.contains_key(name) {
            return Err(ParamError::Duplicate(name.to_string()));
        }
        self.entries.insert(
            name.to_string(),
            Entry {
                shape: shape.to_vec(),
                values,
            },
        );
        Ok(())
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        let n: usize = shape.iter().product();
        self.add(name, shape, vec![S::ZERO; n])
    }

    pub fn add_ones(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        let n: usize = shape.iter().product();
        self.add(name, shape, vec![S::ONE; n])
    }

    /// Kaiming-uniform init: U(-b, b) with b = sqrt(6 / fan_in).
    pub fn add_kaiming(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let n: usize = shape.iter().product();
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let values = (0..n).map(|_| S::from_f64(dist.sample(rng))).collect();
        self.add(name, shape, values)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn shape(&self, name: &str) -> Result<&[usize]> {
        self.entries
            .get(name)
            .map(|e| e.shape.as_slice())
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    pub fn values(&self, name: &str) -> Result<&[S]> {
        self.entries
            .get(name)
            .map(|e| e.values.as_slice())
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    pub fn values_mut(&mut self, name: &str) -> Result<&mut [S]> {
        self.entries
            .get_mut(name)
            .map(|e| e.values.as_mut_slice())
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn total_values(&self) -> usize {
        self.entries.values().map(|e| e.values.len()).sum()
    }

    /// Pushes every parameter onto the tape as a trainable leaf, in
    /// insertion order, and returns the name→Var map.
    pub fn bind(&self, tape: &mut Tape<S>) -> Binding {
        let mut vars = BTreeMap::new();
        for (name, e) in &self.entries {
            let v = tape.leaf(&e.shape, e.values.clone(), true);
            vars.insert(name.clone(), v);
        }
        Binding { vars }
    }

    /// One optimizer step: reads gradients for every bound parameter off
    /// the tape and applies Adam updates to the master copies. Parameters
    /// whose leaves received no gradient are skipped.
    pub fn apply_grads(
        &mut self,
        tape: &Tape<S>,
        binding: &Binding,
        opt: &mut Adam<S>,
    ) -> Result<()> {
        opt.begin_step();
        for (name, var) in binding.iter() {
            if let Some(grad) = tape.grad(var) {
                let grad = grad.to_vec();
                let param = self.values_mut(name)?;
                opt.update(name, param, &grad)?;
            }
        }
        Ok(())
    }

    /// Writes `params.bin` and `manifest.json` into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut blob: Vec<u8> = Vec::with_capacity(self.total_values() * 4);
        let mut entries = Vec::with_capacity(self.entries.len());
        for (name, e) in &self.entries {
            let offset = blob.len() as u64;
            let start = blob.len();
            for &v in &e.values {
                blob.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            }
            let sha256 = hex(&Sha256::digest(&blob[start..]));
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: e.shape.clone(),
                offset,
                sha256,
            });
        }
        let manifest = CheckpointManifest {
            total_bytes: blob.len() as u64,
            entries,
        };
        let mut f = fs::File::create(dir.join("params.bin"))?;
        f.write_all(&blob)?;
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| ParamError::Manifest(e.to_string()))?;
        fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }

    /// Reads a checkpoint written by [`save_checkpoint`]. Checksums are
    /// verified; a corrupt blob is rejected.
    ///
    /// [`save_checkpoint`]: ParamStore::save_checkpoint
    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let json = fs::read_to_string(&manifest_path)?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&json).map_err(|e| ParamError::Manifest(e.to_string()))?;
        let blob = fs::read(dir.join("params.bin"))?;
        if blob.len() as u64 != manifest.total_bytes {
            return Err(ParamError::Manifest(format!(
                "blob is {} bytes, manifest says {}",
                blob.len(),
                manifest.total_bytes
            )));
        }
        let mut store = ParamStore::new();
        for e in &manifest.entries {
            let count: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + count * 4;
            if end > blob.len() {
                return Err(ParamError::Manifest(format!(
                    "entry '{}' runs past end of blob",
                    e.name
                )));
            }
            let bytes = &blob[start..end];
            if hex(&Sha256::digest(bytes)) != e.sha256 {
                return Err(ParamError::Checksum(e.name.clone()));
            }
            let values: Vec<S> = bytes
                .chunks_exact(4)
                .map(|c| S::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            store.add(&e.name, &e.shape, values)?;
        }
        Ok(store)
    }
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn round_trip_preserves_values_and_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store: ParamStore<f32> = ParamStore::new();
        store.add_kaiming("b.w", &[4, 3], 3, &mut rng).unwrap();
        store.add_zeros("a.bias", &[4]).unwrap();
        store.add_ones("c.gamma", &[7]).unwrap();

        let dir = tempfile::tempdir().unwrap();
        store.save_checkpoint(dir.path()).unwrap();
        let loaded: ParamStore<f32> = ParamStore::load_checkpoint(dir.path()).unwrap();

        let names: Vec<&str> = loaded.names().collect();
        assert_eq!(names, vec!["b.w", "a.bias", "c.gamma"]);
        for name in ["b.w", "a.bias", "c.gamma"] {
            assert_eq!(store.values(name).unwrap(), loaded.values(name).unwrap());
            assert_eq!(store.shape(name).unwrap(), loaded.shape(name).unwrap());
        }
    }

    #[test]
    fn corrupt_blob_is_rejected() {
        let mut store: ParamStore<f32> = ParamStore::new();
        store.add("w", &[2], vec![1.0, 2.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        store.save_checkpoint(dir.path()).unwrap();
        let bin = dir.path().join("params.bin");
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&bin, bytes).unwrap();
        let err = ParamStore::<f32>::load_checkpoint(dir.path()).unwrap_err();
        assert!(matches!(err, ParamError::Checksum(_)));
    }

    #[test]
    fn duplicate_and_size_errors() {
        let mut store: ParamStore<f32> = ParamStore::new();
        store.add("w", &[2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            store.add("w", &[2], vec![0.0, 0.0]),
            Err(ParamError::Duplicate(_))
        ));
        assert!(matches!(
            store.add("v", &[3], vec![0.0]),
            Err(ParamError::SizeMismatch { .. })
        ));
    }

    #[test]
    fn same_seed_same_init() {
        let mk = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut s: ParamStore<f32> = ParamStore::new();
            s.add_kaiming("w", &[8, 8], 8, &mut rng).unwrap();
            s
        };
        assert_eq!(mk().values("w").unwrap(), mk().values("w").unwrap());
    }

    #[test]
    fn apply_grads_moves_parameters() {
        let mut store: ParamStore<f32> = ParamStore::new();
        store.add("w", &[2], vec![1.0, -1.0]).unwrap();
        let mut tape: Tape<f32> = Tape::new();
        let b = store.bind(&mut tape);
        let w = b.var("w");
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        let mut opt = Adam::new(Default::default());
        store.apply_grads(&tape, &b, &mut opt).unwrap();
        let w = store.values("w").unwrap();
        assert!(w[0] < 1.0 && w[1] < -1.0);
    }
}
