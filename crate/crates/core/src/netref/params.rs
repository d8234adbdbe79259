//! Named parameter tensors with seeded, order-independent initialization.
//!
//! Each tensor draws from its own ChaCha8 stream seeded with
//! `splitmix64(store_seed ^ fnv1a64(name))`, so adding a layer never shifts
//! the values of the others. Values are uniform in `±1/sqrt(fan_in)`.
//!
//! On disk a store is a JSON manifest listing `{name, shape, seed, offset}`
//! per tensor plus one little-endian float64 payload file, so other
//! implementations can load identical weights.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

pub fn fnv1a64(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    seed: u64,
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            tensors: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tensor_seed(&self, name: &str) -> u64 {
        splitmix64(self.seed ^ fnv1a64(name))
    }

    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(self.tensor_seed(name));
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.tensors.insert(
            name.to_string(),
            Tensor {
                shape: shape.to_vec(),
                data,
            },
        );
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::shape(name, "parameter missing from store"))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// Shape-checked lookup.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self.get(name)?;
        if t.shape != shape {
            return Err(Error::shape(
                name,
                format!("expected shape {shape:?}, store has {:?}", t.shape),
            ));
        }
        Ok(t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Write `manifest` (JSON) and its payload next to it (`.bin`).
    /// `extra` is stored verbatim under the `model` key.
    pub fn save(&self, manifest: &Path, extra: serde_json::Value) -> Result<()> {
        let payload_path = manifest.with_extension("bin");
        let payload_name = payload_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut payload = Vec::with_capacity(self.num_values() * 8);
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape.clone(),
                seed: self.tensor_seed(name),
                offset: payload.len() / 8,
            });
            for v in &t.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let m = Manifest {
            format: MANIFEST_FORMAT.into(),
            seed: self.seed,
            dtype: "f64le".into(),
            payload: payload_name,
            model: extra,
            tensors: entries,
        };
        let mut text = serde_json::to_string_pretty(&m)?;
        text.push('\n');
        std::fs::write(manifest, text).map_err(|e| Error::io(manifest, e))?;
        std::fs::write(&payload_path, payload).map_err(|e| Error::io(&payload_path, e))
    }

    /// Load a store and the `model` metadata saved with it.
    pub fn load(manifest: &Path) -> Result<(ParamStore, serde_json::Value)> {
        let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            field: "manifest",
            detail: e.to_string(),
        })?;
        if m.format != MANIFEST_FORMAT || m.dtype != "f64le" {
            return Err(Error::Format {
                field: "format",
                detail: format!("{} / {}", m.format, m.dtype),
            });
        }
        let dir = manifest.parent().map(Path::to_path_buf).unwrap_or_else(PathBuf::new);
        let payload_path = dir.join(&m.payload);
        let bytes = std::fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut store = ParamStore::new(m.seed);
        for e in m.tensors {
            let n: usize = e.shape.iter().product();
            let data = values.get(e.offset..e.offset + n).ok_or_else(|| {
                Error::Size(format!("tensor {} runs past end of payload", e.name))
            })?;
            store.insert(
                &e.name,
                Tensor {
                    shape: e.shape,
                    data: data.to_vec(),
                },
            );
        }
        Ok((store, m.model))
    }
}

const MANIFEST_FORMAT: &str = "infilmap-params/1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    seed: u64,
    dtype: String,
    payload: String,
    model: serde_json::Value,
    tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    seed: u64,
    offset: usize,
}
