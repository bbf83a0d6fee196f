//! Single-file container of named tensors.
//!
//! Layout: the 8-byte magic `KGTCKPT\0`, a little-endian `u32` format
//! version, a little-endian `u64` manifest length, the JSON manifest, then
//! every tensor's values as little-endian `f64` in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"KGTCKPT\0";
const VERSION: u32 = 1;

/// Position of a ChaCha8 generator, enough to resume it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// `u128` word position, kept as a decimal string for JSON.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng word position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: String,
    pub frozen: bool,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub step: u64,
    pub rng: Option<RngState>,
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<CheckpointEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    group: String,
    frozen: bool,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    step: u64,
    rng: Option<RngState>,
    meta: BTreeMap<String, String>,
    tensors: Vec<ManifestEntry>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut tensors = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            if e.data.len() != e.shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has {} values for shape {:?}",
                    e.name,
                    e.data.len(),
                    e.shape
                )));
            }
            tensors.push(ManifestEntry {
                name: e.name.clone(),
                shape: e.shape.clone(),
                group: e.group.clone(),
                frozen: e.frozen,
                offset,
            });
            offset += e.data.len() as u64;
        }
        let manifest = Manifest {
            step: self.step,
            rng: self.rng.clone(),
            meta: self.meta.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest)
            .map_err(|e| Error::Checkpoint(format!("manifest encoding: {e}")))?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for e in &self.entries {
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_owned());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + mlen).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(body)
            .map_err(|e| Error::Checkpoint(format!("manifest decoding: {e}")))?;
        let data = &bytes[20 + mlen..];
        let mut entries = Vec::with_capacity(manifest.tensors.len());
        for t in manifest.tensors {
            let n: usize = t.shape.iter().product();
            let start = t.offset as usize * 8;
            let raw = data
                .get(start..start + 8 * n)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` is truncated", t.name)))?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push(CheckpointEntry {
                name: t.name,
                shape: t.shape,
                group: t.group,
                frozen: t.frozen,
                data: values,
            });
        }
        Ok(Self {
            step: manifest.step,
            rng: manifest.rng,
            meta: manifest.meta,
            entries,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes =
            fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }
}
