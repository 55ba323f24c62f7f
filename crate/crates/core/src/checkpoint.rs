//! Self-describing checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 8 bytes   magic "NERDCKPT"
//! u32       container version
//! u64       header length in bytes
//! ...       header, UTF-8 JSON (see `CheckpointHeader`)
//! ...       payload: every tensor's values as f64, in header order
//! ```
//!
//! The header repeats the version, carries the model configuration, the seed,
//! the head kind and one entry per tensor (name, shape, element offset).
//! Position vectors fed to calibrators use the channel order
//! `(d_top, d_right, d_bottom, d_left)`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub const MAGIC: &[u8; 8] = b"NERDCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    /// `model` for weights only, `training` when optimizer state is included.
    pub kind: String,
    pub model: ModelConfig,
    pub seed: u64,
    pub head_kind: crate::heads::HeadKind,
    pub position_channels: Vec<String>,
    #[serde(default)]
    pub epoch: Option<usize>,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub model: ModelConfig,
    pub seed: u64,
    pub epoch: Option<usize>,
    pub arrays: Vec<NamedArray>,
    pub extra: serde_json::Value,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let tensors = self
            .arrays
            .iter()
            .map(|a| {
                let e = TensorEntry { name: a.name.clone(), shape: a.shape.clone(), offset };
                offset += a.values.len();
                e
            })
            .collect();
        let header = CheckpointHeader {
            version: FORMAT_VERSION,
            kind: self.kind.clone(),
            model: self.model.clone(),
            seed: self.seed,
            head_kind: self.model.head.kind,
            position_channels: ["d_top", "d_right", "d_bottom", "d_left"].map(String::from).to_vec(),
            epoch: self.epoch,
            tensors,
            extra: self.extra.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Config(format!("cannot encode checkpoint header: {e}")))?;
        let mut out = Vec::with_capacity(20 + json.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for a in &self.arrays {
            for v in &a.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::format(path, m);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(&format!("invalid header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(bad(&format!("header version {} does not match container", header.version)));
        }
        let payload = &bytes[20 + hlen..];
        if payload.len() % 8 != 0 {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let values: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let mut arrays = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            let slice = values.get(t.offset..t.offset + n).ok_or_else(|| bad(&format!("tensor {} runs past the payload", t.name)))?;
            arrays.push(NamedArray { name: t.name.clone(), shape: t.shape.clone(), values: slice.to_vec() });
        }
        Ok(Self { kind: header.kind, model: header.model, seed: header.seed, epoch: header.epoch, arrays, extra: header.extra })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // readers never observe a partially written file
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
