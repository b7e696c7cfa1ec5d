//! Model checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "HCUECKPT"
//! version  u32
//! hlen     u32      length of the JSON header
//! header   hlen bytes of UTF-8 JSON
//! blocks   raw f32 values of every tensor, in header order
//! digest   32 bytes SHA-256 of everything above
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TensorError};
use crate::params::Params;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"HCUECKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub seed: u64,
    pub rng: String,
    pub hyperparameters: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub seed: u64,
    pub hyperparameters: serde_json::Value,
    pub params: Params,
}

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            seed: self.seed,
            rng: crate::rng::ALGORITHM.to_string(),
            hyperparameters: self.hyperparameters.clone(),
            tensors: self
                .params
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let hjson = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + hjson.len() + self.params.numel() * 4 + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
        out.extend_from_slice(&hjson);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 + 32 {
            return Err(bad("file too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        if &body[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(body[12..16].try_into().unwrap()) as usize;
        let hend = 16 + hlen;
        if body.len() < hend {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[16..hend]).map_err(|e| bad(e.to_string()))?;
        let mut params = Params::new();
        let mut pos = hend;
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let end = pos + n * 4;
            if body.len() < end {
                return Err(bad(format!("truncated block `{}`", entry.name)));
            }
            let data = body[pos..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.add(entry.name, Tensor::new(&entry.shape, data)?);
            pos = end;
        }
        if pos != body.len() {
            return Err(bad("trailing bytes after parameter blocks"));
        }
        Ok(Self {
            kind: header.kind,
            seed: header.seed,
            hyperparameters: header.hyperparameters,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
