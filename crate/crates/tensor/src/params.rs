use sha2::{Digest, Sha256};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered parameter store for one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Ids whose names start with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.names
            .iter()
            .enumerate()
            .filter(move |(_, n)| n.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces values from `other` for every name present in both stores.
    pub fn load_matching(&mut self, other: &Params) -> Result<usize> {
        let mut n = 0;
        for (name, t) in other.iter() {
            if let Some(id) = self.id_of(name) {
                let dst = &mut self.tensors[id.0];
                if dst.shape() != t.shape() {
                    return Err(TensorError::ParamShape {
                        name: name.to_string(),
                        expected: dst.shape().to_vec(),
                        found: t.shape().to_vec(),
                    });
                }
                *dst = t.clone();
                n += 1;
            }
        }
        Ok(n)
    }

    /// SHA-256 over names, shapes and raw little-endian values of the
    /// selected parameters (all of them when `ids` is `None`).
    pub fn checksum_of(&self, ids: Option<&[ParamId]>) -> String {
        let mut h = Sha256::new();
        let all: Vec<ParamId> = self.ids().collect();
        for id in ids.unwrap_or(&all) {
            h.update(self.names[id.0].as_bytes());
            for d in self.tensors[id.0].shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in self.tensors[id.0].data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn checksum(&self) -> String {
        self.checksum_of(None)
    }
}
