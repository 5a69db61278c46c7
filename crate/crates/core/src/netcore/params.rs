//! Named parameter tensors with a trainable/frozen partition.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::mat::Mat;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    /// Hierarchical name, e.g. `video.block1.t_adapter.down.weight`.
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub trainable: bool,
}

impl ParamTensor {
    /// Rows/cols of the 2-D view: rank-1 tensors are a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, rest @ ..] => (*r, rest.iter().product()),
        }
    }

    pub fn as_mat(&self) -> Mat {
        let (r, c) = self.dims2();
        Mat::from_vec(r, c, self.values.clone())
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Flat, ordered collection of every tensor in a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<ParamTensor>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        values: Vec<f64>,
        trainable: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::shape(
                format!("parameter {name}"),
                numel,
                values.len(),
            ));
        }
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {name}")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.tensors.push(ParamTensor {
            name,
            shape,
            values,
            trainable,
        });
        Ok(id)
    }

    pub fn zeros(&mut self, name: &str, shape: Vec<usize>, trainable: bool) -> Result<ParamId> {
        let n = shape.iter().product();
        self.insert(name, shape, vec![0.0; n], trainable)
    }

    pub fn filled(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        value: f64,
        trainable: bool,
    ) -> Result<ParamId> {
        let n = shape.iter().product();
        self.insert(name, shape, vec![value; n], trainable)
    }

    pub fn normal<R: Rng>(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        std: f64,
        trainable: bool,
        rng: &mut R,
    ) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let values = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(name, shape, values, trainable)
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamTensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamTensor)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.tensors[id.0].trainable = trainable;
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors
            .iter()
            .filter(|t| t.trainable)
            .map(|t| t.name.clone())
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.trainable)
            .map(ParamTensor::numel)
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.tensors.iter().map(ParamTensor::numel).sum()
    }

    /// SHA-256 over name, shape and little-endian payload of every tensor
    /// matching `filter`, in insertion order.
    pub fn hash_where(&self, filter: impl Fn(&ParamTensor) -> bool) -> String {
        let mut h = Sha256::new();
        for t in self.tensors.iter().filter(|t| filter(t)) {
            h.update(t.name.as_bytes());
            for d in &t.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &t.values {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn frozen_hash(&self) -> String {
        self.hash_where(|t| !t.trainable)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
