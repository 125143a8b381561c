//! Named parameter storage and the SGD optimizer.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub u32);

/// Weights take gradients; buffers (normalization running statistics) do not.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub frozen: bool,
}

#[derive(Clone, Debug)]
struct Entry {
    meta: ParamMeta,
    tensor: Tensor,
}

/// Flat registry of every parameter array in a learner, addressed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, kind: ParamKind) -> ParamId {
        let id = ParamId(self.entries.len() as u32);
        self.entries.push(Entry {
            meta: ParamMeta {
                name: name.into(),
                shape: tensor.shape().to_vec(),
                kind,
                frozen: false,
            },
            tensor,
        });
        id
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0 as usize].tensor
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0 as usize].tensor
    }

    /// Replaces a tensor, possibly with a different shape.
    pub fn set(&mut self, id: ParamId, tensor: Tensor) {
        let e = &mut self.entries[id.0 as usize];
        e.meta.shape = tensor.shape().to_vec();
        e.tensor = tensor;
    }

    pub fn meta(&self, id: ParamId) -> &ParamMeta {
        &self.entries[id.0 as usize].meta
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0 as usize].meta.name
    }

    pub fn freeze(&mut self, id: ParamId) {
        self.entries[id.0 as usize].meta.frozen = true;
    }

    pub fn unfreeze(&mut self, id: ParamId) {
        self.entries[id.0 as usize].meta.frozen = false;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0 as usize].meta.frozen
    }

    /// True when the optimizer may update this entry.
    pub fn is_trainable(&self, id: ParamId) -> bool {
        let m = &self.entries[id.0 as usize].meta;
        !m.frozen && m.kind == ParamKind::Weight
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len() as u32).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamMeta, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i as u32), &e.meta, &e.tensor))
    }

    /// Rebuilds a store from exported metadata and tensors (checkpoint restore).
    pub fn from_parts(parts: Vec<(ParamMeta, Tensor)>) -> Result<Self> {
        let mut entries = Vec::with_capacity(parts.len());
        for (meta, tensor) in parts {
            if meta.shape.as_slice() != tensor.shape() {
                return Err(Error::shape("ParamStore::from_parts", &meta.shape, tensor.shape()));
            }
            entries.push(Entry { meta, tensor });
        }
        Ok(Self { entries })
    }

    /// Snapshot of a subset of entries, for bitwise comparisons in tests.
    pub fn clone_tensors(&self, ids: &[ParamId]) -> Vec<Tensor> {
        ids.iter().map(|&id| self.get(id).clone()).collect()
    }
}

/// Gradients keyed by parameter, accumulated over every use of the parameter in a tape.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads {
    grads: BTreeMap<ParamId, Tensor>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.grads.contains_key(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        match self.grads.get_mut(&id) {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => {
                self.grads.insert(id, g.clone());
            }
        }
    }
}

/// Stochastic gradient descent with heavy-ball momentum and coupled weight decay.
///
/// Parameters without a gradient entry in a step are left untouched, including
/// their momentum, so a module that no loss reaches stays bit-stable.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<ParamId, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        for (&id, g) in grads.iter() {
            if !store.is_trainable(id) {
                continue;
            }
            let p = store.get_mut(id);
            if p.len() != g.len() {
                // Shape changed since the tape was recorded; skip rather than corrupt.
                continue;
            }
            let v = self
                .velocity
                .entry(id)
                .or_insert_with(|| alloc::vec![0.0; g.len()]);
            if v.len() != g.len() {
                *v = alloc::vec![0.0; g.len()];
            }
            for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                let d = gi + self.weight_decay * *w;
                *vi = self.momentum * *vi + d;
                *w -= self.lr * *vi;
            }
        }
    }
}

/// Cosine-annealed learning rate for `epoch` of `epochs`, reaching zero after the last epoch.
pub fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs == 0 {
        return base;
    }
    0.5 * base * (1.0 + libm::cos(core::f64::consts::PI * epoch as f64 / epochs as f64))
}
