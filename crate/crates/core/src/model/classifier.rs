//! Classifier that grows with the class set and the concatenated feature width.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::linear::Linear;
use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// `classes × inputs` linear classifier with weight inheritance on expansion.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpandableClassifier {
    pub linear: Linear,
}

impl ExpandableClassifier {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, classes: usize, rng: &mut Rng) -> Self {
        Self {
            linear: Linear::new(store, name, in_dim, classes, rng),
        }
    }

    pub fn classes(&self, store: &ParamStore) -> usize {
        self.linear.out_dim(store)
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        self.linear.in_dim(store)
    }

    /// Grows to `classes + new_classes` rows and `inputs + new_dims` columns.
    ///
    /// The old block is copied bit for bit and every new entry (weights and
    /// biases) is zero, so old-class logits are unchanged for any value of the
    /// new feature slice.
    pub fn expand(&self, store: &mut ParamStore, new_classes: usize, new_dims: usize) {
        let w = store.get(self.linear.weight);
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        let (nr, nc) = (rows + new_classes, cols + new_dims);
        let mut data = Vec::with_capacity(nr * nc);
        for r in 0..nr {
            for c in 0..nc {
                data.push(if r < rows && c < cols { w.data()[r * cols + c] } else { 0.0 });
            }
        }
        let mut bias = store.get(self.linear.bias).data().to_vec();
        bias.resize(nr, 0.0);
        store.set(self.linear.weight, Tensor::new(&[nr, nc], data).expect("sized"));
        store.set(self.linear.bias, Tensor::new(&[nr], bias).expect("sized"));
    }

    /// Drops input columns (after pruning the features feeding them).
    pub fn remove_inputs(&self, store: &mut ParamStore, keep: &[usize]) {
        let w = store.get(self.linear.weight);
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        let data = (0..rows)
            .flat_map(|r| keep.iter().map(move |&c| (r, c)))
            .map(|(r, c)| w.data()[r * cols + c])
            .collect();
        store.set(self.linear.weight, Tensor::new(&[rows, keep.len()], data).expect("sized"));
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        self.linear.forward(tape, store, x)
    }

    pub fn num_params(&self, store: &ParamStore) -> usize {
        self.linear.num_params(store)
    }
}
