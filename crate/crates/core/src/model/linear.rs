use alloc::format;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Affine map `y = x·Wᵀ + b` with `W: out × in`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

fn uniform_init(rng: &mut Rng, out_dim: usize, in_dim: usize) -> (Tensor, Tensor) {
    let bound = 1.0 / libm::sqrt(in_dim.max(1) as f64);
    let w = Tensor::from_fn(&[out_dim, in_dim], |_| rng.gen_range(-bound..=bound));
    let b = Tensor::from_fn(&[out_dim], |_| rng.gen_range(-bound..=bound));
    (w, b)
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let (w, b) = uniform_init(rng, out_dim, in_dim);
        Self {
            weight: store.add(format!("{name}.weight"), w, ParamKind::Weight),
            bias: store.add(format!("{name}.bias"), b, ParamKind::Weight),
        }
    }

    /// Redraws the parameters in place, possibly at a new size.
    pub fn reinit(&self, store: &mut ParamStore, in_dim: usize, out_dim: usize, rng: &mut Rng) {
        let (w, b) = uniform_init(rng, out_dim, in_dim);
        store.set(self.weight, w);
        store.set(self.bias, b);
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape()[1]
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w, true)?;
        tape.add_bias(y, b)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }

    pub fn num_params(&self, store: &ParamStore) -> usize {
        store.get(self.weight).len() + store.get(self.bias).len()
    }

    pub fn freeze(&self, store: &mut ParamStore) {
        store.freeze(self.weight);
        store.freeze(self.bias);
    }
}

/// Two-layer perceptron with a ReLU in between (projection head, temporal predictor).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: [usize; 3], rng: &mut Rng) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.fc1"), dims[0], dims[1], rng),
            output: Linear::new(store, &format!("{name}.fc2"), dims[1], dims[2], rng),
        }
    }

    pub fn reinit(&self, store: &mut ParamStore, rng: &mut Rng) {
        let (i, h, o) = (
            self.hidden.in_dim(store),
            self.hidden.out_dim(store),
            self.output.out_dim(store),
        );
        self.hidden.reinit(store, i, h, rng);
        self.output.reinit(store, h, o, rng);
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, store, x)?;
        let h = tape.relu(h);
        self.output.forward(tape, store, h)
    }

    pub fn ids(&self) -> [ParamId; 4] {
        let [a, b] = self.hidden.ids();
        let [c, d] = self.output.ids();
        [a, b, c, d]
    }

    pub fn duplicate(&self, store: &mut ParamStore, name: &str) -> Mlp {
        let mut copy = |id: ParamId, suffix: &str| {
            let t = store.get(id).clone();
            store.add(format!("{name}.{suffix}"), t, ParamKind::Weight)
        };
        Mlp {
            hidden: Linear {
                weight: copy(self.hidden.weight, "fc1.weight"),
                bias: copy(self.hidden.bias, "fc1.bias"),
            },
            output: Linear {
                weight: copy(self.output.weight, "fc2.weight"),
                bias: copy(self.output.bias, "fc2.bias"),
            },
        }
    }

    pub fn copy_to(&self, store: &mut ParamStore, target: &Mlp) {
        for (s, t) in self.ids().into_iter().zip(target.ids()) {
            let v = store.get(s).clone();
            store.set(t, v);
        }
    }

    pub fn freeze(&self, store: &mut ParamStore) {
        for id in self.ids() {
            store.freeze(id);
        }
    }
}
