//! Convolutional feature extractor exposing both the spatial map and its pooled vector.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchMoments, NormStats, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Stack of stride-2 `3×3` conv / batch-norm / ReLU blocks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub image_size: usize,
    pub widths: Vec<usize>,
}

impl BackboneSpec {
    /// Four blocks of 32/64/128/128 channels on 32×32 RGB: a 2×2×128 map.
    pub fn desk() -> Self {
        Self {
            in_channels: 3,
            image_size: 32,
            widths: alloc::vec![32, 64, 128, 128],
        }
    }

    pub fn output_dim(&self) -> usize {
        self.widths.last().copied().unwrap_or(self.in_channels)
    }

    /// Side length of the output map.
    pub fn spatial(&self) -> usize {
        self.widths.iter().fold(self.image_size, |s, _| (s - 1) / 2 + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.in_channels == 0 || self.image_size == 0 {
            return Err(Error::arg("backbone needs at least one block of nonzero width"));
        }
        Ok(())
    }
}

/// How batch normalization behaves during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMode {
    /// Batch statistics, running statistics updated.
    Train,
    /// Batch statistics, running statistics left alone.
    BatchStats,
    /// Stored running statistics; the forward pass is a pure function.
    Eval,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub conv: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl ConvBlock {
    pub fn ids(&self) -> [ParamId; 5] {
        [self.conv, self.gamma, self.beta, self.running_mean, self.running_var]
    }
}

/// Spatial map `[B, H, W, d]` and pooled vector `[B, d]`.
#[derive(Clone, Copy, Debug)]
pub struct Features {
    pub spatial: Var,
    pub pooled: Var,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extractor {
    pub name: String,
    pub spec: BackboneSpec,
    pub blocks: Vec<ConvBlock>,
}

fn kaiming(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let fan_out = shape[0] * shape[2] * shape[3];
    let normal = Normal::new(0.0, libm::sqrt(2.0 / fan_out as f64)).expect("finite std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

impl Extractor {
    pub fn new(store: &mut ParamStore, name: &str, spec: &BackboneSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let mut blocks = Vec::with_capacity(spec.widths.len());
        let mut cin = spec.in_channels;
        for (i, &w) in spec.widths.iter().enumerate() {
            let p = format!("{name}.block{i}");
            blocks.push(ConvBlock {
                conv: store.add(format!("{p}.conv.weight"), kaiming(rng, &[w, cin, 3, 3]), ParamKind::Weight),
                gamma: store.add(format!("{p}.bn.weight"), Tensor::full(&[w], 1.0), ParamKind::Weight),
                beta: store.add(format!("{p}.bn.bias"), Tensor::zeros(&[w]), ParamKind::Weight),
                running_mean: store.add(format!("{p}.bn.running_mean"), Tensor::zeros(&[w]), ParamKind::Buffer),
                running_var: store.add(format!("{p}.bn.running_var"), Tensor::full(&[w], 1.0), ParamKind::Buffer),
            });
            cin = w;
        }
        Ok(Self {
            name: name.into(),
            spec: spec.clone(),
            blocks,
        })
    }

    /// Redraws every parameter in place and resets running statistics.
    pub fn reinit(&self, store: &mut ParamStore, rng: &mut Rng) {
        for b in &self.blocks {
            let shape = store.get(b.conv).shape().to_vec();
            store.set(b.conv, kaiming(rng, &shape));
            let w = shape[0];
            store.set(b.gamma, Tensor::full(&[w], 1.0));
            store.set(b.beta, Tensor::zeros(&[w]));
            store.set(b.running_mean, Tensor::zeros(&[w]));
            store.set(b.running_var, Tensor::full(&[w], 1.0));
        }
    }

    /// Current block widths (they shrink under pruning).
    pub fn widths(&self, store: &ParamStore) -> Vec<usize> {
        self.blocks.iter().map(|b| store.get(b.conv).shape()[0]).collect()
    }

    pub fn output_dim(&self, store: &ParamStore) -> usize {
        self.blocks.last().map(|b| store.get(b.conv).shape()[0]).unwrap_or(0)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(ConvBlock::ids).collect()
    }

    /// Number of learnable scalars (running statistics excluded).
    pub fn num_params(&self, store: &ParamStore) -> usize {
        self.param_ids()
            .into_iter()
            .filter(|&id| store.meta(id).kind == ParamKind::Weight)
            .map(|id| store.get(id).len())
            .sum()
    }

    pub fn freeze(&self, store: &mut ParamStore) {
        for id in self.param_ids() {
            store.freeze(id);
        }
    }

    pub fn unfreeze(&self, store: &mut ParamStore) {
        for id in self.param_ids() {
            store.unfreeze(id);
        }
    }

    /// Deep copy under a new name with fresh parameter ids.
    pub fn duplicate(&self, store: &mut ParamStore, name: &str) -> Extractor {
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let p = format!("{name}.block{i}");
                let mut copy = |id: ParamId, suffix: &str| {
                    let t = store.get(id).clone();
                    let kind = store.meta(id).kind;
                    store.add(format!("{p}.{suffix}"), t, kind)
                };
                ConvBlock {
                    conv: copy(b.conv, "conv.weight"),
                    gamma: copy(b.gamma, "bn.weight"),
                    beta: copy(b.beta, "bn.bias"),
                    running_mean: copy(b.running_mean, "bn.running_mean"),
                    running_var: copy(b.running_var, "bn.running_var"),
                }
            })
            .collect();
        Extractor {
            name: name.into(),
            spec: self.spec.clone(),
            blocks,
        }
    }

    /// Overwrites `target`'s parameters with this extractor's values.
    pub fn copy_to(&self, store: &mut ParamStore, target: &Extractor) -> Result<()> {
        if self.blocks.len() != target.blocks.len() {
            return Err(Error::arg("copy_to: block count differs"));
        }
        for (s, t) in self.param_ids().into_iter().zip(target.param_ids()) {
            let v = store.get(s).clone();
            store.set(t, v);
        }
        Ok(())
    }

    /// Forward pass on an NCHW batch. In [`NormMode::Train`] running statistics are updated.
    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: Var, mode: NormMode) -> Result<Features> {
        let (f, moments) = self.forward_with(tape, store, x, mode)?;
        if mode == NormMode::Train {
            for (b, m) in self.blocks.iter().zip(moments) {
                update_running(store, b.running_mean, &m.mean);
                update_running(store, b.running_var, &m.var);
            }
        }
        Ok(f)
    }

    /// Forward pass that never touches the store.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mode: NormMode,
    ) -> Result<(Features, Vec<BatchMoments>)> {
        let xs = tape.shape(x).to_vec();
        let expect = [self.spec.in_channels, self.spec.image_size, self.spec.image_size];
        if xs.len() != 4 || xs[1..] != expect {
            return Err(Error::shape("Extractor::forward", &expect, &xs));
        }
        let mut h = x;
        let mut moments = Vec::new();
        for b in &self.blocks {
            let w = tape.param(store, b.conv);
            h = tape.conv2d(h, w, 2, 1)?;
            let g = tape.param(store, b.gamma);
            let be = tape.param(store, b.beta);
            let stats = match mode {
                NormMode::Eval => NormStats::Running {
                    mean: store.get(b.running_mean).data(),
                    var: store.get(b.running_var).data(),
                },
                _ => NormStats::Batch,
            };
            let (y, m) = tape.batch_norm(h, g, be, stats, BN_EPS)?;
            moments.extend(m);
            h = tape.relu(y);
        }
        let pooled = tape.spatial_mean(h)?;
        let spatial = tape.permute(h, &[0, 2, 3, 1])?;
        Ok((Features { spatial, pooled }, moments))
    }

    /// Inference-mode features of an NCHW batch: `([B, H, W, d], [B, d])`.
    pub fn forward_features(&self, store: &ParamStore, batch: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let (f, _) = self.forward_with(&mut tape, store, x, NormMode::Eval)?;
        Ok((tape.value(f.spatial).clone(), tape.value(f.pooled).clone()))
    }
}

fn update_running(store: &mut ParamStore, id: ParamId, batch: &[f64]) {
    for (r, b) in store.get_mut(id).data_mut().iter_mut().zip(batch) {
        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
    }
}
