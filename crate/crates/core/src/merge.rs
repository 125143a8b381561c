//! Attention block that lets task-specific tokens attend over both feature spaces.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::ExpandableClassifier;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Flattens `[B, H, W, d]` into `[B, H·W, d]` in row-major token order.
pub fn tokenize(tape: &mut Tape, map: Var) -> Result<Var> {
    let s = tape.shape(map).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("tokenize", &[0, 0, 0, 0], &s));
    }
    tape.reshape(map, &[s[0], s[1] * s[2], s[3]])
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeAttentionBlock {
    pub heads: usize,
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub w_q: ParamId,
    pub w_k_ts: ParamId,
    pub w_v_ts: ParamId,
    pub w_k_ta: ParamId,
    pub w_v_ta: ParamId,
}

/// Merged tokens `[B, N, d]` and the head-averaged attention `[B, N, 2N]`.
pub struct MergeOutput {
    pub merged: Var,
    pub attention: Tensor,
}

impl MergeAttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::arg(format!("{heads} heads do not divide width {dim}")));
        }
        let bound = 1.0 / libm::sqrt(dim as f64);
        let mut proj = |suffix: &str, store: &mut ParamStore| {
            let t = Tensor::from_fn(&[dim, dim], |_| rng.gen_range(-bound..=bound));
            store.add(format!("{name}.{suffix}"), t, ParamKind::Weight)
        };
        let w_q = proj("w_q", store);
        let w_k_ts = proj("w_k_ts", store);
        let w_v_ts = proj("w_v_ts", store);
        let w_k_ta = proj("w_k_ta", store);
        let w_v_ta = proj("w_v_ta", store);
        Ok(Self {
            heads,
            ln1_gamma: store.add(format!("{name}.ln1.weight"), Tensor::full(&[dim], 1.0), ParamKind::Weight),
            ln1_beta: store.add(format!("{name}.ln1.bias"), Tensor::zeros(&[dim]), ParamKind::Weight),
            ln2_gamma: store.add(format!("{name}.ln2.weight"), Tensor::full(&[dim], 1.0), ParamKind::Weight),
            ln2_beta: store.add(format!("{name}.ln2.bias"), Tensor::zeros(&[dim]), ParamKind::Weight),
            w_q,
            w_k_ts,
            w_v_ts,
            w_k_ta,
            w_v_ta,
        })
    }

    pub fn ids(&self) -> [ParamId; 9] {
        [
            self.ln1_gamma,
            self.ln1_beta,
            self.ln2_gamma,
            self.ln2_beta,
            self.w_q,
            self.w_k_ts,
            self.w_v_ts,
            self.w_k_ta,
            self.w_v_ta,
        ]
    }

    pub fn dim(&self, store: &ParamStore) -> usize {
        store.get(self.w_q).shape()[0]
    }

    pub fn num_params(&self, store: &ParamStore) -> usize {
        self.ids().iter().map(|&id| store.get(id).len()).sum()
    }

    /// Splits `[B·N, d]` into heads: `[B·h, N, d/h]`.
    fn split_heads(&self, tape: &mut Tape, x: Var, b: usize, n: usize, d: usize) -> Result<Var> {
        let h = self.heads;
        let x = tape.reshape(x, &[b, n, h, d / h])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[b * h, n, d / h])
    }

    /// Merges `[B, H, W, d]` task-specific and task-agnostic maps.
    ///
    /// The task-agnostic map is detached before normalization.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, f_ts: Var, f_ta: Var) -> Result<MergeOutput> {
        let s = tape.shape(f_ts).to_vec();
        if s.len() != 4 || tape.shape(f_ta) != s.as_slice() {
            return Err(Error::shape("merge_forward", &s, tape.shape(f_ta)));
        }
        let d = self.dim(store);
        if s[3] != d {
            return Err(Error::shape("merge_forward", &[s[0], s[1], s[2], d], &s));
        }
        let (b, n, h) = (s[0], s[1] * s[2], self.heads);
        let f_ta = tape.detach(f_ta);
        let ts = tape.reshape(f_ts, &[b * n, d])?;
        let ta = tape.reshape(f_ta, &[b * n, d])?;

        let p = |tape: &mut Tape, id| tape.param(store, id);
        let (g1, b1, g2, b2) = (p(tape, self.ln1_gamma), p(tape, self.ln1_beta), p(tape, self.ln2_gamma), p(tape, self.ln2_beta));
        let z_ts = tape.layer_norm(ts, g1, b1, LN_EPS)?;
        let z_ta = tape.layer_norm(ta, g2, b2, LN_EPS)?;

        let project = |tape: &mut Tape, z: Var, id: ParamId| -> Result<Var> {
            let w = tape.param(store, id);
            let y = tape.matmul(z, w, false)?;
            self.split_heads(tape, y, b, n, d)
        };
        let q = project(tape, z_ts, self.w_q)?;
        let k_ts = project(tape, z_ts, self.w_k_ts)?;
        let v_ts = project(tape, z_ts, self.w_v_ts)?;
        let k_ta = project(tape, z_ta, self.w_k_ta)?;
        let v_ta = project(tape, z_ta, self.w_v_ta)?;
        let k = tape.concat(&[k_ts, k_ta], 1)?;
        let v = tape.concat(&[v_ts, v_ta], 1)?;

        let scores = tape.batch_matmul(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / libm::sqrt((d / h) as f64));
        let attn = tape.softmax(scores);
        let o = tape.batch_matmul(attn, v, false)?;
        let o = tape.reshape(o, &[b, h, n, d / h])?;
        let o = tape.permute(o, &[0, 2, 1, 3])?;
        let merged = tape.reshape(o, &[b, n, d])?;

        let a = tape.value(attn).data();
        let width = 2 * n;
        let attention = Tensor::from_fn(&[b, n, width], |i| {
            let (bi, rest) = (i / (n * width), i % (n * width));
            (0..h).map(|hi| a[(bi * h + hi) * n * width + rest]).sum::<f64>() / h as f64
        });
        Ok(MergeOutput { merged, attention })
    }
}

/// Logits of the merge classifier on globally pooled merged tokens.
pub fn merge_logits(tape: &mut Tape, store: &ParamStore, merged: Var, classifier: &ExpandableClassifier) -> Result<Var> {
    let pooled = tape.token_mean(merged)?;
    classifier.forward(tape, store, pooled)
}

pub fn mcls_loss(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, targets)
}

/// Attention averaged over a probe batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub task: usize,
    pub epoch: usize,
    pub tokens: usize,
    /// `[N, 2N]`, task-specific columns first.
    pub map: Tensor,
}

/// Element-wise mean of `[B, N, 2N]` maps.
pub fn record_attention(maps: &Tensor, task: usize, epoch: usize) -> Result<AttentionRecord> {
    let s = maps.shape();
    if s.len() != 3 || s[2] != 2 * s[1] {
        return Err(Error::shape("record_attention", &[0, s.get(1).copied().unwrap_or(0), 0], s));
    }
    if s[0] == 0 {
        return Err(Error::Empty("record_attention"));
    }
    let per = s[1] * s[2];
    let map = Tensor::from_fn(&[s[1], s[2]], |i| {
        (0..s[0]).map(|b| maps.data()[b * per + i]).sum::<f64>() / s[0] as f64
    });
    Ok(AttentionRecord {
        task,
        epoch,
        tokens: s[1],
        map,
    })
}

impl AttentionRecord {
    /// Mean over rows of the attention mass on the task-agnostic half.
    pub fn ta_side_mass(&self) -> f64 {
        let n = self.tokens;
        let rows: f64 = (0..n).map(|r| self.map.row(r)[n..].iter().sum::<f64>()).sum();
        rows / n as f64
    }

    /// Rows reordered with the task-agnostic half on the left.
    pub fn display_order(&self) -> Tensor {
        let n = self.tokens;
        let data: Vec<f64> = (0..n)
            .flat_map(|r| {
                let row = self.map.row(r);
                row[n..].iter().chain(&row[..n]).copied().collect::<Vec<_>>()
            })
            .collect();
        Tensor::new(&[n, 2 * n], data).expect("same size")
    }
}
