//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation eagerly; [`Tape::backward`] walks it in
//! reverse. Parameters enter the tape through [`Tape::param`] and receive
//! gradients only when they are trainable in the [`ParamStore`]. Everything
//! else is a constant unless created with [`Tape::input`].

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.batch * self.out_height * self.out_width
    }
}

/// Statistics source for a batch-normalization call.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with stored running statistics.
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel batch mean and unbiased variance, for running-statistic updates.
#[derive(Clone, Debug)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias { x: Var, bias: Var },
    Relu(Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    SpatialMean(Var),
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    SelectColumns { x: Var, cols: Vec<usize> },
    SelectRows { x: Var, rows: Vec<usize> },
    Softmax(Var),
    LogSoftmax(Var),
    NormalizeRows { x: Var, norms: Vec<f64> },
    LogSumExpRows(Var),
    Pick { x: Var, cols: Vec<usize> },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`].
pub struct Grads {
    leaves: Vec<Option<Tensor>>,
    params: ParamGrads,
}

impl Grads {
    /// Gradient with respect to a leaf created by [`Tape::input`] or [`Tape::param`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (oi, &v) in o.iter_mut().zip(row) {
            let e = libm::exp(v - m);
            *oi = e;
            s += e;
        }
        for oi in o.iter_mut() {
            *oi /= s;
        }
    }
    out
}

fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + libm::log(row.iter().map(|&v| libm::exp(v - m)).sum::<f64>())
}

fn add_into(acc: &mut Option<Tensor>, contrib: Tensor) {
    match acc {
        Some(a) => {
            for (x, y) in a.data_mut().iter_mut().zip(contrib.data()) {
                *x += y;
            }
        }
        None => *acc = Some(contrib),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    #[inline]
    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Grads::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let trainable = store.is_trainable(id);
        self.push(store.get(id).clone(), Op::Param(id), trainable)
    }

    /// Copies the value into a new constant, blocking gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    /// `a·b` (or `a·bᵀ` with `trans_b`) for rank-2 operands.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (br, bc) = self.value(b).dims2()?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::shape("matmul", &[m, k], &[br, bc]));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), trans_b, 0.0, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    /// Batched `a·b` (or `a·bᵀ`) over a shared leading axis of rank-3 operands.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("batch_matmul", &sa, &sb));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(Error::shape("batch_matmul", &sa, &sb));
        }
        let mut out = vec![0.0; g * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for i in 0..g {
                gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    false,
                    &bd[i * k * n..(i + 1) * k * n],
                    trans_b,
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[g, m, n], out)?, Op::BatchMatMul { a, b, trans_b }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("shapes checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, s), rg)
    }

    /// Adds `bias` (length = last dimension of `x`) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = last_dim(self.shape(x));
        if self.shape(bias) != [n] {
            return Err(Error::shape("add_bias", &[n], self.shape(bias)));
        }
        let mut t = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in t.data_mut().chunks_mut(n) {
            for (v, bi) in row.iter_mut().zip(&b) {
                *v += bi;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, Op::AddBias { x, bias }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu(x), rg)
    }

    /// 2-d convolution of an NCHW batch with an `[out, in, k, k]` kernel, no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", &ws, &xs));
        }
        let k = ws[2];
        if xs[2] + 2 * pad < k || xs[3] + 2 * pad < k || stride == 0 {
            return Err(Error::shape("conv2d", &ws, &xs));
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            out_channels: ws[0],
            kernel: k,
            stride,
            pad,
            out_height: (xs[2] + 2 * pad - k) / stride + 1,
            out_width: (xs[3] + 2 * pad - k) / stride + 1,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let mut out2 = vec![0.0; geom.out_channels * ncols];
        gemm(geom.out_channels, rows, ncols, self.value(w).data(), false, &cols, false, 0.0, &mut out2);
        // [cout, b*ho*wo] -> [b, cout, ho, wo]
        let hw = geom.out_height * geom.out_width;
        let mut out = vec![0.0; out2.len()];
        for co in 0..geom.out_channels {
            for b in 0..geom.batch {
                let src = &out2[co * ncols + b * hw..co * ncols + (b + 1) * hw];
                out[(b * geom.out_channels + co) * hw..(b * geom.out_channels + co + 1) * hw]
                    .copy_from_slice(src);
            }
        }
        let t = Tensor::new(&[geom.batch, geom.out_channels, geom.out_height, geom.out_width], out)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(t, Op::Conv2d { x, w, geom, cols: if rg { cols } else { Vec::new() } }, rg))
    }

    /// Per-channel normalization of an NCHW batch followed by an affine map.
    ///
    /// With [`NormStats::Batch`] the batch moments (mean, unbiased variance)
    /// are returned so the caller can update running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("batch_norm", &[0, 0, 0, 0], &xs));
        }
        let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm", &[c], self.shape(gamma)));
        }
        let m = (b * hw) as f64;
        let xd = self.value(x).data();
        let (mean, var_biased, moments) = match stats {
            NormStats::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let s = &xd[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                        mean[ci] += s.iter().sum::<f64>();
                    }
                }
                for v in mean.iter_mut() {
                    *v /= m;
                }
                for bi in 0..b {
                    for ci in 0..c {
                        let s = &xd[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                        var[ci] += s.iter().map(|&v| (v - mean[ci]) * (v - mean[ci])).sum::<f64>();
                    }
                }
                for v in var.iter_mut() {
                    *v /= m;
                }
                let unbiased = if m > 1.0 {
                    var.iter().map(|v| v * m / (m - 1.0)).collect()
                } else {
                    var.clone()
                };
                let moments = BatchMoments {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(moments))
            }
            NormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", &[c], &[mean.len()]));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                for i in base..base + hw {
                    let h = (xd[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = h;
                    out[i] = g[ci] * h + bt[ci];
                }
            }
        }
        let t = Tensor::new(&xs, out)?;
        let rg = self.rg(&[x, gamma, beta]);
        let batch_stats = matches!(stats, NormStats::Batch);
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((v, moments))
    }

    /// Normalization over the last dimension followed by an elementwise affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = last_dim(&xs);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &[d], self.shape(gamma)));
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let rows = xd.len() / d.max(1);
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / libm::sqrt(var + eps);
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + bt[j];
            }
        }
        let t = Tensor::new(&xs, out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Mean over the spatial axes of an NCHW tensor, giving `[B, C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("spatial_mean", &[0, 0, 0, 0], &xs));
        }
        let hw = xs[2] * xs[3];
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        let t = Tensor::new(&[xs[0], xs[1]], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SpatialMean(x), rg))
    }

    /// Mean over axis 1 of a `[B, N, D]` tensor, giving `[B, D]`.
    pub fn token_mean(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::shape("token_mean", &[0, 0, 0], &xs));
        }
        // Express as a spatial mean over a [B, D, N, 1] view.
        let p = self.permute(x, &[0, 2, 1])?;
        let r = self.reshape(p, &[xs[0], xs[2], xs[1], 1])?;
        self.spatial_mean(r)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if perm.len() != xs.len() || perm.iter().any(|&p| p >= xs.len() || core::mem::replace(&mut seen[p], true)) {
            return Err(Error::arg("permute: invalid axis permutation"));
        }
        let (data, shape) = permute_data(self.value(x).data(), &xs, perm);
        let t = Tensor::new(&shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(Error::arg("concat: axis out of range"));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != s0.len() || s.iter().zip(&s0).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::shape("concat", &s0, s));
            }
            total += s[axis];
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let w = self.shape(*p)[axis] * inner;
                data.extend_from_slice(&self.value(*p).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let t = Tensor::new(&shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Selects columns of the last axis.
    pub fn select_columns(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let n = last_dim(&xs);
        if cols.iter().any(|&c| c >= n) {
            return Err(Error::arg("select_columns: column out of range"));
        }
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| cols.iter().map(move |&c| row[c]))
            .collect();
        let mut shape = xs;
        *shape.last_mut().unwrap() = cols.len();
        let t = Tensor::new(&shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::SelectColumns {
                x,
                cols: cols.to_vec(),
            },
            rg,
        ))
    }

    /// Selects entries of the leading axis.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let n = self.shape(x).first().copied().unwrap_or(0);
        if rows.iter().any(|&r| r >= n) {
            return Err(Error::arg("select_rows: row out of range"));
        }
        let t = self.value(x).select_rows(rows);
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = last_dim(v.shape());
        let t = Tensor::new(v.shape(), softmax_rows(v.data(), n)).expect("same size");
        let rg = self.rg(&[x]);
        self.push(t, Op::Softmax(x), rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = last_dim(v.shape());
        let data = v
            .data()
            .chunks(n)
            .flat_map(|row| {
                let l = logsumexp(row);
                row.iter().map(move |&r| r - l)
            })
            .collect();
        let t = Tensor::new(v.shape(), data).expect("same size");
        let rg = self.rg(&[x]);
        self.push(t, Op::LogSoftmax(x), rg)
    }

    /// Scales every row (last axis) to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let n = last_dim(v.shape());
        let norms: Vec<f64> = v
            .data()
            .chunks(n)
            .map(|row| libm::sqrt(row.iter().map(|a| a * a).sum::<f64>()))
            .collect();
        if norms.iter().any(|&r| r == 0.0) {
            return Err(Error::arg("normalize_rows: zero vector"));
        }
        let data = v
            .data()
            .chunks(n)
            .zip(&norms)
            .flat_map(|(row, &r)| row.iter().map(move |a| a / r))
            .collect();
        let t = Tensor::new(v.shape(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::NormalizeRows { x, norms }, rg))
    }

    /// Row-wise log-sum-exp of a rank-2 tensor; `-inf` entries are excluded.
    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let data = self.value(x).data().chunks(n).map(logsumexp).collect();
        let t = Tensor::new(&[m], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::LogSumExpRows(x), rg))
    }

    /// `out[i] = x[i, cols[i]]` for a rank-2 `x`.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if cols.len() != m || cols.iter().any(|&c| c >= n) {
            return Err(Error::arg("pick: index out of range"));
        }
        let data = cols.iter().enumerate().map(|(i, &c)| self.value(x).data()[i * n + c]).collect();
        let t = Tensor::new(&[m], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::Pick {
                x,
                cols: cols.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, k) = self.value(logits).dims2()?;
        if targets.len() != b {
            return Err(Error::shape("cross_entropy", &[b], &[targets.len()]));
        }
        if b == 0 {
            return Err(Error::Empty("cross_entropy"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::UnknownLabel(bad));
        }
        let probs = softmax_rows(self.value(logits).data(), k);
        let d = self.value(logits).data();
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &d[i * k..(i + 1) * k];
            loss += logsumexp(row) - row[t];
        }
        loss /= b as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every reachable leaf.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", &[1], self.shape(loss)));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let mut params = ParamGrads::default();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Grads { leaves: grads, params });
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let (before, rest) = grads.split_at_mut(i);
            let Some(g) = rest[0].as_ref() else { continue };
            match &node.op {
                Op::Leaf => continue,
                Op::Param(id) => {
                    params.accumulate(*id, g);
                    continue;
                }
                op => self.backprop(op, &node.value, g, before)?,
            }
            rest[0] = None;
        }
        Ok(Grads { leaves: grads, params })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, op: &Op, out: &Tensor, g: &Tensor, acc: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, trans_b } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (m, k) = va.dims2()?;
                let n = out.shape()[1];
                if self.wants(*a) {
                    // dA = dC · B^T (or dC · B when B was transposed)
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, vb.data(), !*trans_b, 0.0, &mut da);
                    add_into(&mut acc[a.0], Tensor::new(va.shape(), da)?);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    if *trans_b {
                        // dB (n×k) = dC^T · A
                        gemm(n, m, k, gd, true, va.data(), false, 0.0, &mut db);
                    } else {
                        gemm(k, m, n, va.data(), true, gd, false, 0.0, &mut db);
                    }
                    add_into(&mut acc[b.0], Tensor::new(vb.shape(), db)?);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (gn, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = out.shape()[2];
                if self.wants(*a) {
                    let mut da = vec![0.0; gn * m * k];
                    for i in 0..gn {
                        gemm(
                            m,
                            n,
                            k,
                            &gd[i * m * n..(i + 1) * m * n],
                            false,
                            &vb.data()[i * k * n..(i + 1) * k * n],
                            !*trans_b,
                            0.0,
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                    add_into(&mut acc[a.0], Tensor::new(va.shape(), da)?);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; gn * k * n];
                    for i in 0..gn {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let ai = &va.data()[i * m * k..(i + 1) * m * k];
                        let di = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm(n, m, k, gi, true, ai, false, 0.0, di);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, 0.0, di);
                        }
                    }
                    add_into(&mut acc[b.0], Tensor::new(vb.shape(), db)?);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    add_into(&mut acc[a.0], g.clone());
                }
                if self.wants(*b) {
                    add_into(&mut acc[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(&mut acc[a.0], g.clone());
                }
                if self.wants(*b) {
                    add_into(&mut acc[b.0], g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                if self.wants(*a) {
                    let d = gd.iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    add_into(&mut acc[a.0], Tensor::new(va.shape(), d)?);
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    add_into(&mut acc[b.0], Tensor::new(vb.shape(), d)?);
                }
            }
            Op::Scale(x, s) => {
                if self.wants(*x) {
                    let s = *s;
                    add_into(&mut acc[x.0], g.map(|v| v * s));
                }
            }
            Op::AddBias { x, bias } => {
                if self.wants(*x) {
                    add_into(&mut acc[x.0], g.clone());
                }
                if self.wants(*bias) {
                    let n = self.shape(*bias)[0];
                    let mut db = vec![0.0; n];
                    for row in gd.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    add_into(&mut acc[bias.0], Tensor::new(&[n], db)?);
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let d = gd
                        .iter()
                        .zip(out.data())
                        .map(|(&gv, &o)| if o > 0.0 { gv } else { 0.0 })
                        .collect();
                    add_into(&mut acc[x.0], Tensor::new(out.shape(), d)?);
                }
            }
            Op::Conv2d { x, w, geom, cols } => {
                let hw = geom.out_height * geom.out_width;
                let ncols = geom.col_cols();
                let rows = geom.col_rows();
                // [b, cout, ho, wo] -> [cout, b*ho*wo]
                let mut g2 = vec![0.0; gd.len()];
                for b in 0..geom.batch {
                    for co in 0..geom.out_channels {
                        let src = &gd[(b * geom.out_channels + co) * hw..(b * geom.out_channels + co + 1) * hw];
                        g2[co * ncols + b * hw..co * ncols + (b + 1) * hw].copy_from_slice(src);
                    }
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; geom.out_channels * rows];
                    gemm(geom.out_channels, ncols, rows, &g2, false, cols, true, 0.0, &mut dw);
                    add_into(&mut acc[w.0], Tensor::new(self.shape(*w), dw)?);
                }
                if self.wants(*x) {
                    let mut dcols = vec![0.0; rows * ncols];
                    gemm(rows, geom.out_channels, ncols, self.value(*w).data(), true, &g2, false, 0.0, &mut dcols);
                    let dx = col2im(&dcols, geom);
                    add_into(&mut acc[x.0], Tensor::new(self.shape(*x), dx)?);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xs = self.shape(*x);
                let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        for i in base..base + hw {
                            dbeta[ci] += gd[i];
                            dgamma[ci] += gd[i] * xhat[i];
                        }
                    }
                }
                if self.wants(*x) {
                    let gam = self.value(*gamma).data();
                    let m = (b * hw) as f64;
                    let mut dx = vec![0.0; gd.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * hw;
                            let s = gam[ci] * inv_std[ci];
                            for i in base..base + hw {
                                dx[i] = if *batch_stats {
                                    s / m * (m * gd[i] - dbeta[ci] - xhat[i] * dgamma[ci])
                                } else {
                                    s * gd[i]
                                };
                            }
                        }
                    }
                    add_into(&mut acc[x.0], Tensor::new(xs, dx)?);
                }
                if self.wants(*gamma) {
                    add_into(&mut acc[gamma.0], Tensor::new(&[c], dgamma)?);
                }
                if self.wants(*beta) {
                    add_into(&mut acc[beta.0], Tensor::new(&[c], dbeta)?);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.shape(*gamma)[0];
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for (r, grow) in gd.chunks(d).enumerate() {
                    for j in 0..d {
                        dbeta[j] += grow[j];
                        dgamma[j] += grow[j] * xhat[r * d + j];
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    let df = d as f64;
                    for (r, grow) in gd.chunks(d).enumerate() {
                        let h = &xhat[r * d..(r + 1) * d];
                        let mut sg = 0.0;
                        let mut sgh = 0.0;
                        for j in 0..d {
                            let gj = grow[j] * gam[j];
                            sg += gj;
                            sgh += gj * h[j];
                        }
                        for j in 0..d {
                            let gj = grow[j] * gam[j];
                            dx[r * d + j] = inv_std[r] / df * (df * gj - sg - h[j] * sgh);
                        }
                    }
                    add_into(&mut acc[x.0], Tensor::new(self.shape(*x), dx)?);
                }
                if self.wants(*gamma) {
                    add_into(&mut acc[gamma.0], Tensor::new(&[d], dgamma)?);
                }
                if self.wants(*beta) {
                    add_into(&mut acc[beta.0], Tensor::new(&[d], dbeta)?);
                }
            }
            Op::SpatialMean(x) => {
                if self.wants(*x) {
                    let xs = self.shape(*x);
                    let hw = xs[2] * xs[3];
                    let inv = 1.0 / hw as f64;
                    let dx = gd.iter().flat_map(|&v| core::iter::repeat(v * inv).take(hw)).collect();
                    add_into(&mut acc[x.0], Tensor::new(xs, dx)?);
                }
            }
            Op::Permute { x, perm } => {
                if self.wants(*x) {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let (d, shape) = permute_data(gd, out.shape(), &inv);
                    add_into(&mut acc[x.0], Tensor::new(&shape, d)?);
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    add_into(&mut acc[x.0], g.clone().reshape(self.shape(*x))?);
                }
            }
            Op::Concat { parts, axis } => {
                let s0 = out.shape();
                let outer: usize = s0[..*axis].iter().product();
                let inner: usize = s0[axis + 1..].iter().product();
                let total = s0[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let w = self.shape(*p)[*axis] * inner;
                    if self.wants(*p) {
                        let mut d = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            d.extend_from_slice(&gd[o * total + offset..o * total + offset + w]);
                        }
                        add_into(&mut acc[p.0], Tensor::new(self.shape(*p), d)?);
                    }
                    offset += w;
                }
            }
            Op::SelectColumns { x, cols } => {
                if self.wants(*x) {
                    let n = last_dim(self.shape(*x));
                    let k = cols.len();
                    let mut d = vec![0.0; self.value(*x).len()];
                    for (r, grow) in gd.chunks(k.max(1)).enumerate() {
                        for (j, &c) in cols.iter().enumerate() {
                            d[r * n + c] += grow[j];
                        }
                    }
                    add_into(&mut acc[x.0], Tensor::new(self.shape(*x), d)?);
                }
            }
            Op::SelectRows { x, rows } => {
                if self.wants(*x) {
                    let xs = self.shape(*x);
                    let inner: usize = xs[1..].iter().product();
                    let mut d = vec![0.0; self.value(*x).len()];
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..inner {
                            d[r * inner + j] += gd[i * inner + j];
                        }
                    }
                    add_into(&mut acc[x.0], Tensor::new(xs, d)?);
                }
            }
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let n = last_dim(out.shape());
                    let mut d = vec![0.0; gd.len()];
                    for ((grow, yrow), drow) in gd.chunks(n).zip(out.data().chunks(n)).zip(d.chunks_mut(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            drow[j] = yrow[j] * (grow[j] - dot);
                        }
                    }
                    add_into(&mut acc[x.0], Tensor::new(out.shape(), d)?);
                }
            }
            Op::LogSoftmax(x) => {
                if self.wants(*x) {
                    let n = last_dim(out.shape());
                    let mut d = vec![0.0; gd.len()];
                    for ((grow, yrow), drow) in gd.chunks(n).zip(out.data().chunks(n)).zip(d.chunks_mut(n)) {
                        let s: f64 = grow.iter().sum();
                        for j in 0..n {
                            drow[j] = grow[j] - libm::exp(yrow[j]) * s;
                        }
                    }
                    add_into(&mut acc[x.0], Tensor::new(out.shape(), d)?);
                }
            }
            Op::NormalizeRows { x, norms } => {
                if self.wants(*x) {
                    let n = last_dim(out.shape());
                    let mut d = vec![0.0; gd.len()];
                    for (r, ((grow, yrow), drow)) in
                        gd.chunks(n).zip(out.data().chunks(n)).zip(d.chunks_mut(n)).enumerate()
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            drow[j] = (grow[j] - yrow[j] * dot) / norms[r];
                        }
                    }
                    add_into(&mut acc[x.0], Tensor::new(out.shape(), d)?);
                }
            }
            Op::LogSumExpRows(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let n = last_dim(xv.shape());
                    let mut d = vec![0.0; xv.len()];
                    for (r, (row, drow)) in xv.data().chunks(n).zip(d.chunks_mut(n)).enumerate() {
                        let l = out.data()[r];
                        for j in 0..n {
                            drow[j] = gd[r] * libm::exp(row[j] - l);
                        }
                    }
                    add_into(&mut acc[x.0], Tensor::new(xv.shape(), d)?);
                }
            }
            Op::Pick { x, cols } => {
                if self.wants(*x) {
                    let n = self.shape(*x)[1];
                    let mut d = vec![0.0; self.value(*x).len()];
                    for (i, &c) in cols.iter().enumerate() {
                        d[i * n + c] = gd[i];
                    }
                    add_into(&mut acc[x.0], Tensor::new(self.shape(*x), d)?);
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    add_into(&mut acc[x.0], Tensor::full(self.shape(*x), gd[0]));
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let n = self.value(*x).len().max(1) as f64;
                    add_into(&mut acc[x.0], Tensor::full(self.shape(*x), gd[0] / n));
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if self.wants(*logits) {
                    let s = self.shape(*logits);
                    let (b, k) = (s[0], s[1]);
                    let scale = gd[0] / b as f64;
                    let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (i, &t) in targets.iter().enumerate() {
                        d[i * k + t] -= scale;
                    }
                    add_into(&mut acc[logits.0], Tensor::new(s, d)?);
                }
            }
        }
        Ok(())
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ncols = g.col_cols();
    let mut cols = vec![0.0; g.col_rows() * ncols];
    let hw_out = g.out_height * g.out_width;
    for c in 0..g.in_channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let r = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut cols[r * ncols..(r + 1) * ncols];
                for b in 0..g.batch {
                    let plane = &x[(b * g.in_channels + c) * g.height * g.width..][..g.height * g.width];
                    for oy in 0..g.out_height {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        for ox in 0..g.out_width {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.width as isize {
                                continue;
                            }
                            dst[b * hw_out + oy * g.out_width + ox] = plane[iy as usize * g.width + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ncols = g.col_cols();
    let mut x = vec![0.0; g.batch * g.in_channels * g.height * g.width];
    let hw_out = g.out_height * g.out_width;
    for c in 0..g.in_channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let r = (c * g.kernel + ki) * g.kernel + kj;
                let src = &cols[r * ncols..(r + 1) * ncols];
                for b in 0..g.batch {
                    let plane = &mut x[(b * g.in_channels + c) * g.height * g.width..][..g.height * g.width];
                    for oy in 0..g.out_height {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        for ox in 0..g.out_width {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.width as isize {
                                continue;
                            }
                            plane[iy as usize * g.width + ix as usize] += src[b * hw_out + oy * g.out_width + ox];
                        }
                    }
                }
            }
        }
    }
    x
}
