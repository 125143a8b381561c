//! Representation similarity, accuracy summaries and memory accounting.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn centered(x: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let (n, p) = x.dims2()?;
    let mut c = x.data().to_vec();
    for j in 0..p {
        let mean = (0..n).map(|i| c[i * p + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            c[i * p + j] -= mean;
        }
    }
    Ok((n, p, c))
}

/// Squared Frobenius norm of `Aᵀ B` for row-major `n × p` and `n × q` matrices.
fn cross_frob2(n: usize, p: usize, a: &[f64], q: usize, b: &[f64]) -> f64 {
    let mut total = 0.0;
    for j in 0..p {
        for k in 0..q {
            let s: f64 = (0..n).map(|i| a[i * p + j] * b[i * q + k]).sum();
            total += s * s;
        }
    }
    total
}

/// Linear centered kernel alignment between two feature matrices on the same rows.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (n, p, xc) = centered(x)?;
    let (m, q, yc) = centered(y)?;
    if n != m {
        return Err(Error::shape("linear_cka", &[n, q], &[m, q]));
    }
    if n < 2 {
        return Err(Error::arg("linear_cka needs at least two samples"));
    }
    let xx = libm::sqrt(cross_frob2(n, p, &xc, p, &xc));
    let yy = libm::sqrt(cross_frob2(n, q, &yc, q, &yc));
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok(cross_frob2(n, q, &yc, p, &xc) / (xx * yy))
}

/// Pairwise similarity of extractor features on a shared probe set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaReport {
    pub matrix: Vec<Vec<f64>>,
    pub mean_off_diagonal: f64,
}

pub fn cka_report(features: &[Tensor]) -> Result<CkaReport> {
    let k = features.len();
    if k < 2 {
        return Err(Error::arg("cka_report needs at least two feature sets"));
    }
    let mut matrix = alloc::vec![alloc::vec![1.0; k]; k];
    let mut off = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            let v = linear_cka(&features[i], &features[j])?;
            matrix[i][j] = v;
            matrix[j][i] = v;
            off += v;
        }
    }
    Ok(CkaReport {
        matrix,
        mean_off_diagonal: off / (k * (k - 1) / 2) as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub accuracies: Vec<f64>,
    pub avg: f64,
    pub last: f64,
    pub param_counts: Vec<usize>,
}

pub fn compute_metrics(accuracies: &[f64], param_counts: &[usize]) -> Result<RunMetrics> {
    let last = *accuracies.last().ok_or(Error::Empty("compute_metrics"))?;
    Ok(RunMetrics {
        accuracies: accuracies.to_vec(),
        avg: accuracies.iter().sum::<f64>() / accuracies.len() as f64,
        last,
        param_counts: param_counts.to_vec(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBudget {
    pub total_bytes: f64,
    /// Stored models and exemplars, counted in exemplars.
    pub exemplar_equivalents: f64,
    /// What one extra model costs, counted in exemplars.
    pub per_model_equivalents: f64,
}

/// Exemplar-equivalent cost of `extra_models` saved models of `model_params`
/// 32-bit parameters next to `exemplar_count` stored samples.
pub fn memory_budget(model_params: usize, extra_models: usize, exemplar_count: usize, bytes_per_exemplar: usize) -> Result<MemoryBudget> {
    if bytes_per_exemplar == 0 {
        return Err(Error::arg("bytes_per_exemplar must be positive"));
    }
    let model_bytes = 4.0 * model_params as f64;
    let per_model = model_bytes / bytes_per_exemplar as f64;
    let total = extra_models as f64 * model_bytes + (exemplar_count * bytes_per_exemplar) as f64;
    Ok(MemoryBudget {
        total_bytes: total,
        exemplar_equivalents: total / bytes_per_exemplar as f64,
        per_model_equivalents: per_model,
    })
}

/// Fraction of predictions equal to their labels.
pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if predicted.len() != labels.len() {
        return Err(Error::shape("accuracy", &[labels.len()], &[predicted.len()]));
    }
    if labels.is_empty() {
        return Err(Error::Empty("accuracy"));
    }
    let hits = predicted.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}
