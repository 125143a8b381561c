//! Constant-capacity rehearsal memory with herding selection.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::image::Image;
use super::split::{Sample, TaskDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Greedy herding order over the rows of `features` (`n × d`).
///
/// Step `k` picks the unselected row whose addition brings the running
/// exemplar mean closest to the class mean. Ties resolve to the lowest index.
pub fn herding_select(features: &Tensor, m: usize) -> Result<Vec<usize>> {
    let (n, d) = features.dims2()?;
    if n == 0 {
        return Err(Error::Empty("herding_select"));
    }
    if m > n {
        return Err(Error::arg("herding_select: more exemplars requested than features"));
    }
    let mut mu = vec![0.0; d];
    for i in 0..n {
        for (a, v) in mu.iter_mut().zip(features.row(i)) {
            *a += v;
        }
    }
    mu.iter_mut().for_each(|v| *v /= n as f64);

    let mut running = vec![0.0; d];
    let mut taken = vec![false; n];
    let mut order = Vec::with_capacity(m);
    for k in 1..=m {
        let inv_k = 1.0 / k as f64;
        let mut best = (f64::INFINITY, usize::MAX);
        for i in (0..n).filter(|&i| !taken[i]) {
            let dist: f64 = features
                .row(i)
                .iter()
                .zip(&running)
                .zip(&mu)
                .map(|((f, s), u)| {
                    let e = u - (s + f) * inv_k;
                    e * e
                })
                .sum();
            if dist < best.0 {
                best = (dist, i);
            }
        }
        let pick = best.1;
        taken[pick] = true;
        for (s, f) in running.iter_mut().zip(features.row(pick)) {
            *s += f;
        }
        order.push(pick);
    }
    Ok(order)
}

/// Location of a sample inside the task stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleRef {
    pub task: usize,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub source: SampleRef,
    pub sample: Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RehearsalMemory {
    capacity: usize,
    quota: usize,
    per_class: BTreeMap<usize, Vec<Exemplar>>,
}

impl RehearsalMemory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            quota: 0,
            per_class: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn quota(&self) -> usize {
        self.quota
    }

    pub fn len(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.per_class.keys().copied()
    }

    pub fn class_exemplars(&self, class: usize) -> &[Exemplar] {
        self.per_class.get(&class).map(Vec::as_slice).unwrap_or(&[])
    }

    /// All exemplars, by class then herding order.
    pub fn exemplars(&self) -> impl Iterator<Item = &Exemplar> {
        self.per_class.values().flatten()
    }

    /// Exemplar locations by class, for checkpointing.
    pub fn refs(&self) -> BTreeMap<usize, Vec<SampleRef>> {
        self.per_class
            .iter()
            .map(|(&c, ex)| (c, ex.iter().map(|e| e.source).collect()))
            .collect()
    }

    /// Rebuilds a memory from recorded locations.
    pub fn from_refs(
        capacity: usize,
        quota: usize,
        refs: &BTreeMap<usize, Vec<SampleRef>>,
        tasks: &[TaskDataset],
    ) -> Result<Self> {
        let mut per_class = BTreeMap::new();
        for (&class, list) in refs {
            let mut ex = Vec::with_capacity(list.len());
            for &r in list {
                let sample = tasks
                    .get(r.task)
                    .and_then(|t| t.samples.get(r.index))
                    .ok_or_else(|| Error::State(alloc::format!("exemplar {r:?} is not in the task stream")))?;
                if sample.label != class {
                    return Err(Error::UnknownLabel(sample.label));
                }
                ex.push(Exemplar {
                    source: r,
                    sample: sample.clone(),
                });
            }
            per_class.insert(class, ex);
        }
        let mem = Self {
            capacity,
            quota,
            per_class,
        };
        if mem.len() > capacity {
            return Err(Error::State(alloc::format!("{} exemplars exceed capacity {capacity}", mem.len())));
        }
        Ok(mem)
    }

    /// End-of-task update: recompute the per-class quota over all seen classes,
    /// cut old classes to their herding prefix, and herd the new task's classes.
    ///
    /// `features` maps a batch of images to pooled feature rows.
    pub fn rebalance(
        &mut self,
        new_task: &TaskDataset,
        mut features: impl FnMut(&[&Image]) -> Result<Tensor>,
    ) -> Result<()> {
        let new_classes: Vec<usize> = new_task
            .class_set
            .iter()
            .copied()
            .filter(|c| !self.per_class.contains_key(c))
            .collect();
        let seen = self.per_class.len() + new_classes.len();
        if seen == 0 {
            return Ok(());
        }
        self.quota = self.capacity / seen;
        for ex in self.per_class.values_mut() {
            ex.truncate(self.quota);
        }
        for class in new_classes {
            let idx: Vec<usize> = new_task
                .samples
                .iter()
                .enumerate()
                .filter(|(_, s)| s.label == class)
                .map(|(i, _)| i)
                .collect();
            let m = self.quota.min(idx.len());
            let chosen = if m == 0 {
                Vec::new()
            } else {
                let images: Vec<&Image> = idx.iter().map(|&i| &new_task.samples[i].image).collect();
                let feats = features(&images)?;
                if feats.rank() != 2 || feats.shape()[0] != images.len() {
                    return Err(Error::shape("rebalance", &[images.len(), 0], feats.shape()));
                }
                herding_select(&feats, m)?
            };
            let ex = chosen
                .into_iter()
                .map(|j| Exemplar {
                    source: SampleRef {
                        task: new_task.task_index,
                        index: idx[j],
                    },
                    sample: new_task.samples[idx[j]].clone(),
                })
                .collect();
            self.per_class.insert(class, ex);
        }
        debug_assert!(self.len() <= self.capacity);
        Ok(())
    }
}
