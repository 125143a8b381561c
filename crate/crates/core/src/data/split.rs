use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{Error, Result};
use crate::rng::{rng_for, tag};

/// `b-c` split: a base task of `base_size` classes followed by tasks of `increment_size`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub total_classes: usize,
    pub base_size: usize,
    pub increment_size: usize,
    pub class_order_seed: u64,
}

impl SplitSpec {
    /// Number of tasks, or an error if the classes do not divide into whole tasks.
    pub fn num_tasks(&self) -> Result<usize> {
        if self.base_size == 0 || self.base_size > self.total_classes {
            return Err(Error::InvalidSplit(format!(
                "base size {} must be in 1..={}",
                self.base_size, self.total_classes
            )));
        }
        let rest = self.total_classes - self.base_size;
        if rest == 0 {
            return Ok(1);
        }
        if self.increment_size == 0 || rest % self.increment_size != 0 {
            return Err(Error::InvalidSplit(format!(
                "{} remaining classes do not divide into increments of {}",
                rest, self.increment_size
            )));
        }
        Ok(1 + rest / self.increment_size)
    }

    /// Seeded permutation of `0..total_classes`.
    pub fn class_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.total_classes).collect();
        order.shuffle(&mut rng_for(self.class_order_seed, &[tag::CLASS_ORDER]));
        order
    }

    /// Class sets `C_t` in task order, taken from the permuted class order.
    pub fn task_classes(&self) -> Result<Vec<Vec<usize>>> {
        let tasks = self.num_tasks()?;
        let order = self.class_order();
        let mut out = Vec::with_capacity(tasks);
        let mut start = 0;
        for t in 0..tasks {
            let n = if t == 0 { self.base_size } else { self.increment_size };
            out.push(order[start..start + n].to_vec());
            start += n;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub task_index: usize,
    pub samples: Vec<Sample>,
    pub class_set: BTreeSet<usize>,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Class set as a sorted vector.
    pub fn classes(&self) -> Vec<usize> {
        self.class_set.iter().copied().collect()
    }
}

/// Partitions labelled samples into class-disjoint tasks following `spec`.
///
/// Sample order within a task follows the input order.
pub fn make_splits(spec: &SplitSpec, samples: Vec<Sample>) -> Result<Vec<TaskDataset>> {
    let classes = spec.task_classes()?;
    let mut owner = alloc::vec![usize::MAX; spec.total_classes];
    for (t, cs) in classes.iter().enumerate() {
        for &c in cs {
            owner[c] = t;
        }
    }
    let mut tasks: Vec<TaskDataset> = classes
        .iter()
        .enumerate()
        .map(|(t, cs)| TaskDataset {
            task_index: t,
            samples: Vec::new(),
            class_set: cs.iter().copied().collect(),
        })
        .collect();
    for s in samples {
        let t = *owner.get(s.label).ok_or(Error::UnknownLabel(s.label))?;
        tasks[t].samples.push(s);
    }
    Ok(tasks)
}
