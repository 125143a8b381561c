//! Expanding set of task-specific extractors and the losses trained on it.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{BackboneSpec, ExpandableClassifier, Extractor, Features, Linear, NormMode};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Weights of the task-agnostic and merge-classification terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub ta: f64,
    pub mcls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ta: 1.0, mcls: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("ta", self.ta), ("mcls", self.mcls)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::arg(format!("loss weight {name} must be finite and nonnegative")));
            }
        }
        Ok(())
    }
}

/// Class support of the transfer divergence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferSupport {
    /// Every seen class.
    #[default]
    Full,
    /// Only the classes of the current task.
    CurrentTask,
}

/// Frozen extractors of past tasks, one trainable extractor and the classifiers on top.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpandedModelSet {
    pub spec: BackboneSpec,
    pub extractors: Vec<Extractor>,
    pub classifier: ExpandableClassifier,
    pub aux: Linear,
    /// Class label of each classifier row.
    pub class_rows: Vec<usize>,
    /// Sorted classes of the current task.
    pub current: Vec<usize>,
}

/// Outputs of one forward pass through the expanded model.
pub struct TsForward {
    pub current: Features,
    pub concat: Var,
    pub logits: Var,
}

fn sorted(classes: &[usize]) -> Result<Vec<usize>> {
    let mut c = classes.to_vec();
    c.sort_unstable();
    c.dedup();
    if c.is_empty() || c.len() != classes.len() {
        return Err(Error::arg("task classes must be nonempty and distinct"));
    }
    Ok(c)
}

impl ExpandedModelSet {
    /// Model for the first task: one extractor and a classifier over `classes`.
    pub fn new(store: &mut ParamStore, spec: &BackboneSpec, classes: &[usize], init: &mut Rng, head: &mut Rng) -> Result<Self> {
        let current = sorted(classes)?;
        let extractor = Extractor::new(store, "ts0", spec, init)?;
        let d = spec.output_dim();
        let classifier = ExpandableClassifier::new(store, "cls", d, current.len(), head);
        let aux = Linear::new(store, "aux", d, current.len() + 1, head);
        Ok(Self {
            spec: spec.clone(),
            extractors: alloc::vec![extractor],
            classifier,
            aux,
            class_rows: current.clone(),
            current,
        })
    }

    pub fn task(&self) -> usize {
        self.extractors.len() - 1
    }

    pub fn trainable(&self) -> &Extractor {
        self.extractors.last().expect("at least one extractor")
    }

    /// Freezes the trainable extractor, appends a fresh one, expands the classifier
    /// and redraws the auxiliary head for `|classes| + 1` outputs.
    pub fn begin_task(&mut self, store: &mut ParamStore, classes: &[usize], init: &mut Rng, head: &mut Rng) -> Result<()> {
        let current = sorted(classes)?;
        if let Some(c) = current.iter().find(|c| self.class_rows.contains(c)) {
            return Err(Error::arg(format!("class {c} already seen")));
        }
        self.trainable().freeze(store);
        let t = self.extractors.len();
        let e = Extractor::new(store, &format!("ts{t}"), &self.spec, init)?;
        let d = e.output_dim(store);
        self.extractors.push(e);
        self.classifier.expand(store, current.len(), d);
        self.aux.reinit(store, d, current.len() + 1, head);
        self.class_rows.extend_from_slice(&current);
        self.current = current;
        Ok(())
    }

    pub fn label_rows(&self) -> BTreeMap<usize, usize> {
        self.class_rows.iter().enumerate().map(|(r, &c)| (c, r)).collect()
    }

    /// Classifier rows of the given labels.
    pub fn rows(&self, labels: &[usize]) -> Result<Vec<usize>> {
        let map = self.label_rows();
        labels.iter().map(|l| map.get(l).copied().ok_or(Error::UnknownLabel(*l))).collect()
    }

    /// Rows belonging to the current task.
    pub fn current_rows(&self) -> Vec<usize> {
        let first = self.class_rows.len() - self.current.len();
        (first..self.class_rows.len()).collect()
    }

    /// Auxiliary targets: `0` for old classes, `1 + rank` within the current task.
    pub fn aux_targets(&self, labels: &[usize]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|l| match self.current.binary_search(l) {
                Ok(rank) => Ok(rank + 1),
                Err(_) if self.class_rows.contains(l) => Ok(0),
                Err(_) => Err(Error::UnknownLabel(*l)),
            })
            .collect()
    }

    /// Forward pass: frozen extractors in inference mode, the trainable one in `mode`.
    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: Var, mode: NormMode) -> Result<TsForward> {
        let mut pooled = Vec::with_capacity(self.extractors.len());
        for e in &self.extractors[..self.extractors.len() - 1] {
            let (f, _) = e.forward_with(tape, store, x, NormMode::Eval)?;
            pooled.push(f.pooled);
        }
        let current = self.trainable().forward(tape, store, x, mode)?;
        pooled.push(current.pooled);
        let concat = tape.concat(&pooled, 1)?;
        let logits = self.classifier.forward(tape, store, concat)?;
        Ok(TsForward { current, concat, logits })
    }

    /// Concatenated pooled features in inference mode.
    pub fn concat_features(&self, store: &ParamStore, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let mut pooled = Vec::new();
        for e in &self.extractors {
            let (f, _) = e.forward_with(&mut tape, store, x, NormMode::Eval)?;
            pooled.push(f.pooled);
        }
        let c = tape.concat(&pooled, 1)?;
        Ok(tape.value(c).clone())
    }

    /// Inference logits over every seen class.
    pub fn logits(&self, store: &ParamStore, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = self.concat_features(store, batch)?;
        let x = tape.constant(f);
        let y = self.classifier.forward(&mut tape, store, x)?;
        Ok(tape.value(y).clone())
    }

    /// Predicted class labels.
    pub fn predict(&self, store: &ParamStore, batch: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(store, batch)?;
        let k = self.class_rows.len();
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| {
                let best = row
                    .iter()
                    .enumerate()
                    .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
                self.class_rows[best]
            })
            .collect())
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.extractors.iter().flat_map(Extractor::param_ids).collect();
        ids.extend([self.classifier.linear.weight, self.classifier.linear.bias]);
        ids.extend(self.aux.ids());
        ids
    }

    /// Learnable scalars of the inference model (extractors and main classifier).
    pub fn num_params(&self, store: &ParamStore) -> usize {
        self.extractors.iter().map(|e| e.num_params(store)).sum::<usize>() + self.classifier.num_params(store)
    }

    /// Column range of extractor `i` in the concatenated feature.
    pub fn feature_range(&self, store: &ParamStore, i: usize) -> core::ops::Range<usize> {
        let start: usize = self.extractors[..i].iter().map(|e| e.output_dim(store)).sum();
        start..start + self.extractors[i].output_dim(store)
    }
}

pub fn cls_loss(tape: &mut Tape, logits: Var, rows: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, rows)
}

/// Auxiliary cross-entropy on the trainable extractor's pooled feature.
pub fn aux_loss(tape: &mut Tape, store: &ParamStore, aux: &Linear, pooled: Var, targets: &[usize]) -> Result<Var> {
    let logits = aux.forward(tape, store, pooled)?;
    tape.cross_entropy(logits, targets)
}

/// Batch-mean `KL(softmax(teacher) ‖ softmax(student))`, with the teacher detached.
pub fn transfer_loss(tape: &mut Tape, teacher_logits: Var, student_logits: Var) -> Result<Var> {
    let (b, k) = tape.value(teacher_logits).dims2()?;
    if tape.shape(student_logits) != [b, k] {
        return Err(Error::shape("transfer_loss", &[b, k], tape.shape(student_logits)));
    }
    if b == 0 {
        return Err(Error::Empty("transfer_loss"));
    }
    let teacher = tape.detach(teacher_logits);
    let log_p = tape.log_softmax(teacher);
    let p = tape.value(log_p).map(libm::exp);
    let entropy_term: f64 = p.data().iter().zip(tape.value(log_p).data()).map(|(a, l)| if *a > 0.0 { a * l } else { 0.0 }).sum();
    let log_q = tape.log_softmax(student_logits);
    let pv = tape.constant(p);
    let cross = tape.mul(pv, log_q)?;
    let cross = tape.sum(cross);
    let neg = tape.scale(cross, -1.0 / b as f64);
    let c = tape.constant(Tensor::scalar(entropy_term / b as f64));
    tape.add(neg, c)
}

/// [`transfer_loss`] restricted to `rows` of both logit matrices.
pub fn transfer_loss_on(tape: &mut Tape, teacher_logits: Var, student_logits: Var, rows: &[usize]) -> Result<Var> {
    let t = tape.select_columns(teacher_logits, rows)?;
    let s = tape.select_columns(student_logits, rows)?;
    transfer_loss(tape, t, s)
}

/// Task-specific objective on one batch: classification, plus the auxiliary
/// term after the first task, plus transfer from `teacher` logits when given.
pub fn ts_total(
    tape: &mut Tape,
    store: &mut ParamStore,
    set: &ExpandedModelSet,
    x: Var,
    labels: &[usize],
    teacher: Option<Var>,
    mode: NormMode,
) -> Result<(Var, TsForward)> {
    let out = set.forward(tape, store, x, mode)?;
    let rows = set.rows(labels)?;
    let mut total = cls_loss(tape, out.logits, &rows)?;
    if set.task() > 0 {
        let aux = aux_loss(tape, store, &set.aux, out.current.pooled, &set.aux_targets(labels)?)?;
        total = tape.add(total, aux)?;
    }
    if let Some(t) = teacher {
        let tr = transfer_loss(tape, t, out.logits)?;
        total = tape.add(total, tr)?;
    }
    Ok((total, out))
}
