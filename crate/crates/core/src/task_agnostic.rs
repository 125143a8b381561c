//! Contrastive training of the task-agnostic extractor and its frozen snapshot.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{BackboneSpec, Extractor, Features, Mlp, NormMode};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfoNceVariant {
    /// Negatives from the opposite view only, positive left out of the denominator.
    #[default]
    CrossView,
    /// NT-Xent over all `2B` views.
    Symmetric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslConfig {
    pub temperature: f64,
    /// Hidden width of the projection head; `0` means the extractor width.
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub predictor_hidden: usize,
    pub variant: InfoNceVariant,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            proj_hidden: 0,
            proj_dim: 128,
            predictor_hidden: 128,
            variant: InfoNceVariant::CrossView,
        }
    }
}

fn diagonal_mask(n: usize) -> Tensor {
    Tensor::from_fn(&[n, n], |i| if i / n == i % n { f64::NEG_INFINITY } else { 0.0 })
}

/// Mean log-ratio of positive to negative similarities between two `[B, k]` batches.
///
/// Larger is better; the training loss is its negative.
pub fn infonce(tape: &mut Tape, z: Var, z2: Var, tau: f64, variant: InfoNceVariant) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::arg("temperature must be positive"));
    }
    let (b, _) = tape.value(z).dims2()?;
    if tape.shape(z) != tape.shape(z2) {
        return Err(Error::shape("infonce", tape.shape(z), tape.shape(z2)));
    }
    if b < 2 {
        return Err(Error::arg("infonce needs at least two pairs"));
    }
    let a = tape.normalize_rows(z)?;
    let p = tape.normalize_rows(z2)?;
    let (sim, positives) = match variant {
        InfoNceVariant::CrossView => (tape.matmul(a, p, true)?, (0..b).collect::<Vec<_>>()),
        InfoNceVariant::Symmetric => {
            let all = tape.concat(&[a, p], 0)?;
            let pos = (0..2 * b).map(|i| (i + b) % (2 * b)).collect();
            (tape.matmul(all, all, true)?, pos)
        }
    };
    let sim = tape.scale(sim, 1.0 / tau);
    let n = positives.len();
    let pos = tape.pick(sim, &positives)?;
    let mask = tape.constant(diagonal_mask(n));
    let masked = tape.add(sim, mask)?;
    let lse = tape.logsumexp_rows(masked)?;
    let ratio = tape.sub(pos, lse)?;
    Ok(tape.mean(ratio))
}

/// First-task objective: `-infonce` between the projected views.
pub fn ta_loss_initial(tape: &mut Tape, z_a: Var, z_b: Var, tau: f64, variant: InfoNceVariant) -> Result<Var> {
    let v = infonce(tape, z_a, z_b, tau, variant)?;
    Ok(tape.scale(v, -1.0))
}

/// Later-task objective: contrastive term plus prediction of the snapshot's projection.
///
/// `target` is detached here, so nothing upstream of it receives gradient.
pub fn ta_loss_incremental(
    tape: &mut Tape,
    z_a: Var,
    z_b: Var,
    predicted: Var,
    target: Var,
    tau: f64,
    variant: InfoNceVariant,
) -> Result<Var> {
    let contrast = ta_loss_initial(tape, z_a, z_b, tau, variant)?;
    let target = tape.detach(target);
    let distill = ta_loss_initial(tape, predicted, target, tau, variant)?;
    tape.add(contrast, distill)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub extractor: Extractor,
    pub head: Mlp,
}

/// Task-agnostic extractor, projection head, temporal predictor and frozen snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskAgnosticState {
    pub extractor: Extractor,
    pub head: Mlp,
    pub predictor: Mlp,
    pub snapshot: Option<Snapshot>,
    pub temperature: f64,
    pub variant: InfoNceVariant,
}

/// Value of the task-agnostic objective together with the features it produced.
pub struct TaOutput {
    pub loss: Var,
    pub view_a: Features,
}

impl TaskAgnosticState {
    pub fn new(store: &mut ParamStore, spec: &BackboneSpec, cfg: &SslConfig, rng: &mut Rng) -> Result<Self> {
        if !(cfg.temperature > 0.0) {
            return Err(Error::arg("temperature must be positive"));
        }
        let extractor = Extractor::new(store, "ta", spec, rng)?;
        let d = spec.output_dim();
        let hidden = if cfg.proj_hidden == 0 { d } else { cfg.proj_hidden };
        let head = Mlp::new(store, "ta.proj", [d, hidden, cfg.proj_dim], rng);
        let predictor = Mlp::new(store, "ta.pred", [cfg.proj_dim, cfg.predictor_hidden, cfg.proj_dim], rng);
        Ok(Self {
            extractor,
            head,
            predictor,
            snapshot: None,
            temperature: cfg.temperature,
            variant: cfg.variant,
        })
    }

    /// Parameters trained by the task-agnostic objective.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        let mut ids = self.extractor.param_ids();
        ids.extend(self.head.ids());
        ids.extend(self.predictor.ids());
        ids
    }

    pub fn snapshot_ids(&self) -> Vec<ParamId> {
        self.snapshot
            .as_ref()
            .map(|s| {
                let mut ids = s.extractor.param_ids();
                ids.extend(s.head.ids());
                ids
            })
            .unwrap_or_default()
    }

    /// Projection of already-computed pooled features.
    pub fn project(&self, tape: &mut Tape, store: &ParamStore, pooled: Var) -> Result<Var> {
        self.head.forward(tape, store, pooled)
    }

    /// Builds the task-agnostic objective on two augmented views.
    ///
    /// `continual` selects the predictive term when a snapshot exists.
    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        view_a: &Tensor,
        view_b: &Tensor,
        mode: NormMode,
        continual: bool,
    ) -> Result<TaOutput> {
        let xa = tape.constant(view_a.clone());
        let xb = tape.constant(view_b.clone());
        let fa = self.extractor.forward(tape, store, xa, mode)?;
        let fb = self.extractor.forward(tape, store, xb, mode)?;
        let za = self.project(tape, store, fa.pooled)?;
        let zb = self.project(tape, store, fb.pooled)?;
        let loss = match (&self.snapshot, continual) {
            (Some(snap), true) => {
                let (old, _) = snap.extractor.forward_with(tape, store, xa, NormMode::Eval)?;
                let target = snap.head.forward(tape, store, old.pooled)?;
                let predicted = self.predictor.forward(tape, store, za)?;
                ta_loss_incremental(tape, za, zb, predicted, target, self.temperature, self.variant)?
            }
            _ => ta_loss_initial(tape, za, zb, self.temperature, self.variant)?,
        };
        Ok(TaOutput { loss, view_a: fa })
    }

    /// Like [`Self::loss`] but fails without a snapshot.
    pub fn loss_incremental(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        view_a: &Tensor,
        view_b: &Tensor,
        mode: NormMode,
    ) -> Result<TaOutput> {
        if self.snapshot.is_none() {
            return Err(Error::MissingSnapshot);
        }
        self.loss(tape, store, view_a, view_b, mode, true)
    }

    /// Freezes a copy of the current extractor and head, then redraws the predictor.
    pub fn end_task_snapshot(&mut self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        match &self.snapshot {
            Some(s) => {
                self.extractor.copy_to(store, &s.extractor)?;
                self.head.copy_to(store, &s.head);
            }
            None => {
                let extractor = self.extractor.duplicate(store, "ta_snapshot");
                let head = self.head.duplicate(store, "ta_snapshot.proj");
                extractor.freeze(store);
                head.freeze(store);
                self.snapshot = Some(Snapshot { extractor, head });
            }
        }
        self.predictor.reinit(store, rng);
        Ok(())
    }

    /// Redraws the whole task-agnostic model (used when continual training is disabled).
    pub fn reinit(&self, store: &mut ParamStore, rng: &mut Rng) {
        self.extractor.reinit(store, rng);
        self.head.reinit(store, rng);
        self.predictor.reinit(store, rng);
    }
}

/// [`infonce`] evaluated on plain tensors.
pub fn infonce_value(z: &Tensor, z2: &Tensor, tau: f64, variant: InfoNceVariant) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(z.clone());
    let b = tape.constant(z2.clone());
    let v = infonce(&mut tape, a, b, tau, variant)?;
    Ok(tape.value(v).item())
}
