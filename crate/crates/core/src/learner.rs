//! Per-task training loop that combines every loss term.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::analysis::{accuracy, cka_report, CkaReport};
use crate::autograd::{Tape, Var};
use crate::data::{augment_image, batch_tensor, two_view_augment, AugmentConfig, Image, RehearsalMemory, Sample, SampleRef, TaskDataset};
use crate::error::{Error, Result};
use crate::merge::{merge_logits, mcls_loss, record_attention, AttentionRecord, MergeAttentionBlock};
use crate::model::{BackboneSpec, ExpandableClassifier, NormMode};
use crate::params::{cosine_lr, ParamMeta, ParamStore, Sgd};
use crate::pruning::{apply_plan, build_plan, build_threshold_plan, PruningPlan};
use crate::rng::{derive_seed, rng_for, tag, Rng};
use crate::task_agnostic::{SslConfig, TaskAgnosticState};
use crate::task_specific::{aux_loss, cls_loss, transfer_loss, transfer_loss_on, ExpandedModelSet, LossWeights, TransferSupport};
use crate::tensor::Tensor;

/// Sub-stream tags for parameter initialization.
pub mod module {
    pub const TS: u64 = 10;
    pub const HEAD: u64 = 11;
    pub const TA: u64 = 12;
    pub const MERGE: u64 = 13;
    pub const MCLS: u64 = 14;
    pub const PREDICTOR: u64 = 15;
}

/// Generator used to initialize `module` at the start of `task`.
pub fn init_rng(seed: u64, module: u64, task: usize) -> Rng {
    rng_for(seed, &[tag::INIT, module, task as u64])
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Flags {
    /// Plain expansion baseline: no task-agnostic model, merge block or transfer.
    pub der_baseline: bool,
    pub disable_transfer: bool,
    /// Redraw the task-agnostic model every task and train it contrastively only.
    pub disable_continual_ta: bool,
    pub disable_merge: bool,
    pub t0_merge_enabled: bool,
    pub ta_on_rehearsal: bool,
    pub mcls_on_rehearsal: bool,
    pub transfer_on_rehearsal: bool,
}

impl Default for Flags {
    fn default() -> Self {
        Self {
            der_baseline: false,
            disable_transfer: false,
            disable_continual_ta: false,
            disable_merge: false,
            t0_merge_enabled: true,
            ta_on_rehearsal: true,
            mcls_on_rehearsal: true,
            transfer_on_rehearsal: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PruneMode {
    Fpgm,
    Threshold { threshold: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub enabled: bool,
    pub rate: f64,
    pub mode: PruneMode,
    pub finetune_epochs: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            rate: 0.4,
            mode: PruneMode::Fpgm,
            finetune_epochs: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub backbone: BackboneSpec,
    pub capacity: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub ssl: SslConfig,
    pub ssl_augment: AugmentConfig,
    pub cls_augment: AugmentConfig,
    pub heads: usize,
    pub transfer_support: TransferSupport,
    pub flags: Flags,
    pub prune: PruneConfig,
    /// Current-task images used to record attention maps.
    pub attention_probe: usize,
    pub eval_batch: usize,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneSpec::desk(),
            capacity: 2000,
            epochs: 20,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            weights: LossWeights::default(),
            ssl: SslConfig::default(),
            ssl_augment: AugmentConfig::default(),
            cls_augment: AugmentConfig::weak(),
            heads: 4,
            transfer_support: TransferSupport::Full,
            flags: Flags::default(),
            prune: PruneConfig::default(),
            attention_probe: 64,
            eval_batch: 256,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.weights.validate()?;
        if self.batch_size < 2 {
            return Err(Error::arg("batch_size must be at least 2"));
        }
        if self.eval_batch == 0 {
            return Err(Error::arg("eval_batch must be positive"));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::arg("invalid optimizer settings"));
        }
        if !(self.ssl.temperature > 0.0) {
            return Err(Error::arg("temperature must be positive"));
        }
        let d = self.backbone.output_dim();
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::arg(format!("{} heads do not divide width {d}", self.heads)));
        }
        if self.prune.enabled {
            if let PruneMode::Fpgm = self.prune.mode {
                if !(self.prune.rate > 0.0 && self.prune.rate < 1.0) {
                    return Err(Error::arg("prune rate outside (0, 1)"));
                }
            }
        }
        Ok(())
    }

    /// Whether the task-agnostic branch and merge block exist at all.
    pub fn tagfex(&self) -> bool {
        !self.flags.der_baseline
    }
}

/// How many times each loss term entered an objective.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossCounters {
    pub cls: u64,
    pub aux: u64,
    pub ta_contrastive: u64,
    pub ta_predictive: u64,
    pub mcls: u64,
    pub transfer: u64,
}

/// One training mini-batch.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    /// Classification input, NCHW.
    pub x: Tensor,
    /// Contrastive views, NCHW.
    pub view_a: Tensor,
    pub view_b: Tensor,
    pub labels: Vec<usize>,
    /// Whether each sample came from the rehearsal memory.
    pub rehearsal: Vec<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub total: f64,
    pub cls: f64,
    pub aux: Option<f64>,
    pub ta: Option<f64>,
    pub mcls: Option<f64>,
    pub transfer: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeParts {
    pub block: MergeAttentionBlock,
    pub classifier: ExpandableClassifier,
}

/// Everything but parameter values and exemplar images, for checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerState {
    pub config: LearnerConfig,
    pub seed: u64,
    pub tasks_begun: usize,
    pub tasks_finished: usize,
    pub ts: Option<ExpandedModelSet>,
    pub ta: Option<TaskAgnosticState>,
    pub merge: Option<MergeParts>,
    pub memory_quota: usize,
    pub memory_refs: BTreeMap<usize, Vec<SampleRef>>,
    pub counters: LossCounters,
    pub attention: Vec<AttentionRecord>,
    pub plans: Vec<PruningPlan>,
    pub params: Vec<ParamMeta>,
}

#[derive(Clone, Debug)]
pub struct Learner {
    pub config: LearnerConfig,
    pub seed: u64,
    pub store: ParamStore,
    pub ts: Option<ExpandedModelSet>,
    pub ta: Option<TaskAgnosticState>,
    pub merge: Option<MergeParts>,
    pub memory: RehearsalMemory,
    pub sgd: Sgd,
    pub counters: LossCounters,
    pub attention: Vec<AttentionRecord>,
    pub plans: Vec<PruningPlan>,
    pub tasks_begun: usize,
    pub tasks_finished: usize,
}

/// Sample drawn for training, with its position in the task stream.
#[derive(Clone, Copy, Debug)]
pub struct PoolItem<'a> {
    pub sample: &'a Sample,
    pub rehearsal: bool,
}

fn view_tensor(images: &[Image]) -> Result<Tensor> {
    let refs: Vec<&Image> = images.iter().collect();
    batch_tensor(&refs)
}

impl Learner {
    pub fn new(config: LearnerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            memory: RehearsalMemory::new(config.capacity),
            sgd: Sgd::new(config.lr, config.momentum, config.weight_decay),
            config,
            seed,
            store: ParamStore::new(),
            ts: None,
            ta: None,
            merge: None,
            counters: LossCounters::default(),
            attention: Vec::new(),
            plans: Vec::new(),
            tasks_begun: 0,
            tasks_finished: 0,
        })
    }

    fn ts(&self) -> Result<&ExpandedModelSet> {
        self.ts.as_ref().ok_or_else(|| Error::State("no task has begun".into()))
    }

    /// Index of the task being trained.
    pub fn task(&self) -> Result<usize> {
        self.tasks_begun.checked_sub(1).ok_or_else(|| Error::State("no task has begun".into()))
    }

    /// Whether the merge block and its losses are active in the current task.
    pub fn merge_active(&self) -> bool {
        self.config.tagfex()
            && !self.config.flags.disable_merge
            && self.merge.is_some()
            && (self.tasks_begun > 1 || self.config.flags.t0_merge_enabled)
    }

    /// Sets up the models for a new task over `classes`.
    pub fn begin_task(&mut self, classes: &[usize]) -> Result<()> {
        if self.tasks_begun != self.tasks_finished {
            return Err(Error::State("previous task not finished".into()));
        }
        let t = self.tasks_begun;
        let (seed, cfg) = (self.seed, self.config.clone());
        let mut init = init_rng(seed, module::TS, t);
        let mut head = init_rng(seed, module::HEAD, t);
        match &mut self.ts {
            None => {
                self.ts = Some(ExpandedModelSet::new(&mut self.store, &cfg.backbone, classes, &mut init, &mut head)?);
                if cfg.tagfex() {
                    let ta = TaskAgnosticState::new(&mut self.store, &cfg.backbone, &cfg.ssl, &mut init_rng(seed, module::TA, t))?;
                    self.ta = Some(ta);
                    let d = cfg.backbone.output_dim();
                    let block = MergeAttentionBlock::new(&mut self.store, "merge", d, cfg.heads, &mut init_rng(seed, module::MERGE, t))?;
                    let classifier = ExpandableClassifier::new(&mut self.store, "mcls", d, classes.len(), &mut init_rng(seed, module::MCLS, t));
                    self.merge = Some(MergeParts { block, classifier });
                }
            }
            Some(ts) => {
                ts.begin_task(&mut self.store, classes, &mut init, &mut head)?;
                if let Some(m) = &self.merge {
                    m.classifier.expand(&mut self.store, classes.len(), 0);
                }
                if cfg.flags.disable_continual_ta {
                    if let Some(ta) = &self.ta {
                        ta.reinit(&mut self.store, &mut init_rng(seed, module::TA, t));
                    }
                }
            }
        }
        self.sgd = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
        self.tasks_begun += 1;
        Ok(())
    }

    /// Current-task samples followed by rehearsal exemplars.
    pub fn training_pool<'a>(&'a self, task: &'a TaskDataset) -> Vec<PoolItem<'a>> {
        task.samples
            .iter()
            .map(|s| PoolItem { sample: s, rehearsal: false })
            .chain(self.memory.exemplars().map(|e| PoolItem {
                sample: &e.sample,
                rehearsal: true,
            }))
            .collect()
    }

    /// Augments the samples at `positions` of the pool into a batch.
    pub fn make_batch(&self, pool: &[PoolItem<'_>], positions: &[usize], epoch: usize) -> Result<TrainBatch> {
        let t = self.task()? as u64;
        let mut xs = Vec::with_capacity(positions.len());
        let mut va = Vec::new();
        let mut vb = Vec::new();
        let need_views = self.config.tagfex() && self.config.weights.ta > 0.0;
        for &p in positions {
            let img = &pool[p].sample.image;
            let s = derive_seed(self.seed, &[tag::AUGMENT, t, epoch as u64, p as u64]);
            xs.push(augment_image(img, derive_seed(s, &[0]), &self.config.cls_augment));
            if need_views {
                let pair = two_view_augment(img, p, derive_seed(s, &[1]), &self.config.ssl_augment);
                va.push(pair.view_a);
                vb.push(pair.view_b);
            }
        }
        let x = view_tensor(&xs)?;
        let (view_a, view_b) = if need_views {
            (view_tensor(&va)?, view_tensor(&vb)?)
        } else {
            (Tensor::zeros(&[0]), Tensor::zeros(&[0]))
        };
        Ok(TrainBatch {
            x,
            view_a,
            view_b,
            labels: positions.iter().map(|&p| pool[p].sample.label).collect(),
            rehearsal: positions.iter().map(|&p| pool[p].rehearsal).collect(),
        })
    }

    /// One optimizer step on the full objective.
    pub fn train_step(&mut self, batch: &TrainBatch) -> Result<StepReport> {
        self.step(batch, false)
    }

    /// Builds the objective for `batch`; `classification_only` keeps just the
    /// expansion-model terms (used for post-pruning fine-tuning).
    fn step(&mut self, batch: &TrainBatch, classification_only: bool) -> Result<StepReport> {
        let t = self.task()?;
        let cfg = self.config.clone();
        let ts = self.ts()?.clone();
        let rows = ts.rows(&batch.labels)?;
        let mut tape = Tape::new();
        let mut report = StepReport::default();

        let x = tape.constant(batch.x.clone());
        let out = ts.forward(&mut tape, &mut self.store, x, NormMode::Train)?;
        let mut total = cls_loss(&mut tape, out.logits, &rows)?;
        self.counters.cls += 1;
        report.cls = tape.value(total).item();
        if t > 0 {
            let targets = ts.aux_targets(&batch.labels)?;
            let aux = aux_loss(&mut tape, &self.store, &ts.aux, out.current.pooled, &targets)?;
            self.counters.aux += 1;
            report.aux = Some(tape.value(aux).item());
            total = tape.add(total, aux)?;
        }

        if cfg.tagfex() && !classification_only {
            let ta = self.ta.clone().ok_or_else(|| Error::State("task-agnostic model missing".into()))?;
            let merge_on = self.merge_active();
            if merge_on {
                let parts = self.merge.clone().expect("merge_active");
                let (ta_map, _) = ta.extractor.forward_with(&mut tape, &self.store, x, NormMode::BatchStats)?;
                let merged = parts.block.forward(&mut tape, &self.store, out.current.spatial, ta_map.spatial)?;
                let mlogits = merge_logits(&mut tape, &self.store, merged.merged, &parts.classifier)?;
                let keep = |on_rehearsal: bool| -> Vec<usize> {
                    (0..rows.len()).filter(|&i| on_rehearsal || !batch.rehearsal[i]).collect()
                };
                if !cfg.flags.disable_transfer {
                    let sel = keep(cfg.flags.transfer_on_rehearsal);
                    if !sel.is_empty() {
                        let (teacher, student) = subset(&mut tape, mlogits, out.logits, &sel, rows.len())?;
                        let tr = match cfg.transfer_support {
                            TransferSupport::Full => transfer_loss(&mut tape, teacher, student)?,
                            TransferSupport::CurrentTask => transfer_loss_on(&mut tape, teacher, student, &ts.current_rows())?,
                        };
                        self.counters.transfer += 1;
                        report.transfer = Some(tape.value(tr).item());
                        total = tape.add(total, tr)?;
                    }
                }
                if cfg.weights.mcls > 0.0 {
                    let sel = keep(cfg.flags.mcls_on_rehearsal);
                    if !sel.is_empty() {
                        let logits = if sel.len() == rows.len() { mlogits } else { tape.select_rows(mlogits, &sel)? };
                        let targets: Vec<usize> = sel.iter().map(|&i| rows[i]).collect();
                        let l = mcls_loss(&mut tape, logits, &targets)?;
                        self.counters.mcls += 1;
                        report.mcls = Some(tape.value(l).item());
                        let l = tape.scale(l, cfg.weights.mcls);
                        total = tape.add(total, l)?;
                    }
                }
            }
            if cfg.weights.ta > 0.0 {
                let sel: Vec<usize> = (0..rows.len()).filter(|&i| cfg.flags.ta_on_rehearsal || !batch.rehearsal[i]).collect();
                if sel.len() >= 2 {
                    let (va, vb) = if sel.len() == rows.len() {
                        (batch.view_a.clone(), batch.view_b.clone())
                    } else {
                        (select_batch(&batch.view_a, &sel)?, select_batch(&batch.view_b, &sel)?)
                    };
                    let continual = !cfg.flags.disable_continual_ta;
                    let predictive = continual && ta.snapshot.is_some();
                    let l = ta.loss(&mut tape, &mut self.store, &va, &vb, NormMode::Train, continual)?.loss;
                    self.counters.ta_contrastive += 1;
                    if predictive {
                        self.counters.ta_predictive += 1;
                    }
                    report.ta = Some(tape.value(l).item());
                    let l = tape.scale(l, cfg.weights.ta);
                    total = tape.add(total, l)?;
                }
            }
        }

        report.total = tape.value(total).item();
        if !report.total.is_finite() {
            return Err(Error::State(format!("non-finite loss at task {t}")));
        }
        let grads = tape.backward(total)?.into_params();
        self.sgd.step(&mut self.store, &grads);
        Ok(report)
    }

    /// Seeded permutation of the pool for `epoch`, cut into batches of at least two.
    pub fn epoch_batches(&self, pool_len: usize, epoch: usize) -> Result<Vec<Vec<usize>>> {
        use rand::seq::SliceRandom;
        let t = self.task()? as u64;
        let mut order: Vec<usize> = (0..pool_len).collect();
        order.shuffle(&mut rng_for(self.seed, &[tag::SHUFFLE, t, epoch as u64]));
        Ok(order
            .chunks(self.config.batch_size)
            .filter(|c| c.len() >= 2)
            .map(<[usize]>::to_vec)
            .collect())
    }

    /// One pass over current data and memory with the cosine schedule.
    pub fn train_epoch(&mut self, task: &TaskDataset, epoch: usize) -> Result<Vec<StepReport>> {
        self.run_epoch(task, epoch, self.config.epochs, false)
    }

    fn run_epoch(&mut self, task: &TaskDataset, epoch: usize, epochs: usize, classification_only: bool) -> Result<Vec<StepReport>> {
        self.sgd.lr = cosine_lr(self.config.lr, epoch, epochs);
        let pool_owned: Vec<(Sample, bool)> = self.training_pool(task).into_iter().map(|p| (p.sample.clone(), p.rehearsal)).collect();
        let pool: Vec<PoolItem<'_>> = pool_owned.iter().map(|(s, r)| PoolItem { sample: s, rehearsal: *r }).collect();
        let mut reports = Vec::new();
        for positions in self.epoch_batches(pool.len(), epoch)? {
            let batch = self.make_batch(&pool, &positions, epoch)?;
            reports.push(self.step(&batch, classification_only)?);
        }
        Ok(reports)
    }

    /// Head-averaged attention of the merge block over `probe`, in inference mode.
    pub fn probe_attention(&self, probe: &[&Image]) -> Result<Option<Tensor>> {
        if !self.merge_active() || probe.is_empty() {
            return Ok(None);
        }
        let (ts, ta, parts) = (self.ts()?, self.ta.as_ref().expect("tagfex"), self.merge.as_ref().expect("merge"));
        let batch = batch_tensor(probe)?;
        let mut tape = Tape::new();
        let x = tape.constant(batch);
        let (f_ts, _) = ts.trainable().forward_with(&mut tape, &self.store, x, NormMode::Eval)?;
        let (f_ta, _) = ta.extractor.forward_with(&mut tape, &self.store, x, NormMode::Eval)?;
        Ok(Some(parts.block.forward(&mut tape, &self.store, f_ts.spatial, f_ta.spatial)?.attention))
    }

    /// Records the probe attention for `epoch` of the current task.
    pub fn record_probe(&mut self, probe: &[&Image], epoch: usize) -> Result<()> {
        if let Some(maps) = self.probe_attention(probe)? {
            let rec = record_attention(&maps, self.task()?, epoch)?;
            self.attention.push(rec);
        }
        Ok(())
    }

    /// Trains every epoch of the current task, recording attention before the
    /// first epoch (epoch 0) and after each epoch `e` (as `e + 1`).
    pub fn train_task(&mut self, task: &TaskDataset) -> Result<Vec<f64>> {
        let probe: Vec<Image> = task.samples.iter().take(self.config.attention_probe).map(|s| s.image.clone()).collect();
        let probe_refs: Vec<&Image> = probe.iter().collect();
        self.record_probe(&probe_refs, 0)?;
        let mut losses = Vec::new();
        for e in 0..self.config.epochs {
            let r = self.train_epoch(task, e)?;
            losses.push(r.iter().map(|s| s.total).sum::<f64>() / r.len().max(1) as f64);
            self.record_probe(&probe_refs, e + 1)?;
        }
        Ok(losses)
    }

    /// Snapshot, memory rebalance and optional pruning.
    pub fn end_task(&mut self, task: &TaskDataset) -> Result<()> {
        let t = self.task()?;
        if self.tasks_finished != t {
            return Err(Error::State("task already finished".into()));
        }
        if !self.config.flags.disable_continual_ta {
            if let Some(ta) = &mut self.ta {
                ta.end_task_snapshot(&mut self.store, &mut init_rng(self.seed, module::PREDICTOR, t + 1))?;
            }
        }
        let ts = self.ts()?.clone();
        let store = &self.store;
        self.memory.rebalance(task, |images| {
            let mut rows = Vec::new();
            for chunk in images.chunks(256) {
                let b = batch_tensor(chunk)?;
                rows.extend_from_slice(ts.trainable().forward_features(store, &b)?.1.data());
            }
            let d = ts.trainable().output_dim(store);
            Tensor::new(&[images.len(), d], rows)
        })?;
        if self.config.prune.enabled {
            self.prune_current(task)?;
        }
        self.tasks_finished += 1;
        Ok(())
    }

    fn prune_current(&mut self, task: &TaskDataset) -> Result<()> {
        let ts = self.ts()?.clone();
        let i = ts.extractors.len() - 1;
        let plan = self.prune_extractor(i, &self.config.prune.mode.clone())?;
        self.plans.push(plan);
        for e in 0..self.config.prune.finetune_epochs {
            self.run_epoch(task, e, self.config.prune.finetune_epochs, true)?;
        }
        Ok(())
    }

    /// Prunes extractor `i` and the classifier columns fed by it.
    pub fn prune_extractor(&mut self, i: usize, mode: &PruneMode) -> Result<PruningPlan> {
        let ts = self.ts()?.clone();
        let e = ts.extractors.get(i).ok_or_else(|| Error::arg(format!("no extractor {i}")))?;
        let plan = match mode {
            PruneMode::Fpgm => build_plan(e, &self.store, self.config.prune.rate)?,
            PruneMode::Threshold { threshold } => build_threshold_plan(e, &self.store, *threshold)?,
        };
        self.apply_pruning(i, &plan)?;
        Ok(plan)
    }

    /// Applies `plan` to extractor `i` and drops the matching classifier columns.
    pub fn apply_pruning(&mut self, i: usize, plan: &PruningPlan) -> Result<()> {
        let ts = self.ts()?.clone();
        let range = ts.feature_range(&self.store, i);
        let total = ts.classifier.in_dim(&self.store);
        let kept = apply_plan(&ts.extractors[i], &mut self.store, plan)?;
        let cols: Vec<usize> = (0..range.start)
            .chain(kept.iter().map(|k| range.start + k))
            .chain(range.end..total)
            .collect();
        ts.classifier.remove_inputs(&mut self.store, &cols);
        if i + 1 == ts.extractors.len() {
            let aux_cols: Vec<usize> = kept.clone();
            let w = self.store.get(ts.aux.weight).clone();
            let (r, c) = w.dims2()?;
            let data = (0..r).flat_map(|row| aux_cols.iter().map(move |&k| (row, k))).map(|(row, k)| w.data()[row * c + k]).collect();
            self.store.set(ts.aux.weight, Tensor::new(&[r, aux_cols.len()], data)?);
        }
        Ok(())
    }

    /// Accuracy over `samples` using every seen class.
    pub fn evaluate(&self, samples: &[&Sample]) -> Result<f64> {
        let ts = self.ts()?;
        let mut predicted = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(self.config.eval_batch) {
            let imgs: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
            predicted.extend(ts.predict(&self.store, &batch_tensor(&imgs)?)?);
        }
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        accuracy(&predicted, &labels)
    }

    /// Pairwise linear CKA between the task-specific extractors on `probe`.
    pub fn cka(&self, probe: &[&Image]) -> Result<Option<CkaReport>> {
        let ts = self.ts()?;
        if ts.extractors.len() < 2 {
            return Ok(None);
        }
        let batch = batch_tensor(probe)?;
        let feats = ts
            .extractors
            .iter()
            .map(|e| e.forward_features(&self.store, &batch).map(|f| f.1))
            .collect::<Result<Vec<_>>>()?;
        cka_report(&feats).map(Some)
    }

    /// Learnable scalars of the inference model.
    pub fn inference_params(&self) -> usize {
        self.ts.as_ref().map_or(0, |ts| ts.num_params(&self.store))
    }

    pub fn ta_params(&self) -> usize {
        self.ta.as_ref().map_or(0, |ta| ta.extractor.num_params(&self.store))
    }

    pub fn state(&self) -> LearnerState {
        LearnerState {
            config: self.config.clone(),
            seed: self.seed,
            tasks_begun: self.tasks_begun,
            tasks_finished: self.tasks_finished,
            ts: self.ts.clone(),
            ta: self.ta.clone(),
            merge: self.merge.clone(),
            memory_quota: self.memory.quota(),
            memory_refs: self.memory.refs(),
            counters: self.counters.clone(),
            attention: self.attention.clone(),
            plans: self.plans.clone(),
            params: self.store.iter().map(|(_, m, _)| m.clone()).collect(),
        }
    }

    /// Rebuilds a learner between tasks from its state, parameter values and the task stream.
    pub fn from_state(state: LearnerState, tensors: Vec<Tensor>, tasks: &[TaskDataset]) -> Result<Self> {
        if state.tasks_begun != state.tasks_finished {
            return Err(Error::State("checkpoint taken mid-task".into()));
        }
        if state.params.len() != tensors.len() {
            return Err(Error::State(format!("{} parameter entries but {} tensors", state.params.len(), tensors.len())));
        }
        state.config.validate()?;
        let store = ParamStore::from_parts(state.params.into_iter().zip(tensors).collect())?;
        let memory = RehearsalMemory::from_refs(state.config.capacity, state.memory_quota, &state.memory_refs, tasks)?;
        Ok(Self {
            sgd: Sgd::new(state.config.lr, state.config.momentum, state.config.weight_decay),
            config: state.config,
            seed: state.seed,
            store,
            ts: state.ts,
            ta: state.ta,
            merge: state.merge,
            memory,
            counters: state.counters,
            attention: state.attention,
            plans: state.plans,
            tasks_begun: state.tasks_begun,
            tasks_finished: state.tasks_finished,
        })
    }
}

fn subset(tape: &mut Tape, a: Var, b: Var, sel: &[usize], n: usize) -> Result<(Var, Var)> {
    if sel.len() == n {
        return Ok((a, b));
    }
    Ok((tape.select_rows(a, sel)?, tape.select_rows(b, sel)?))
}

fn select_batch(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let n = t.shape()[0];
    let per = t.len() / n.max(1);
    let mut data = Vec::with_capacity(rows.len() * per);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * per..(r + 1) * per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    Tensor::new(&shape, data)
}
