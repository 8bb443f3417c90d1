//! Single-tasking training loop.
//!
//! Every batch draws one task uniformly, takes the next samples from that
//! task's shuffled pool and performs one Adam step. Large batches are run as
//! micro-batches whose gradients are summed with weights `size / batch`, which
//! gives the full-batch gradient while keeping activations cache-sized.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{Batch, Family, MultiMnistDataset};
use crate::error::Error;
use crate::eval::{argmax_rows, check_compatible, evaluate, EvalOptions, Metrics};
use crate::graph::{Graph, SoftmaxAxis, Target, Var};
use crate::model::{control_loss, Arch, ForwardOptions, Model};
use crate::optim::{AdamConfig, AdamState};
use crate::params::{Bound, ParamStore};
use crate::rng::{rng_for, Xoshiro};
use crate::tensor::{Real, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Weight of the localisation term (TD models only); 0 disables it.
    pub lambda_loc: f64,
    /// Evaluate every this many epochs (0: only after the last epoch).
    pub eval_every: usize,
    pub eval: EvalSettings,
    /// Largest number of samples per forward pass.
    pub micro_batch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub batch: usize,
    pub workers: usize,
    pub limit_per_task: Option<usize>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        let o = EvalOptions::default();
        EvalSettings {
            batch: o.batch,
            workers: o.workers,
            limit_per_task: o.limit_per_task,
        }
    }
}

impl From<EvalSettings> for EvalOptions {
    fn from(s: EvalSettings) -> Self {
        EvalOptions {
            batch: s.batch,
            workers: s.workers,
            limit_per_task: s.limit_per_task,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            lr: 1e-3,
            batch_size: 512,
            seed: 0,
            lambda_loc: 1.0,
            eval_every: 1,
            eval: EvalSettings::default(),
            micro_batch: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.batch_size == 0 || self.micro_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !self.lambda_loc.is_finite() || self.lambda_loc < 0.0 {
            return Err(Error::Config(format!("lambda_loc must be >= 0, got {}", self.lambda_loc)));
        }
        Ok(())
    }
}

/// Inputs of one loss evaluation.
#[derive(Debug, Clone)]
pub struct LossBatch<T: Real = f32> {
    pub images: Tensor<T>,
    pub task: usize,
    pub labels: Vec<usize>,
    /// Labels of every task defined on these samples, used by the
    /// multi-branch model (`(task, labels)` pairs, including `task`).
    pub head_labels: Vec<(usize, Vec<usize>)>,
    /// Localisation targets, `(N, 1, H, W)`.
    pub target: Option<Tensor<T>>,
}

/// Training loss of `model` on `b`: classification cross-entropy (mean over
/// heads for the multi-branch model) plus the weighted localisation term
/// for TD models. Returns the loss and the logits used for accuracy.
pub fn batch_loss<T: Real>(
    model: &Model,
    g: &mut Graph<T>,
    p: &Bound,
    images: Var,
    b: &LossBatch<T>,
    lambda_loc: f64,
) -> Result<(Var, Var), TensorError> {
    if let Arch::MultiBranch(mb) = &model.arch {
        let (_, logits) = mb.forward_all(g, p, images)?;
        let mut terms = Vec::with_capacity(b.head_labels.len());
        for (t, labels) in &b.head_labels {
            let probs = g.softmax(logits[*t], SoftmaxAxis::Class)?;
            terms.push(g.cross_entropy(probs, Target::Hard(labels.clone()))?);
        }
        return Ok((g.mean_of(&terms)?, logits[b.task]));
    }
    let out = model.forward(g, p, images, b.task, ForwardOptions::default())?;
    let loss = match out.loc_logits {
        Some(loc) => control_loss(g, out.logits, &b.labels, loc, b.target.as_ref(), lambda_loc)?,
        None => {
            let probs = g.softmax(out.logits, SoftmaxAxis::Class)?;
            g.cross_entropy(probs, Target::Hard(b.labels.clone()))?
        }
    };
    Ok((loss, out.logits))
}

/// Assemble the loss inputs for samples `idx` under `task`.
pub fn loss_batch(model: &Model, ds: &MultiMnistDataset, idx: &[usize], task: usize, lambda_loc: f64) -> Result<LossBatch, Error> {
    let tasks = ds.tasks();
    let want_target = model.cfg.kind.has_td() && lambda_loc != 0.0;
    let b = Batch::assemble(ds, idx, &tasks[task], want_target)?;
    let head_labels = match (&model.arch, ds.header.family) {
        (Arch::MultiBranch(_), Family::ByLoc) => tasks
            .iter()
            .map(|t| (t.index, idx.iter().map(|&i| ds.label(i, t).expect("by-loc label") as usize).collect()))
            .collect(),
        _ => vec![(task, b.labels.clone())],
    };
    Ok(LossBatch {
        images: b.images,
        task,
        labels: b.labels,
        head_labels,
        target: b.targets,
    })
}

fn slice_rows<T: Real>(t: &Tensor<T>, lo: usize, hi: usize) -> Tensor<T> {
    let per = t.len() / t.shape()[0];
    let mut shape = t.shape().to_vec();
    shape[0] = hi - lo;
    Tensor::new(shape, t.data()[lo * per..hi * per].to_vec()).expect("sized")
}

impl LossBatch {
    fn rows(&self, lo: usize, hi: usize) -> LossBatch {
        LossBatch {
            images: slice_rows(&self.images, lo, hi),
            task: self.task,
            labels: self.labels[lo..hi].to_vec(),
            head_labels: self.head_labels.iter().map(|(t, l)| (*t, l[lo..hi].to_vec())).collect(),
            target: self.target.as_ref().map(|t| slice_rows(t, lo, hi)),
        }
    }
}

/// Loss, correct count and full-batch gradients of `b`, accumulated over
/// micro-batches of at most `micro` samples.
pub fn batch_gradients(model: &Model, b: &LossBatch, lambda_loc: f64, micro: usize) -> Result<(f64, usize, Vec<Tensor>), Error> {
    let n = b.labels.len();
    let mut grads: Vec<Tensor> = model.params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
    let mut loss = 0.0;
    let mut correct = 0;
    let mut lo = 0;
    while lo < n {
        let hi = (lo + micro).min(n);
        let part = if lo == 0 && hi == n { b.clone() } else { b.rows(lo, hi) };
        let weight = (hi - lo) as f64 / n as f64;
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let x = g.constant(part.images.clone());
        let (l, logits) = batch_loss(model, &mut g, &p, x, &part, lambda_loc)?;
        correct += argmax_rows(g.value(logits)).iter().zip(&part.labels).filter(|(a, b)| a == b).count();
        loss += weight * g.scalar_f64(l);
        let scaled = g.scale(l, weight as f32);
        let mut gr = g.backward(scaled)?;
        for (acc, &v) in grads.iter_mut().zip(p.vars()) {
            if gr.get(v).is_some() {
                for (a, d) in acc.data_mut().iter_mut().zip(gr.take(v).data()) {
                    *a += *d;
                }
            }
        }
        lo = hi;
    }
    Ok((loss, correct, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Per task: (batches, summed batch loss, correct, seen).
    pub train: Vec<TrainTaskStats>,
    pub eval: Option<Metrics>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TrainTaskStats {
    pub batches: usize,
    pub loss_sum: f64,
    pub correct: usize,
    pub seen: usize,
}

impl TrainTaskStats {
    pub fn accuracy(&self) -> f64 {
        if self.seen == 0 {
            0.0
        } else {
            self.correct as f64 / self.seen as f64
        }
    }

    pub fn mean_loss(&self) -> f64 {
        if self.batches == 0 {
            0.0
        } else {
            self.loss_sum / self.batches as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    /// Loss of every optimizer step, in order.
    pub batch_losses: Vec<f64>,
    /// Parameters with the best mean eval accuracy (final parameters when
    /// there is no eval set).
    pub best_params: ParamStore,
    pub best_epoch: usize,
    pub best_eval: Option<Metrics>,
    pub seconds: f64,
}

/// Per-task shuffled pools consumed batch by batch.
struct Pools {
    pools: Vec<Vec<usize>>,
    cursor: Vec<usize>,
}

impl Pools {
    fn new(ds: &MultiMnistDataset, rng: &mut Xoshiro) -> Result<Self, Error> {
        let mut pools = Vec::new();
        for task in ds.tasks() {
            let mut p = ds.indices_for(&task);
            if p.is_empty() {
                return Err(Error::TaskMismatch(format!("no training samples for task {task}")));
            }
            p.shuffle(rng);
            pools.push(p);
        }
        let cursor = vec![0; pools.len()];
        Ok(Pools { pools, cursor })
    }

    fn next(&mut self, task: usize, n: usize, rng: &mut Xoshiro) -> Vec<usize> {
        let pool = &mut self.pools[task];
        let n = n.min(pool.len());
        if self.cursor[task] + n > pool.len() {
            pool.shuffle(rng);
            self.cursor[task] = 0;
        }
        let out = pool[self.cursor[task]..self.cursor[task] + n].to_vec();
        self.cursor[task] += n;
        out
    }
}

/// Train `model` in place. `on_epoch` sees every finished epoch.
pub fn train(
    model: &mut Model,
    train_ds: &MultiMnistDataset,
    eval_ds: Option<&MultiMnistDataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport, Error> {
    cfg.validate()?;
    check_compatible(model, train_ds)?;
    if let Some(e) = eval_ds {
        check_compatible(model, e)?;
    }
    let start = Instant::now();
    let tasks = train_ds.task_count();
    let mut rng = rng_for(cfg.seed, 2);
    let mut pools = Pools::new(train_ds, &mut rng)?;
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut adams: Vec<AdamState> = (0..model.optimizer_groups())
        .map(|_| AdamState::new(&model.params, adam_cfg))
        .collect();
    let trainable: Vec<Vec<usize>> = (0..tasks).map(|t| model.trainable_for(t)).collect();
    let batches_per_epoch = train_ds.len().div_ceil(cfg.batch_size);

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut batch_losses = Vec::new();
    let mut best_params = model.params.clone();
    let mut best_epoch = 0;
    let mut best_eval: Option<Metrics> = None;
    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let mut stats = vec![TrainTaskStats::default(); tasks];
        for batch in 0..batches_per_epoch {
            let task = rng.gen_range(0..tasks);
            let idx = pools.next(task, cfg.batch_size, &mut rng);
            let b = loss_batch(model, train_ds, &idx, task, cfg.lambda_loc)?;
            let (loss, correct, grads) = batch_gradients(model, &b, cfg.lambda_loc, cfg.micro_batch)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::NonFinite { epoch, batch: batch + 1 });
            }
            adams[model.optimizer_group(task)].step_indices(&mut model.params, &grads, &trainable[task]);
            batch_losses.push(loss);
            let s = &mut stats[task];
            s.batches += 1;
            s.loss_sum += loss;
            s.correct += correct;
            s.seen += idx.len();
        }
        let due = epoch == cfg.epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0);
        let eval = match eval_ds {
            Some(e) if due => Some(evaluate(model, e, cfg.eval.into())?),
            _ => None,
        };
        if let Some(m) = &eval {
            if best_eval.as_ref().is_none_or(|b| m.mean_accuracy() > b.mean_accuracy()) {
                best_eval = Some(m.clone());
                best_params = model.params.clone();
                best_epoch = epoch;
            }
        }
        let record = EpochRecord {
            epoch,
            train: stats,
            eval,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.push(record);
    }
    if eval_ds.is_none() {
        best_params = model.params.clone();
        best_epoch = cfg.epochs;
    }
    Ok(TrainReport {
        history,
        batch_losses,
        best_params,
        best_epoch,
        best_eval,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// CSV header of the metrics file.
pub const METRICS_HEADER: &str = "epoch,task,split,accuracy,loss";

/// Metrics rows (`epoch,task,split,accuracy,loss`) of one epoch: per-task
/// train and eval rows followed by a `mean` row per split.
pub fn metrics_rows(record: &EpochRecord, task_names: &[String]) -> Vec<String> {
    let mut rows = Vec::new();
    let e = record.epoch;
    let seen: Vec<&TrainTaskStats> = record.train.iter().filter(|s| s.batches > 0).collect();
    for (name, s) in task_names.iter().zip(&record.train) {
        if s.batches > 0 {
            rows.push(format!("{e},{name},train,{:.6},{:.6}", s.accuracy(), s.mean_loss()));
        }
    }
    if !seen.is_empty() {
        let acc = seen.iter().map(|s| s.accuracy()).sum::<f64>() / seen.len() as f64;
        let loss = seen.iter().map(|s| s.mean_loss()).sum::<f64>() / seen.len() as f64;
        rows.push(format!("{e},mean,train,{acc:.6},{loss:.6}"));
    }
    if let Some(m) = &record.eval {
        for (name, t) in task_names.iter().zip(&m.per_task) {
            rows.push(format!("{e},{name},eval,{:.6},{:.6}", t.accuracy(), t.mean_loss()));
        }
        rows.push(format!("{e},mean,eval,{:.6},{:.6}", m.mean_accuracy(), m.mean_loss()));
    }
    rows
}
