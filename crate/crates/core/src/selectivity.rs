//! Task selectivity of the final representation.
//!
//! For every selected task the model is frozen and its pre-logit features are
//! computed with that task active. One linear readout head per grid location
//! is then trained on those features; `A[t][r]` is the eval accuracy of head
//! `r` under selected task `t`. A representation that carries only the
//! selected digit has a high diagonal and chance-level off-diagonal.

use std::fmt;

use rand::seq::SliceRandom;

use crate::data::{Batch, Family, MultiMnistDataset};
use crate::error::Error;
use crate::eval::{argmax_rows, check_compatible, infer};
use crate::graph::{Graph, SoftmaxAxis, Target};
use crate::model::{Dense, ForwardOptions, Model};
use crate::optim::{AdamConfig, AdamState};
use crate::parallel::{map_indices, worker_count};
use crate::params::ParamStore;
use crate::rng::rng_for;
use crate::tensor::Tensor;

/// Ten-class chance level.
pub const CHANCE: f64 = 0.1;
/// Denominators at or below this are reported as degenerate.
pub const MIN_DENOMINATOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selectivity {
    Value(f64),
    /// Off-diagonal accuracy is not measurably above chance.
    Degenerate { denominator: f64 },
}

impl Selectivity {
    pub fn value(self) -> Option<f64> {
        match self {
            Selectivity::Value(v) => Some(v),
            Selectivity::Degenerate { .. } => None,
        }
    }
}

impl fmt::Display for Selectivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selectivity::Value(v) => write!(f, "{v:.4}"),
            Selectivity::Degenerate { .. } => f.write_str("degenerate"),
        }
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn diagonal_mean(matrix: &[Vec<f64>]) -> f64 {
    mean(matrix.iter().enumerate().map(|(i, row)| row[i]))
}

pub fn off_diagonal_mean(matrix: &[Vec<f64>]) -> f64 {
    mean(
        matrix
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().enumerate().filter(move |(j, _)| *j != i).map(|(_, &v)| v)),
    )
}

/// `(mean diagonal - chance) / (mean off-diagonal - chance)`.
pub fn selectivity_index(matrix: &[Vec<f64>], chance: f64) -> Selectivity {
    let denominator = off_diagonal_mean(matrix) - chance;
    if denominator > MIN_DENOMINATOR {
        Selectivity::Value((diagonal_mean(matrix) - chance) / denominator)
    } else {
        Selectivity::Degenerate { denominator }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectivityReport {
    /// `matrix[selected][readout]`.
    pub matrix: Vec<Vec<f64>>,
    pub task_names: Vec<String>,
    pub chance: f64,
    pub index: Selectivity,
}

impl SelectivityReport {
    pub fn new(matrix: Vec<Vec<f64>>, task_names: Vec<String>) -> Self {
        let index = selectivity_index(&matrix, CHANCE);
        SelectivityReport {
            matrix,
            task_names,
            chance: CHANCE,
            index,
        }
    }

    pub fn diagonal_mean(&self) -> f64 {
        diagonal_mean(&self.matrix)
    }

    pub fn off_diagonal_mean(&self) -> f64 {
        off_diagonal_mean(&self.matrix)
    }

    /// One row per selected task, one column per readout head.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("selected");
        for n in &self.task_names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (name, row) in self.task_names.iter().zip(&self.matrix) {
            out.push_str(name);
            for v in row {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReadoutConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
    pub workers: usize,
}

impl Default for ReadoutConfig {
    fn default() -> Self {
        ReadoutConfig {
            epochs: 10,
            lr: 1e-3,
            batch_size: 128,
            seed: 0,
            workers: worker_count(),
        }
    }
}

/// Frozen `(N, fc_hidden)` features of every sample of `ds` with `task`
/// selected, plus the label of every location.
fn features(model: &Model, ds: &MultiMnistDataset, task: usize, workers: usize) -> Result<Tensor, Error> {
    let tasks = ds.tasks();
    let idx: Vec<usize> = (0..ds.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(64).collect();
    let parts = map_indices(chunks.len(), workers, |j| -> Result<Tensor, Error> {
        let b = Batch::assemble(ds, chunks[j], &tasks[task], false)?;
        Ok(infer(model, &b.images, task, ForwardOptions::default())?.features)
    });
    let mut data = Vec::new();
    let mut width = 0;
    for p in parts {
        let p = p?;
        width = p.shape()[1];
        data.extend_from_slice(p.data());
    }
    Ok(Tensor::new(vec![ds.len(), width], data)?)
}

fn rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let w = t.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * w);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
    }
    Tensor::new(vec![idx.len(), w], data).expect("sized")
}

/// Train one linear head on fixed features and return its accuracy on the
/// eval features.
pub fn fit_linear_probe(
    train_x: &Tensor,
    train_y: &[usize],
    eval_x: &Tensor,
    eval_y: &[usize],
    classes: usize,
    cfg: &ReadoutConfig,
    stream: u64,
) -> Result<f64, Error> {
    let mut rng = rng_for(cfg.seed, stream);
    let mut store = ParamStore::new();
    let head = Dense::init(&mut store, "readout", train_x.shape()[1], classes, &mut rng);
    let mut adam = AdamState::new(
        &store,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut order: Vec<usize> = (0..train_y.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let x = g.constant(rows(train_x, chunk));
            let logits = head.apply(&mut g, &p, x)?;
            let probs = g.softmax(logits, SoftmaxAxis::Class)?;
            let labels = chunk.iter().map(|&i| train_y[i]).collect();
            let loss = g.cross_entropy(probs, Target::Hard(labels))?;
            let mut grads = g.backward(loss)?;
            let grads: Vec<Tensor> = p.vars().iter().map(|&v| grads.take(v)).collect();
            adam.step(&mut store, &grads);
        }
    }
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let x = g.constant(eval_x.clone());
    let logits = head.apply(&mut g, &p, x)?;
    let correct = argmax_rows(g.value(logits)).iter().zip(eval_y).filter(|(a, b)| a == b).count();
    Ok(if eval_y.is_empty() { 0.0 } else { correct as f64 / eval_y.len() as f64 })
}

/// Readout accuracy matrix and selectivity index of `model` on a by-loc
/// dataset. Only the readout heads are trained; the model is untouched.
pub fn train_readout_heads(
    model: &Model,
    train_ds: &MultiMnistDataset,
    eval_ds: &MultiMnistDataset,
    cfg: &ReadoutConfig,
) -> Result<SelectivityReport, Error> {
    for ds in [train_ds, eval_ds] {
        if ds.header.family != Family::ByLoc {
            return Err(Error::TaskMismatch(format!(
                "selectivity needs a by_loc dataset, got {}",
                ds.header.family
            )));
        }
        check_compatible(model, ds)?;
    }
    let tasks = train_ds.tasks();
    let n_tasks = tasks.len();
    let labels = |ds: &MultiMnistDataset, r: usize| -> Vec<usize> {
        (0..ds.len()).map(|i| ds.label(i, &tasks[r]).expect("by-loc label") as usize).collect()
    };
    let train_y: Vec<Vec<usize>> = (0..n_tasks).map(|r| labels(train_ds, r)).collect();
    let eval_y: Vec<Vec<usize>> = (0..n_tasks).map(|r| labels(eval_ds, r)).collect();
    let classes = model.backbone().cfg.num_classes;

    let mut matrix = Vec::with_capacity(n_tasks);
    for t in 0..n_tasks {
        let train_x = features(model, train_ds, t, cfg.workers)?;
        let eval_x = features(model, eval_ds, t, cfg.workers)?;
        let row = map_indices(n_tasks, cfg.workers, |r| {
            fit_linear_probe(
                &train_x,
                &train_y[r],
                &eval_x,
                &eval_y[r],
                classes,
                cfg,
                1000 + (t * n_tasks + r) as u64,
            )
        });
        matrix.push(row.into_iter().collect::<Result<Vec<f64>, Error>>()?);
    }
    Ok(SelectivityReport::new(matrix, tasks.iter().map(|t| t.key()).collect()))
}
