//! Frozen-model inference and per-task evaluation.

use crate::data::{padded_dims, Batch, MultiMnistDataset, TaskSpec};
use crate::error::Error;
use crate::graph::{Graph, SoftmaxAxis};
use crate::model::{map_argmax, ForwardOptions, Model};
use crate::parallel::{map_indices, worker_count};
use crate::tensor::Tensor;

/// Outputs of one frozen forward pass.
#[derive(Debug, Clone)]
pub struct Inference {
    /// `(N, 10)`.
    pub logits: Tensor,
    /// `(N, fc_hidden)`.
    pub features: Tensor,
    /// `(N, 1, H, W)` spatial softmax of the localisation logits.
    pub loc_map: Option<Tensor>,
}

/// Forward `images` with `task` selected; parameters enter as constants.
pub fn infer(model: &Model, images: &Tensor, task: usize, opts: ForwardOptions) -> Result<Inference, Error> {
    let mut g = Graph::new();
    let p = model.params.bind_frozen(&mut g);
    let x = g.constant(images.clone());
    let out = model.forward(&mut g, &p, x, task, opts)?;
    let loc_map = match out.loc_logits {
        Some(l) => {
            let m = g.softmax(l, SoftmaxAxis::Spatial)?;
            Some(g.value(m).clone())
        }
        None => None,
    };
    Ok(Inference {
        logits: g.value(out.logits).clone(),
        features: g.value(out.features).clone(),
        loc_map,
    })
}

/// Row-wise argmax; the first maximum wins.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Sum over rows of `-ln softmax(row)[label]`, in `f64`.
pub fn cross_entropy_sum(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .map(|(row, &l)| {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
            lse - row[l] as f64
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskMetrics {
    pub task: TaskSpec,
    pub correct: usize,
    pub total: usize,
    /// Summed cross-entropy over the task's samples.
    pub loss_sum: f64,
}

impl TaskMetrics {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    pub fn mean_loss(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.loss_sum / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub per_task: Vec<TaskMetrics>,
}

impl Metrics {
    /// Unweighted mean of the per-task accuracies.
    pub fn mean_accuracy(&self) -> f64 {
        if self.per_task.is_empty() {
            return 0.0;
        }
        self.per_task.iter().map(TaskMetrics::accuracy).sum::<f64>() / self.per_task.len() as f64
    }

    pub fn mean_loss(&self) -> f64 {
        if self.per_task.is_empty() {
            return 0.0;
        }
        self.per_task.iter().map(TaskMetrics::mean_loss).sum::<f64>() / self.per_task.len() as f64
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub batch: usize,
    pub workers: usize,
    /// Evaluate at most this many samples per task.
    pub limit_per_task: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            batch: 64,
            workers: worker_count(),
            limit_per_task: None,
        }
    }
}

/// Check that `model` can run on `ds`.
pub fn check_compatible(model: &Model, ds: &MultiMnistDataset) -> Result<(), Error> {
    if model.cfg.tasks != ds.task_count() {
        return Err(Error::TaskMismatch(format!(
            "model has {} tasks, dataset ({} {}) has {}",
            model.cfg.tasks,
            ds.header.family,
            ds.header.grid,
            ds.task_count()
        )));
    }
    let (h, w) = padded_dims(ds.header.height, ds.header.width);
    if (h, w) != (model.cfg.height, model.cfg.width) {
        return Err(Error::TaskMismatch(format!(
            "model input is {}x{}, dataset batches are {h}x{w}",
            model.cfg.height, model.cfg.width
        )));
    }
    Ok(())
}

/// Per-task accuracy: every sample carrying a label for a task is run with
/// that task selected.
pub fn evaluate(model: &Model, ds: &MultiMnistDataset, opts: EvalOptions) -> Result<Metrics, Error> {
    check_compatible(model, ds)?;
    let tasks = ds.tasks();
    let batch = opts.batch.max(1);
    let mut jobs: Vec<(usize, Vec<usize>)> = Vec::new();
    for (t, task) in tasks.iter().enumerate() {
        let mut idx = ds.indices_for(task);
        if let Some(limit) = opts.limit_per_task {
            idx.truncate(limit);
        }
        jobs.extend(idx.chunks(batch).map(|c| (t, c.to_vec())));
    }
    let results = map_indices(jobs.len(), opts.workers, |j| -> Result<(usize, usize, f64), Error> {
        let (t, idx) = &jobs[j];
        let b = Batch::assemble(ds, idx, &tasks[*t], false)?;
        let out = infer(model, &b.images, *t, ForwardOptions::default())?;
        let correct = argmax_rows(&out.logits)
            .iter()
            .zip(&b.labels)
            .filter(|(p, l)| p == l)
            .count();
        Ok((*t, correct, cross_entropy_sum(&out.logits, &b.labels)))
    });
    let mut per_task: Vec<TaskMetrics> = tasks
        .iter()
        .map(|&task| TaskMetrics {
            task,
            correct: 0,
            total: 0,
            loss_sum: 0.0,
        })
        .collect();
    for (r, (_, idx)) in results.into_iter().zip(&jobs) {
        let (t, correct, loss) = r?;
        per_task[t].correct += correct;
        per_task[t].total += idx.len();
        per_task[t].loss_sum += loss;
    }
    Ok(Metrics { per_task })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizationStats {
    /// Maps whose argmax lies within the radius of the answer's center.
    pub within: usize,
    pub total: usize,
    pub mean_distance: f64,
}

impl LocalizationStats {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.within as f64 / self.total as f64
        }
    }
}

/// Euclidean distance, in pixels, between the argmax of the localisation map
/// and the center of the queried digit, over every (sample, task) pair.
pub fn localization(model: &Model, ds: &MultiMnistDataset, radius: f64, opts: EvalOptions) -> Result<LocalizationStats, Error> {
    check_compatible(model, ds)?;
    if !model.cfg.kind.has_td() {
        return Err(Error::TaskMismatch(format!("{} model has no localisation map", model.cfg.kind)));
    }
    let tasks = ds.tasks();
    let mut jobs: Vec<(usize, Vec<usize>)> = Vec::new();
    for (t, task) in tasks.iter().enumerate() {
        let mut idx = ds.indices_for(task);
        if let Some(limit) = opts.limit_per_task {
            idx.truncate(limit);
        }
        jobs.extend(idx.chunks(opts.batch.max(1)).map(|c| (t, c.to_vec())));
    }
    let results = map_indices(jobs.len(), opts.workers, |j| -> Result<Vec<f64>, Error> {
        let (t, idx) = &jobs[j];
        let b = Batch::assemble(ds, idx, &tasks[*t], false)?;
        let map = infer(model, &b.images, *t, ForwardOptions::default())?
            .loc_map
            .expect("TD model");
        let (h, w) = (map.shape()[2], map.shape()[3]);
        Ok(map
            .data()
            .chunks(h * w)
            .zip(&b.centers)
            .map(|(m, &(cy, cx))| {
                let (y, x) = map_argmax(m, w);
                ((y as f64 - cy as f64).powi(2) + (x as f64 - cx as f64).powi(2)).sqrt()
            })
            .collect())
    });
    let mut stats = LocalizationStats {
        within: 0,
        total: 0,
        mean_distance: 0.0,
    };
    let mut sum = 0.0;
    for r in results {
        for d in r? {
            stats.total += 1;
            sum += d;
            if d <= radius {
                stats.within += 1;
            }
        }
    }
    if stats.total > 0 {
        stats.mean_distance = sum / stats.total as f64;
    }
    Ok(stats)
}
