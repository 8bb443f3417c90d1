//! Comparison models: channel modulation, multi-branch heads and the
//! task-as-input-planes ablation.

use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Xoshiro;
use crate::tensor::{Real, Tensor, TensorError};

use super::backbone::{Backbone, BackboneOutput, Dense};

/// Backbone whose stage-k output is scaled channel-wise by row `t` of a
/// learned `(T, C_k)` table.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMod {
    pub backbone: Backbone,
    pub tables: Vec<ParamId>,
}

impl ChannelMod {
    /// Tables start at all ones.
    pub fn build(backbone: Backbone, tasks: usize, store: &mut ParamStore) -> Self {
        let tables = backbone
            .cfg
            .stages
            .iter()
            .enumerate()
            .map(|(k, s)| store.push(format!("chmod{}", k + 1), Tensor::ones(vec![tasks, s.out_channels])))
            .collect();
        ChannelMod { backbone, tables }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, images: Var, task: usize) -> Result<BackboneOutput, TensorError> {
        self.backbone.forward_modulated(g, p, images, |g, k, a| {
            let v = g.select_row(p.var(self.tables[k]), task)?;
            g.mul(a, v)
        })
    }
}

/// Shared trunk (stages and hidden layer) with one linear head per task.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiBranch {
    pub backbone: Backbone,
    /// `heads[0]` is the backbone's own output layer.
    pub heads: Vec<Dense>,
}

impl MultiBranch {
    pub fn build(backbone: Backbone, tasks: usize, store: &mut ParamStore, rng: &mut Xoshiro) -> Self {
        let hidden = backbone.cfg.fc_hidden;
        let classes = backbone.cfg.num_classes;
        let mut heads = vec![backbone.fc2];
        heads.extend((1..tasks).map(|t| Dense::init(store, &format!("fc2.task{t}"), hidden, classes, rng)));
        MultiBranch { backbone, heads }
    }

    /// Hidden representation and the logits of every head.
    pub fn forward_all<T: Real>(&self, g: &mut Graph<T>, p: &Bound, images: Var) -> Result<(Var, Vec<Var>), TensorError> {
        let stages = self.backbone.trunk(g, p, images, |_, _, a| Ok(a))?;
        let hidden = self.backbone.hidden(g, p, *stages.last().expect("stages"))?;
        let logits = self
            .heads
            .iter()
            .map(|h| h.apply(g, p, hidden))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((hidden, logits))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, images: Var, task: usize) -> Result<(Var, Var), TensorError> {
        let head = self.heads.get(task).ok_or_else(|| {
            TensorError::arg("multibranch", format!("task {task} out of range for {} heads", self.heads.len()))
        })?;
        let stages = self.backbone.trunk(g, p, images, |_, _, a| Ok(a))?;
        let hidden = self.backbone.hidden(g, p, *stages.last().expect("stages"))?;
        Ok((hidden, head.apply(g, p, hidden)?))
    }
}

/// `(N, 1, H, W)` images followed by `tasks` constant planes, plane `task`
/// set to one.
pub fn with_task_planes<T: Real>(images: &Tensor<T>, task: usize, tasks: usize) -> Result<Tensor<T>, TensorError> {
    let (n, c, h, w) = images
        .dims4()
        .ok_or_else(|| TensorError::shape("task planes", format!("expected 4-D images, got {:?}", images.shape())))?;
    if task >= tasks {
        return Err(TensorError::arg("task planes", format!("task {task} out of range for {tasks} tasks")));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * (c + tasks) * plane);
    for s in 0..n {
        data.extend_from_slice(&images.data()[s * c * plane..(s + 1) * c * plane]);
        for t in 0..tasks {
            let v = if t == task { T::ONE } else { T::ZERO };
            data.extend(std::iter::repeat_n(v, plane));
        }
    }
    Tensor::new(vec![n, c + tasks, h, w], data)
}
