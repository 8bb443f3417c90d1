//! BU1 -> TD -> BU2 control network.
//!
//! BU1 and BU2 are the same [`Backbone`] parameters run twice. The TD stream
//! starts from the task embedding at the top-stage resolution, receives an
//! additive 1x1-conv lateral from every BU1 stage, and emits a 1x1-conv gate
//! per stage that multiplies the matching BU2 stage output. A final TD stage
//! at full resolution feeds a 1-channel localisation head.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::graph::{Graph, SoftmaxAxis, Target, Var};
use crate::params::{uniform, Bound, ParamId, ParamStore};
use crate::rng::Xoshiro;
use crate::tensor::{Real, Tensor, TensorError};

use super::backbone::{Backbone, ConvLayer};

/// Scale of the LateralAdd initialisation relative to Kaiming-uniform.
pub const LATERAL_INIT_GAIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Replace every gate with an all-ones tensor.
    pub unit_gates: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlNet {
    pub backbone: Backbone,
    pub tasks: usize,
    /// TD channel width per stage.
    pub td_channels: Vec<usize>,
    /// `(T, td_channels[top])`.
    pub embedding: ParamId,
    /// BU1 stage k -> TD, absent for the TD-only ablation.
    pub lateral_add: Option<Vec<ConvLayer>>,
    /// TD stage k -> BU2 stage k.
    pub gates: Vec<ConvLayer>,
    /// `td_convs[k]` maps the TD map at stage k resolution to the next finer
    /// resolution (`td_channels[k] -> td_channels[k-1]`, or to
    /// `td_channels[0]` at full resolution for `k = 0`).
    pub td_convs: Vec<ConvLayer>,
    pub loc_head: ConvLayer,
}

#[derive(Debug, Clone)]
pub struct ControlOutput {
    pub logits: Var,
    /// `(N, 1, H, W)`.
    pub loc_logits: Var,
    /// BU2 post-relu hidden layer.
    pub hidden: Var,
    pub bu1: Vec<Var>,
    pub bu2: Vec<Var>,
    /// TD map at each stage resolution.
    pub td: Vec<Var>,
    pub gates: Vec<Var>,
}

impl ControlNet {
    pub fn build(
        backbone: Backbone,
        tasks: usize,
        td_channels: &[usize],
        with_lateral_add: bool,
        store: &mut ParamStore,
        rng: &mut Xoshiro,
    ) -> Result<Self, TensorError> {
        let stages = &backbone.cfg.stages;
        if td_channels.len() != stages.len() || td_channels.contains(&0) {
            return Err(TensorError::arg(
                "controlnet",
                format!("need {} positive TD widths, got {td_channels:?}", stages.len()),
            ));
        }
        if tasks == 0 {
            return Err(TensorError::arg("controlnet", "task count must be positive"));
        }
        let top = stages.len() - 1;
        let embedding = store.push("embedding", uniform(vec![tasks, td_channels[top]], 1.0, rng));
        let lateral_add = with_lateral_add.then(|| {
            stages
                .iter()
                .enumerate()
                .map(|(k, s)| {
                    ConvLayer::init(
                        store,
                        &format!("lateral{}", k + 1),
                        s.out_channels,
                        td_channels[k],
                        1,
                        LATERAL_INIT_GAIN,
                        rng,
                    )
                })
                .collect()
        });
        let gates = stages
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let name = format!("gate{}", k + 1);
                ConvLayer {
                    weight: store.push(
                        format!("{name}.weight"),
                        Tensor::zeros(vec![s.out_channels, td_channels[k], 1, 1]),
                    ),
                    bias: store.push(format!("{name}.bias"), Tensor::ones(vec![s.out_channels])),
                    pad: 0,
                }
            })
            .collect();
        let td_convs = (0..stages.len())
            .map(|k| {
                let cout = td_channels[k.saturating_sub(1)];
                ConvLayer::init(
                    store,
                    &format!("td_conv{}", k + 1),
                    td_channels[k],
                    cout,
                    stages[k].kernel,
                    1.0,
                    rng,
                )
            })
            .collect();
        let loc_head = ConvLayer::init(store, "loc_head", td_channels[0], 1, 1, 1.0, rng);
        Ok(ControlNet {
            backbone,
            tasks,
            td_channels: td_channels.to_vec(),
            embedding,
            lateral_add,
            gates,
            td_convs,
            loc_head,
        })
    }

    /// Row `task` of the embedding broadcast over `(N, C_top, H_top, W_top)`.
    pub fn embed_task<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        task: usize,
        batch: usize,
    ) -> Result<Var, TensorError> {
        if task >= self.tasks {
            return Err(TensorError::arg(
                "embed_task",
                format!("task {task} out of range for {} tasks", self.tasks),
            ));
        }
        let row = g.select_row(p.var(self.embedding), task)?;
        let (_, h, w) = *self.backbone.cfg.stage_dims().last().expect("stages");
        let c = self.td_channels[self.td_channels.len() - 1];
        let zeros = g.constant(Tensor::zeros(vec![batch, c, h, w]));
        g.add(zeros, row)
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        images: Var,
        task: usize,
        opts: ForwardOptions,
    ) -> Result<ControlOutput, TensorError> {
        if task >= self.tasks {
            return Err(TensorError::arg(
                "forward_control",
                format!("task {task} out of range for {} tasks", self.tasks),
            ));
        }
        let bb = &self.backbone;
        let k_top = bb.cfg.stages.len() - 1;
        let bu1 = bb.trunk(g, p, images, |_, _, a| Ok(a))?;
        let n = g.shape(images)[0];

        let lateral = |g: &mut Graph<T>, k: usize| -> Result<Option<Var>, TensorError> {
            match &self.lateral_add {
                Some(la) => la[k].apply(g, p, bu1[k]).map(Some),
                None => Ok(None),
            }
        };

        let mut td = vec![None; bb.cfg.stages.len()];
        let row = g.select_row(p.var(self.embedding), task)?;
        let top = match lateral(g, k_top)? {
            Some(l) => g.add(l, row)?,
            None => self.embed_task(g, p, task, n)?,
        };
        td[k_top] = Some(top);
        let mut cur = top;
        for k in (0..=k_top).rev() {
            let y = self.td_convs[k].apply(g, p, cur)?;
            let y = g.relu(y);
            let y = g.upsample_nearest(y, bb.cfg.stages[k].pool)?;
            cur = if k > 0 {
                let t = match lateral(g, k - 1)? {
                    Some(l) => g.add(y, l)?,
                    None => y,
                };
                td[k - 1] = Some(t);
                t
            } else {
                y
            };
        }
        let loc_logits = self.loc_head.apply(g, p, cur)?;
        let td: Vec<Var> = td.into_iter().map(|t| t.expect("every stage visited")).collect();

        let mut gates = Vec::with_capacity(td.len());
        for (k, &t) in td.iter().enumerate() {
            let gate = if opts.unit_gates {
                let shape = g.shape(bu1[k]).to_vec();
                g.constant(Tensor::ones(shape))
            } else {
                self.gates[k].apply(g, p, t)?
            };
            gates.push(gate);
        }
        let out = bb.forward_modulated(g, p, images, |g, k, a| g.mul(a, gates[k]))?;
        Ok(ControlOutput {
            logits: out.logits,
            loc_logits,
            hidden: out.hidden,
            bu1,
            bu2: out.stages,
            td,
            gates,
        })
    }
}

/// Classification cross-entropy plus `lambda_loc` times the soft
/// cross-entropy between the spatial softmax of `loc_logits` and `target`.
pub fn control_loss<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[usize],
    loc_logits: Var,
    target: Option<&Tensor<T>>,
    lambda_loc: f64,
) -> Result<Var, TensorError> {
    let probs = g.softmax(logits, SoftmaxAxis::Class)?;
    let ce = g.cross_entropy(probs, Target::Hard(labels.to_vec()))?;
    match target {
        Some(t) if lambda_loc != 0.0 => {
            let map = g.softmax(loc_logits, SoftmaxAxis::Spatial)?;
            let loc = g.cross_entropy(map, Target::Soft(t.clone()))?;
            let loc = g.scale(loc, T::from_f64(lambda_loc));
            g.add(ce, loc)
        }
        _ => Ok(ce),
    }
}

/// Spatial softmax of localisation logits: one map per sample summing to 1.
pub fn extract_map<T: Real>(g: &mut Graph<T>, loc_logits: Var) -> Result<Tensor<T>, TensorError> {
    let m = g.softmax(loc_logits, SoftmaxAxis::Spatial)?;
    Ok(g.value(m).clone())
}

/// Row-major argmax of an `h x w` map as `(row, col)`.
pub fn map_argmax(map: &[f32], w: usize) -> (usize, usize) {
    let i = map
        .iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0;
    (i / w, i % w)
}

/// 8-bit binary PGM, max-normalised (the largest value maps to 255).
pub fn pgm_bytes(map: &[f32], h: usize, w: usize) -> Vec<u8> {
    let max = map.iter().copied().fold(0.0f32, f32::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.iter().map(|&v| {
        if max > 0.0 {
            (v.max(0.0) / max * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}

pub fn write_pgm(path: &Path, map: &[f32], h: usize, w: usize) -> std::io::Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&pgm_bytes(map, h, w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_normalisation() {
        let b = pgm_bytes(&[0.0, 0.5, 1.0, 0.25], 2, 2);
        assert_eq!(&b[..11], b"P5\n2 2\n255\n");
        assert_eq!(&b[11..], &[0, 128, 255, 64]);
    }

    #[test]
    fn argmax_position() {
        assert_eq!(map_argmax(&[0.0, 0.1, 0.7, 0.2, 0.0, 0.0], 3), (0, 2));
    }
}
