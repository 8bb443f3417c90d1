//! Gradient checks of the full training loss of a model kind with respect
//! to all parameters of small random models.
//!
//! The gradients under test come from the 32-bit backward pass. They are
//! compared with central differences of the same graph evaluated in 64-bit:
//! differencing a 32-bit forward pass of a whole network carries rounding
//! noise of about 5e-5, which swamps small gradients.

use rand::Rng;
use tdcn::data::gaussian_target;
use rand::seq::index::sample;
use tdcn::gradcheck::{MAX_REL_ERR, STEP_F64};
use tdcn::model::{Model, ModelConfig, ModelKind};
use tdcn::rng::rng_for;
use tdcn::train::{batch_loss, LossBatch};
use tdcn::{Graph, ParamId, ParamStore, Tensor};

pub const CASES: u64 = 100;
const TASKS: usize = 3;
const SIDE: usize = 8;
const BATCH: usize = 2;
const STEP: f64 = STEP_F64;
/// Denominator floor: a tensor whose checked gradients are all below this
/// must agree to `MAX_REL_ERR * ZERO_FLOOR` absolute. Near-zero gradients
/// arise where a bias shift moves every localisation logit equally; the
/// 32-bit backward then returns the rounding residue of `sum (p - t) w`
/// with `sum p = sum t = 1`, up to a few 1e-7.
const ZERO_FLOOR: f64 = 1e-3;

fn small_config(kind: ModelKind) -> ModelConfig {
    let mut cfg = ModelConfig::new(kind, TASKS, SIDE, SIDE);
    cfg.stage_channels = if kind == ModelKind::ChModExt { vec![3, 4] } else { vec![2, 3] };
    cfg.td_channels = cfg.stage_channels.clone();
    cfg.fc_hidden = 4;
    cfg
}

/// A model moved off its initialisation so that gates, tables and biases
/// all take generic values.
fn random_model(kind: ModelKind, seed: u64) -> Model {
    let mut m = Model::build(&small_config(kind), seed).unwrap();
    let mut r = rng_for(seed, 7);
    for t in m.params.tensors_mut() {
        for v in t.data_mut() {
            *v += r.gen_range(-0.3..0.3f32);
        }
    }
    m
}

fn loss_batch(seed: u64) -> LossBatch<f32> {
    let mut r = rng_for(seed, 8);
    let images: Vec<f32> = (0..BATCH * SIDE * SIDE).map(|_| r.gen_range(0.0..1.0)).collect();
    let task = r.gen_range(0..TASKS);
    let labels: Vec<usize> = (0..BATCH).map(|_| r.gen_range(0..10)).collect();
    let head_labels = (0..TASKS)
        .map(|t| {
            if t == task {
                (t, labels.clone())
            } else {
                (t, (0..BATCH).map(|_| r.gen_range(0..10)).collect())
            }
        })
        .collect();
    let mut target = Vec::new();
    for _ in 0..BATCH {
        let c = (r.gen_range(1..SIDE - 1), r.gen_range(1..SIDE - 1));
        target.extend(gaussian_target(c, SIDE, SIDE, 1.5).unwrap());
    }
    LossBatch {
        images: Tensor::new(vec![BATCH, 1, SIDE, SIDE], images).unwrap(),
        task,
        labels,
        head_labels,
        target: Some(Tensor::new(vec![BATCH, 1, SIDE, SIDE], target).unwrap()),
    }
}

/// 32-bit analytic gradients of the training loss.
fn analytic(model: &Model, b: &LossBatch<f32>) -> Vec<Tensor<f32>> {
    let mut g = Graph::<f32>::new();
    let p = model.params.bind(&mut g);
    let x = g.constant(b.images.clone());
    let loss = batch_loss(model, &mut g, &p, x, b, 1.0).unwrap().0;
    let grads = g.backward(loss).unwrap();
    p.vars().iter().map(|&v| grads.wrt(v)).collect()
}

/// The same loss evaluated in 64-bit.
fn loss_f64(model: &Model, params: &ParamStore<f64>, b: &LossBatch<f64>) -> f64 {
    let mut g = Graph::<f64>::new();
    let p = params.bind_frozen(&mut g);
    let x = g.constant(b.images.clone());
    let loss = batch_loss(model, &mut g, &p, x, b, 1.0).unwrap().0;
    g.scalar_f64(loss)
}

fn widen(b: &LossBatch<f32>) -> LossBatch<f64> {
    LossBatch {
        images: b.images.cast(),
        task: b.task,
        labels: b.labels.clone(),
        head_labels: b.head_labels.clone(),
        target: b.target.as_ref().map(|t| t.cast()),
    }
}

/// Worst per-tensor `max |a - n| / max(|a|, |n|, ZERO_FLOOR)` over sampled
/// coordinates.
/// A spatial softmax ignores a constant shift, so the localisation bias has
/// an exactly zero gradient; it is checked separately.
fn max_rel_err(model: &Model, b: &LossBatch<f32>, seed: u64, coords: usize) -> (f64, String) {
    let a = analytic(model, b);
    let b64 = widen(b);
    let mut params = model.params.cast::<f64>();
    let mut r = rng_for(seed, 9);
    let mut worst = (0.0, String::new());
    for (i, grad) in a.iter().enumerate() {
        let name = model.params.name(ParamId(i)).to_string();
        if name == "loc_head.bias" {
            if grad.max_abs() >= 1e-5 {
                return (f64::INFINITY, format!("{name}: {grad:?}"));
            }
            continue;
        }
        let picks: Vec<usize> = if grad.len() <= coords {
            (0..grad.len()).collect()
        } else {
            sample(&mut r, grad.len(), coords).into_vec()
        };
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        for j in picks {
            let base = params.tensors()[i].data()[j];
            params.tensors_mut()[i].data_mut()[j] = base + STEP;
            let up = loss_f64(model, &params, &b64);
            params.tensors_mut()[i].data_mut()[j] = base - STEP;
            let down = loss_f64(model, &params, &b64);
            params.tensors_mut()[i].data_mut()[j] = base;
            let numeric = (up - down) / (2.0 * STEP);
            let analytic = grad.data()[j] as f64;
            diff = diff.max((analytic - numeric).abs());
            scale = scale.max(analytic.abs()).max(numeric.abs());
        }
        let rel = if diff == 0.0 { 0.0 } else { diff / scale.max(ZERO_FLOOR) };
        if rel > worst.0 {
            worst = (rel, name);
        }
    }
    worst
}

/// Worst relative error over `CASES` random models of `kind`.
pub fn check_kind(kind: ModelKind) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for seed in 0..CASES {
        let model = random_model(kind, seed);
        let b = loss_batch(seed);
        let (err, name) = max_rel_err(&model, &b, seed, 12);
        worst = worst.max(err);
        if !(err < MAX_REL_ERR) {
            return Err(format!("{kind}: seed {seed} rel err {err:.3e} on {name}"));
        }
    }
    Ok(worst)
}
