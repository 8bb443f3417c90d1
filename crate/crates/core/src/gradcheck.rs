//! Central finite-difference gradient checks.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of every backward rule it checks.

use rand::seq::index::sample;

use crate::graph::{Graph, Var};
use crate::rng::rng;
use crate::tensor::{Real, Tensor, TensorError};

/// Default step for 32-bit checks.
pub const STEP_F32: f64 = 1e-3;
/// Default step for 64-bit checks.
pub const STEP_F64: f64 = 1e-5;
/// Acceptance threshold on [`GradCheckReport::max_rel_err`].
pub const MAX_REL_ERR: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Check at most this many coordinates per input (all when `None`).
    pub coords_per_input: Option<usize>,
    /// Seed for coordinate sampling.
    pub seed: u64,
}

impl GradCheckConfig {
    pub fn f32() -> Self {
        GradCheckConfig {
            step: STEP_F32,
            coords_per_input: None,
            seed: 0,
        }
    }

    pub fn f64() -> Self {
        GradCheckConfig {
            step: STEP_F64,
            ..Self::f32()
        }
    }

    pub fn sampled(mut self, coords: usize, seed: u64) -> Self {
        self.coords_per_input = Some(coords);
        self.seed = seed;
        self
    }
}

/// Comparison for one input tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct InputCheck {
    pub coords_checked: usize,
    pub max_abs_diff: f64,
    pub scale: f64,
    /// `max |analytic - numeric| / max(|analytic|, |numeric|)` over the
    /// checked coordinates; 0 when both sides are identically zero.
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub inputs: Vec<InputCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, threshold: f64) -> bool {
        self.max_rel_err() < threshold
    }
}

/// Compare analytic gradients of `loss_fn` with central differences.
///
/// `loss_fn` receives one graph leaf per entry of `inputs` and must return a
/// scalar loss.
pub fn check_gradients<T, F>(
    inputs: &[Tensor<T>],
    cfg: GradCheckConfig,
    loss_fn: F,
) -> Result<GradCheckReport, TensorError>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = loss_fn(&mut g, &leaves)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<T>> = leaves.iter().map(|&v| grads.wrt(v)).collect();
    drop(g);

    let eval = |perturbed: &[Tensor<T>]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let loss = loss_fn(&mut g, &leaves)?;
        Ok(g.scalar_f64(loss))
    };

    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut coord_rng = rng(cfg.seed);
    let mut report = Vec::with_capacity(inputs.len());
    for (which, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match cfg.coords_per_input {
            Some(k) if k < input.len() => sample(&mut coord_rng, input.len(), k).into_vec(),
            _ => (0..input.len()).collect(),
        };
        let mut max_abs_diff = 0.0f64;
        let mut scale = 0.0f64;
        for &i in &coords {
            let original = input.data()[i];
            let base = original.to_f64();
            work[which].data_mut()[i] = T::from_f64(base + cfg.step);
            let up_step = work[which].data()[i].to_f64() - base;
            let up = eval(&work)?;
            work[which].data_mut()[i] = T::from_f64(base - cfg.step);
            let down_step = base - work[which].data()[i].to_f64();
            let down = eval(&work)?;
            work[which].data_mut()[i] = original;
            // Use the representable step actually taken.
            let numeric = (up - down) / (up_step + down_step);
            let a = analytic[which].data()[i].to_f64();
            max_abs_diff = max_abs_diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        let rel_err = if max_abs_diff == 0.0 {
            0.0
        } else {
            max_abs_diff / scale.max(f64::MIN_POSITIVE)
        };
        report.push(InputCheck {
            coords_checked: coords.len(),
            max_abs_diff,
            scale,
            rel_err,
        });
    }
    Ok(GradCheckReport { inputs: report })
}
