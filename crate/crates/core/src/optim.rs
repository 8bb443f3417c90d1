//! Adam with bias correction.

use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_LR: f32 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: DEFAULT_LR,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for every parameter of a store.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros = |p: &ParamStore| {
            p.tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        AdamState {
            config,
            m: zeros(params),
            v: zeros(params),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, i: usize) -> &Tensor {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &Tensor {
        &self.v[i]
    }

    /// One update of every parameter from its gradient (same order as the store).
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        let all: Vec<usize> = (0..params.len()).collect();
        self.step_indices(params, grads, &all);
    }

    /// One update restricted to parameters `indices`; the moments of all
    /// other parameters are left untouched.
    pub fn step_indices(&mut self, params: &mut ParamStore, grads: &[Tensor], indices: &[usize]) {
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for &i in indices {
            let (p, g) = (&mut params.tensors_mut()[i], &grads[i]);
            assert_eq!(p.shape(), g.shape(), "gradient shape for parameter {i}");
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f32) -> ParamStore {
        let mut p = ParamStore::new();
        p.push("theta", Tensor::full(vec![1], value));
        p
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = single(0.37);
        let mut adam = AdamState::new(&p, AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut p, &[Tensor::zeros(vec![1])]);
        }
        assert_eq!(p.tensors()[0].data(), &[0.37]);
        assert_eq!(adam.first_moment(0).data(), &[0.0]);
        assert_eq!(adam.second_moment(0).data(), &[0.0]);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = 1, v_hat = 1  =>  delta = -lr / (1 + eps)
        let mut p = single(0.0);
        let mut adam = AdamState::new(&p, AdamConfig::default());
        adam.step(&mut p, &[Tensor::ones(vec![1])]);
        let expected = -1e-3f64 / (1.0 + 1e-8);
        assert!((p.tensors()[0].data()[0] as f64 - expected).abs() < 1e-9);
    }

    #[test]
    fn step_counter_increments_by_one() {
        let mut p = single(1.0);
        let mut adam = AdamState::new(&p, AdamConfig::default());
        for k in 1..=3 {
            adam.step(&mut p, &[Tensor::full(vec![1], 0.5)]);
            assert_eq!(adam.step_count(), k);
        }
    }
}
