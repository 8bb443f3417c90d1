//! Fixtures shared by the criterion benchmarks.

use tdcn::data::{gaussian_target, padded_dims};
use tdcn::model::{Model, ModelConfig, ModelKind};
use tdcn::train::LossBatch;
use tdcn::Tensor;

/// Deterministic pseudo-random values in `[-1, 1)` without an RNG dependency.
pub fn filled(shape: &[usize], salt: u64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data = (0..n as u64)
        .map(|i| {
            let mut z = (i ^ salt.rotate_left(17)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            z ^= z >> 29;
            (z >> 40) as f32 / (1u64 << 23) as f32 - 1.0
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// A freshly initialised model for the 2x2 by-loc canvas (48x48 padded).
pub fn model(kind: ModelKind) -> Model {
    let (h, w) = padded_dims(46, 46);
    Model::build(&ModelConfig::new(kind, 4, h, w), 0).unwrap()
}

/// One training batch for `model`, images in `[0, 1)`.
pub fn loss_batch(model: &Model, n: usize) -> LossBatch<f32> {
    let (h, w) = (model.cfg.height, model.cfg.width);
    let mut images = filled(&[n, 1, h, w], 1);
    images.data_mut().iter_mut().for_each(|v| *v = v.abs());
    let labels: Vec<usize> = (0..n).map(|i| (i * 7) % 10).collect();
    let target = model.cfg.kind.has_td().then(|| {
        let mut t = Vec::with_capacity(n * h * w);
        for i in 0..n {
            t.extend(gaussian_target((10 + i % 20, 14 + i % 16), h, w, 3.0).unwrap());
        }
        Tensor::new(vec![n, 1, h, w], t).unwrap()
    });
    LossBatch {
        images,
        task: 1,
        head_labels: (0..model.cfg.tasks).map(|t| (t, labels.clone())).collect(),
        labels,
        target,
    }
}
