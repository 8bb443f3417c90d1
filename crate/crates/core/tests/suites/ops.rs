//! Finite-difference cases for every differentiable operation, checked in
//! 32-bit (step 1e-3) and 64-bit (step 1e-5).

use rand::seq::SliceRandom;
use rand::Rng;
use tdcn::gradcheck::{check_gradients, GradCheckConfig, MAX_REL_ERR};
use tdcn::rng::{rng_for, Xoshiro};
use tdcn::{Graph, Real, SoftmaxAxis, Target, Tensor, TensorError, Var};

pub const CASES: u64 = 100;

pub fn random<T: Real>(rng: &mut Xoshiro, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_f64(shape.to_vec(), &v).unwrap()
}

/// Values with pairwise gaps well above the finite-difference step, so no
/// perturbation flips a max or crosses a relu kink.
fn separated<T: Real>(rng: &mut Xoshiro, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.05 + 0.025).collect();
    v.shuffle(rng);
    Tensor::from_f64(shape.to_vec(), &v).unwrap()
}

/// Random linear read-out of `y` so every output element matters.
fn project<T: Real>(g: &mut Graph<T>, y: Var, rng: &mut Xoshiro) -> Result<Var, TensorError> {
    let w = random::<T>(rng, g.shape(y), 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

pub type Case<T> = (Vec<Tensor<T>>, Box<dyn Fn(&mut Graph<T>, &[Var]) -> Result<Var, TensorError>>);

fn run_suite<T: Real>(name: &str, make: impl Fn(u64) -> Case<T>, cfg: GradCheckConfig) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for seed in 0..CASES {
        let (inputs, f) = make(seed);
        let report = check_gradients(&inputs, cfg, |g, v| f(g, v)).map_err(|e| format!("{name}: {e}"))?;
        worst = worst.max(report.max_rel_err());
        if !report.passes(MAX_REL_ERR) {
            return Err(format!("{name}: seed {seed} rel err {} ({report:?})", report.max_rel_err()));
        }
    }
    Ok(worst)
}

fn both(make32: impl Fn(u64) -> Case<f32>, make64: impl Fn(u64) -> Case<f64>, name: &str) -> Result<(f64, f64), String> {
    Ok((
        run_suite(&format!("{name} (f32)"), make32, GradCheckConfig::f32())?,
        run_suite(&format!("{name} (f64)"), make64, GradCheckConfig::f64())?,
    ))
}

/// Every operation suite by name.
pub const OPS: [&str; 9] = [
    "conv2d",
    "linear",
    "relu",
    "maxpool2d",
    "upsample_nearest",
    "softmax",
    "cross_entropy",
    "ewise",
    "select_row/reshape/scale/sum",
];

/// Worst (32-bit, 64-bit) relative error of one operation over all cases.
pub fn check_op(name: &str) -> Result<(f64, f64), String> {
    match name {
        "conv2d" => both(conv_case::<f32>, conv_case::<f64>, name),
        "linear" => both(linear_case::<f32>, linear_case::<f64>, name),
        "relu" => both(relu_case::<f32>, relu_case::<f64>, name),
        "maxpool2d" => both(maxpool_case::<f32>, maxpool_case::<f64>, name),
        "upsample_nearest" => both(upsample_case::<f32>, upsample_case::<f64>, name),
        "softmax" => both(softmax_case::<f32>, softmax_case::<f64>, name),
        "cross_entropy" => both(cross_entropy_case::<f32>, cross_entropy_case::<f64>, name),
        "ewise" => both(ewise_case::<f32>, ewise_case::<f64>, name),
        "select_row/reshape/scale/sum" => both(misc_case::<f32>, misc_case::<f64>, name),
        _ => Err(format!("unknown operation {name}")),
    }
}

pub fn conv_case<T: Real>(seed: u64) -> Case<T> {
    let mut r = rng_for(seed, 1);
    let x = random::<T>(&mut r, &[1, 3, 8, 8], 1.0);
    let w = random::<T>(&mut r, &[4, 3, 3, 3], 0.5);
    let b = random::<T>(&mut r, &[4], 0.5);
    let (stride, pad) = [(1, 1), (1, 0), (2, 1)][seed as usize % 3];
    (
        vec![x, w, b],
        Box::new(move |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], stride, pad)?;
            project(g, y, &mut rng_for(seed, 2))
        }),
    )
}

fn linear_case<T: Real>(seed: u64) -> Case<T> {
    let mut r = rng_for(seed, 3);
    let x = random::<T>(&mut r, &[4, 6], 1.0);
    let w = random::<T>(&mut r, &[3, 6], 1.0);
    let b = random::<T>(&mut r, &[3], 1.0);
    (
        vec![x, w, b],
        Box::new(move |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            project(g, y, &mut rng_for(seed, 4))
        }),
    )
}

fn relu_case<T: Real>(seed: u64) -> Case<T> {
    let mut r = rng_for(seed, 5);
    let x = separated::<T>(&mut r, &[2, 3, 4]);
    (
        vec![x],
        Box::new(move |g, v| {
            let y = g.relu(v[0]);
            project(g, y, &mut rng_for(seed, 6))
        }),
    )
}

fn maxpool_case<T: Real>(seed: u64) -> Case<T> {
    let mut r = rng_for(seed, 7);
    let k = if seed % 2 == 0 { 2 } else { 3 };
    let x = separated::<T>(&mut r, &[2, 2, 2 * k, 3 * k]);
    (
        vec![x],
        Box::new(move |g, v| {
            let y = g.maxpool2d(v[0], k)?;
            project(g, y, &mut rng_for(seed, 8))
        }),
    )
}

fn upsample_case<T: Real>(seed: u64) -> Case<T> {
    let mut r = rng_for(seed, 9);
    let factor = 1 + seed as usize % 3;
    let x = random::<T>(&mut r, &[2, 2, 3, 4], 1.0);
    (
        vec![x],
        Box::new(move |g, v| {
            let y = g.upsample_nearest(v[0], factor)?;
            project(g, y, &mut rng_for(seed, 10))
        }),
    )
}

fn softmax_case<T: Real>(seed: u64) -> Case<T> {
    let mut r = rng_for(seed, 11);
    let spatial = seed % 2 == 1;
    let shape: &[usize] = if spatial { &[2, 1, 4, 5] } else { &[3, 10] };
    let x = random::<T>(&mut r, shape, 2.0);
    let axis = if spatial {
        SoftmaxAxis::Spatial
    } else {
        SoftmaxAxis::Class
    };
    (
        vec![x],
        Box::new(move |g, v| {
            let y = g.softmax(v[0], axis)?;
            project(g, y, &mut rng_for(seed, 12))
        }),
    )
}

fn cross_entropy_case<T: Real>(seed: u64) -> Case<T> {
    let mut r = rng_for(seed, 13);
    let soft = seed % 2 == 1;
    if soft {
        let x = random::<T>(&mut r, &[2, 1, 4, 4], 2.0);
        let raw: Vec<f64> = (0..32).map(|_| r.gen_range(0.0..1.0)).collect();
        let mut t = vec![0.0; 32];
        for s in 0..2 {
            let total: f64 = raw[s * 16..(s + 1) * 16].iter().sum();
            for i in 0..16 {
                t[s * 16 + i] = raw[s * 16 + i] / total;
            }
        }
        let target = Tensor::<T>::from_f64(vec![2, 1, 4, 4], &t).unwrap();
        (
            vec![x],
            Box::new(move |g, v| {
                let p = g.softmax(v[0], SoftmaxAxis::Spatial)?;
                g.cross_entropy(p, Target::Soft(target.clone()))
            }),
        )
    } else {
        let x = random::<T>(&mut r, &[4, 10], 2.0);
        let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..10)).collect();
        (
            vec![x],
            Box::new(move |g, v| {
                let p = g.softmax(v[0], SoftmaxAxis::Class)?;
                g.cross_entropy(p, Target::Hard(labels.clone()))
            }),
        )
    }
}

fn ewise_case<T: Real>(seed: u64) -> Case<T> {
    let mut r = rng_for(seed, 15);
    let a = random::<T>(&mut r, &[2, 3, 2, 2], 1.0);
    let b_shape: &[usize] = match seed % 3 {
        0 => &[2, 3, 2, 2],
        1 => &[3],
        _ => &[2, 3],
    };
    let b = random::<T>(&mut r, b_shape, 1.0);
    let mul = seed % 2 == 0;
    (
        vec![a, b],
        Box::new(move |g, v| {
            let y = if mul { g.mul(v[0], v[1])? } else { g.add(v[0], v[1])? };
            project(g, y, &mut rng_for(seed, 16))
        }),
    )
}

fn misc_case<T: Real>(seed: u64) -> Case<T> {
    let mut r = rng_for(seed, 17);
    let table = random::<T>(&mut r, &[4, 3], 1.0);
    let x = random::<T>(&mut r, &[2, 3, 2, 2], 1.0);
    let row = seed as usize % 4;
    (
        vec![table, x],
        Box::new(move |g, v| {
            let e = g.select_row(v[0], row)?;
            let y = g.add(v[1], e)?;
            let y = g.flatten(y)?;
            let y = g.scale(y, T::from_f64(0.5));
            let s = project(g, y, &mut rng_for(seed, 18))?;
            let s2 = g.sum(v[1]);
            g.mean_of(&[s, s2])
        }),
    )
}
