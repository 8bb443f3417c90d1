#![allow(dead_code)]

use rand::Rng;
use tdcn::data::{generate, Family, Grid, Mnist, MultiMnistDataset};
use tdcn::rng::rng_for;

/// Synthetic digits: class `c` is a bright 6x6 block at a class-specific
/// position plus light noise, so small models learn it in a few steps.
pub fn blocks(per_class: usize, seed: u64) -> Mnist {
    let mut r = rng_for(seed, 0);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for k in 0..per_class {
        for c in 0..10u8 {
            let (by, bx) = (4 + (c as usize / 5) * 12, 2 + (c as usize % 5) * 5);
            for y in 0..28 {
                for x in 0..28 {
                    let on = (by..by + 6).contains(&y) && (bx..bx + 6).contains(&x);
                    let noise: u8 = r.gen_range(0..30);
                    pixels.push(if on { 220 + (k % 30) as u8 } else { noise });
                }
            }
            labels.push(c);
        }
    }
    Mnist { pixels, labels }
}

pub fn dataset(family: Family, grid: &str, n: usize, seed: u64) -> MultiMnistDataset {
    let grid: Grid = grid.parse().unwrap();
    generate(&blocks(20, 99), family, grid, n, seed, 1).unwrap()
}
