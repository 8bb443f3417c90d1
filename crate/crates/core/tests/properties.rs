//! Randomised properties of the data format, targets, maps and the
//! selectivity index.

mod common;

use proptest::prelude::*;
use tdcn::data::format::{from_bytes, to_bytes};
use tdcn::data::{gaussian_target, generate, Family, Grid};
use tdcn::model::map_argmax;
use tdcn::selectivity::{selectivity_index, Selectivity};
use tdcn::{Graph, SoftmaxAxis, Tensor};

/// Every valid (family, grid) pair; by-ref needs the 3x3 grid.
fn setting() -> impl Strategy<Value = (Family, Grid)> {
    let mut v: Vec<(Family, Grid)> = Grid::SUPPORTED.iter().map(|&g| (Family::ByLoc, g)).collect();
    v.push((Family::ByRef, Grid::new(3, 3)));
    prop::sample::select(v)
}

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(config(24))]

    #[test]
    fn datasets_survive_serialization((family, grid) in setting(), n in 1usize..40, seed in any::<u64>()) {
        let ds = generate(&common::blocks(3, 1), family, grid, n, seed, 1).unwrap();
        let bytes = to_bytes(&ds);
        let back = from_bytes(&bytes).unwrap();
        prop_assert_eq!(to_bytes(&back), bytes);
        prop_assert_eq!(back.len(), n);
    }

    #[test]
    fn truncated_datasets_are_rejected(n in 1usize..10, cut in 1usize..200) {
        let ds = generate(&common::blocks(2, 2), Family::ByLoc, Grid::new(2, 2), n, 3, 1).unwrap();
        let bytes = to_bytes(&ds);
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(from_bytes(&bytes[..keep]).is_err());
    }
}

proptest! {
    #![proptest_config(config(256))]

    #[test]
    fn gaussian_targets_are_normalised_and_peak_at_the_center(
        h in 4usize..40,
        w in 4usize..40,
        fy in 0.0f64..1.0,
        fx in 0.0f64..1.0,
        sigma in 0.5f64..6.0,
    ) {
        let c = ((fy * (h - 1) as f64) as usize, (fx * (w - 1) as f64) as usize);
        let t = gaussian_target(c, h, w, sigma).unwrap();
        let total: f64 = t.iter().map(|&v| v as f64).sum();
        prop_assert!((total - 1.0).abs() < 1e-5, "{}", total);
        prop_assert_eq!(map_argmax(&t, w), c);
    }

    #[test]
    fn spatial_softmax_maps_sum_to_one(values in prop::collection::vec(-20.0f32..20.0, 2 * 6 * 7)) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![2, 1, 6, 7], values).unwrap());
        let p = g.softmax(x, SoftmaxAxis::Spatial).unwrap();
        for map in g.value(p).data().chunks(42) {
            let s: f64 = map.iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn selectivity_ignores_consistent_relabelling(
        n in 2usize..6,
        raw in prop::collection::vec(0.0f64..1.0, 36),
        perm_seed in any::<u64>(),
    ) {
        let m: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| raw[i * 6 + j]).collect()).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut s = perm_seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let pm: Vec<Vec<f64>> = perm.iter().map(|&i| perm.iter().map(|&j| m[i][j]).collect()).collect();
        match (selectivity_index(&m, 0.1), selectivity_index(&pm, 0.1)) {
            (Selectivity::Value(a), Selectivity::Value(b)) => prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0)),
            (Selectivity::Degenerate { .. }, Selectivity::Degenerate { .. }) => {}
            (a, b) => prop_assert!(false, "{:?} vs {:?}", a, b),
        }
    }
}
