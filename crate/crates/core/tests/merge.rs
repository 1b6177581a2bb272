use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use worldflow_core::flowmatch::gaussian;
use worldflow_core::merge::{dare_linear, dare_ties, default_grid, soup, task_vector, ties, trim, MergeMethod};
use worldflow_core::worldmodel::ParamSet;
use worldflow_core::Tensor;

fn params(seed: u64) -> ParamSet {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    p.insert("blocks.0.w".into(), gaussian(&[3, 4], &mut r));
    p.insert("blocks.0.b".into(), gaussian(&[4], &mut r));
    p.insert("final".into(), gaussian(&[2, 2, 2], &mut r));
    p
}

fn same_layout(a: &ParamSet, b: &ParamSet) -> bool {
    a.len() == b.len() && a.iter().all(|(k, t)| b.get(k).is_some_and(|u| u.shape() == t.shape()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_method_preserves_keys_and_shapes(seed in 0u64..1000, n in 1usize..4) {
        let base = params(seed);
        let fts: Vec<ParamSet> = (0..n as u64).map(|i| params(seed + 1 + i)).collect();
        let refs: Vec<&ParamSet> = fts.iter().collect();
        for m in default_grid() {
            let out = m.apply(&base, &refs, seed).unwrap();
            prop_assert!(same_layout(&out, &base), "{}", m.name());
            prop_assert!(out.values().all(|t| t.is_finite()));
        }
        let w = vec![1.0; n];
        prop_assert!(same_layout(&soup(&refs, &w).unwrap(), &base));
    }

    #[test]
    fn soup_ignores_order(seed in 0u64..1000, w in proptest::collection::vec(0.1f64..3.0, 3)) {
        let ps: Vec<ParamSet> = (0..3).map(|i| params(seed * 3 + i)).collect();
        let a = soup(&[&ps[0], &ps[1], &ps[2]], &w).unwrap();
        let b = soup(&[&ps[2], &ps[0], &ps[1]], &[w[2], w[0], w[1]]).unwrap();
        for (k, t) in &a {
            for (x, y) in t.data().iter().zip(b[k].data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn trim_keeps_the_largest_magnitudes(seed in any::<u64>(), density in 0.05f64..1.0) {
        let t = gaussian(&[20], &mut ChaCha8Rng::seed_from_u64(seed));
        let out = trim(&t, density);
        let kept: Vec<f64> = out.data().iter().zip(t.data()).filter(|(o, _)| **o != 0.0).map(|(_, x)| x.abs()).collect();
        let dropped: Vec<f64> = out.data().iter().zip(t.data()).filter(|(o, _)| **o == 0.0).map(|(_, x)| x.abs()).collect();
        prop_assert!(!kept.is_empty());
        let floor = kept.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert!(dropped.iter().all(|&d| d <= floor));
        for (o, x) in out.data().iter().zip(t.data()) {
            prop_assert!(*o == 0.0 || o == x);
        }
    }
}

#[test]
fn soup_weights_are_normalized() {
    let (a, b) = (params(1), params(2));
    let s = soup(&[&a, &b], &[2.0, 6.0]).unwrap();
    for (k, t) in &s {
        for ((x, y), z) in t.data().iter().zip(a[k].data()).zip(b[k].data()) {
            assert!((x - (0.25 * y + 0.75 * z)).abs() < 1e-12);
        }
    }
}

#[test]
fn ties_resolves_sign_conflicts() {
    let mut base = ParamSet::new();
    base.insert("w".into(), Tensor::zeros(&[3]));
    let one = |v: [f64; 3]| {
        let mut p = ParamSet::new();
        p.insert("w".into(), Tensor::new(vec![3], v.to_vec()).unwrap());
        p
    };
    // coordinate 0: +3 vs −1 → positive wins, mean of agreeing = 3
    // coordinate 1: +1, +2 → 1.5; coordinate 2: +1 vs −1 → zero total mass, stays at base
    let (a, b) = (one([3.0, 1.0, 1.0]), one([-1.0, 2.0, -1.0]));
    let out = ties(&base, &[&a, &b], 1.0, 1.0).unwrap();
    assert_eq!(out["w"].data(), &[3.0, 1.5, 0.0]);
    let tau = task_vector(&base, &a).unwrap();
    assert_eq!(tau["w"].data(), &[3.0, 1.0, 1.0]);
}

#[test]
fn mismatched_inputs_are_rejected() {
    let base = params(1);
    let mut other = params(2);
    other.insert("extra".into(), Tensor::zeros(&[1]));
    assert!(ties(&base, &[&other], 0.5, 1.0).is_err());
    assert!(soup(&[&base, &other], &[1.0, 1.0]).is_err());
    assert!(soup(&[&base], &[1.0, 2.0]).is_err());
    assert!(dare_linear(&base, &[&params(3)], 1.0, &[1.0], 0).is_err());
}

#[test]
fn dare_is_seeded() {
    let base = params(1);
    let fts = [params(2), params(3)];
    let refs: Vec<&ParamSet> = fts.iter().collect();
    let a = dare_ties(&base, &refs, 0.5, 0.5, 1.0, 4).unwrap();
    assert_eq!(a, dare_ties(&base, &refs, 0.5, 0.5, 1.0, 4).unwrap());
    assert_ne!(a, dare_ties(&base, &refs, 0.5, 0.5, 1.0, 5).unwrap());
}

#[test]
fn grid_covers_every_family() {
    let grid = default_grid();
    assert!(grid.len() >= 20);
    for family in ["soup", "ties", "dare_linear", "dare_ties"] {
        assert!(grid.iter().any(|m| m.name() == family), "{family}");
    }
    assert!(grid.iter().any(|m| matches!(m, MergeMethod::Ties { .. })));
}
