mod common;

use common::{lp_optimum, random_posterior};
use ndarray::array;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use upsilon::sec::{harden, marginal_violation, sinkhorn_assign, SinkhornConfig};
use upsilon::LabelSpace;

fn hardened_cost(p: ndarray::ArrayView2<'_, f64>, cfg: &SinkhornConfig) -> f64 {
    let (k, m) = p.dim();
    let q = sinkhorn_assign(p, cfg).unwrap().assignment;
    let ls = LabelSpace::new(2, k).unwrap();
    let subset: Vec<usize> = (0..m).collect();
    harden(&q, &ls, &subset)
        .unwrap()
        .iter()
        .map(|(j, c)| -p[[c - 2, j]].ln() / m as f64)
        .sum()
}

#[test]
fn oracle_on_hand_solved_instances() {
    // Diagonal preference: the identity plan is optimal.
    let p = array![[0.9, 0.2], [0.1, 0.8]];
    let want = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
    assert!((lp_optimum(p.view()) - want).abs() < 1e-12);

    // One row: the plan is forced.
    let p = array![[1.0, 1.0, 1.0]];
    assert!(lp_optimum(p.view()).abs() < 1e-12);

    // 2 x 3: each row takes 1.5 columns' worth; the best split puts the two
    // strongest column preferences first and shares the middle column.
    let p = array![[0.9, 0.5, 0.2], [0.1, 0.5, 0.8]];
    let want = -(0.9f64.ln() / 3.0 + 0.5f64.ln() / 3.0 + 0.8f64.ln() / 3.0);
    assert!((lp_optimum(p.view()) - want).abs() < 1e-12);
}

#[test]
fn soft_plan_is_never_cheaper_than_the_lp() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = SinkhornConfig::default();
    for k in 1..=3 {
        for m in k..=3 {
            for _ in 0..20 {
                let p = random_posterior(&mut rng, k, m, 0.7);
                let out = sinkhorn_assign(p.view(), &cfg).unwrap();
                assert!(marginal_violation(out.assignment.view()) < 1e-9);
                assert!(out.assignment.cost(p.view()) >= lp_optimum(p.view()) - 1e-9);
            }
        }
    }
}

#[test]
fn hardened_cost_tracks_the_lp_on_square_instances() {
    // With K = M the LP optimum is a permutation, which hardening recovers.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = SinkhornConfig { max_iters: 500, ..Default::default() };
    for k in 1..=3 {
        for _ in 0..30 {
            let p = random_posterior(&mut rng, k, k, 1.0);
            let lp = lp_optimum(p.view());
            let hard = hardened_cost(p.view(), &cfg);
            assert!(hard <= lp * 1.05 + 1e-9, "k={k} hard={hard} lp={lp}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lp_optimum_bounds_every_feasible_plan(seed in any::<u64>(), k in 1usize..=3, extra in 0usize..=1) {
        let m = k + extra;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_posterior(&mut rng, k, m, 0.5);
        let lp = lp_optimum(p.view());
        // The product plan is feasible.
        let product: f64 = p.iter().map(|&v| -v.ln() / (k * m) as f64).sum();
        prop_assert!(lp <= product + 1e-12);
        prop_assert!(lp >= 0.0);
    }
}
