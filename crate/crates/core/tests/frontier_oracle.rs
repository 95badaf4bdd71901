mod common;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use recalign::frontier::{
    compute_q, compute_w, trade_off_curve, verify_prop1_all, verify_prop2, MapSource, MapTable, ReconDomain,
    DEFAULT_SEARCH_CAP, MONOTONE_TOL,
};
use recalign::instance::{shipped, Instance};
use recalign::prob::DivergenceKind;
use recalign::repmap::Decoder;

fn random_instance(seed: u64, z: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Instance::random(&mut rng, 3, 2, z)
}

fn budgets(n: usize, hi: f64) -> Vec<f64> {
    (0..n).map(|i| hi * i as f64 / (n - 1) as f64).collect()
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= 1e-10 || (x.is_infinite() && x == y),
        (None, None) => true,
        _ => false,
    }
}

fn check_against_oracle(inst: &Instance, search: &MapSource, oracle_maps: &[Map]) {
    assert_eq!(search.count() as usize, oracle_maps.len());
    let (u, s) = raw(inst);
    let div = DivergenceKind::Kl;
    for eps in budgets(9, 0.8) {
        let got = compute_w(&inst.unseen, &inst.seen, eps, search, div).ok();
        let want = oracle_w(&u, &s, oracle_maps, eps);
        assert!(close(got, want), "W({eps}): {got:?} vs {want:?}");
    }
    for gamma in budgets(11, 1.0) {
        let got = compute_q(&inst.unseen, gamma, search, &inst.distortion).ok();
        let want = oracle_q(&u, oracle_maps, gamma);
        assert!(close(got, want), "Q({gamma}): {got:?} vs {want:?}");
    }
    let theta: Vec<usize> = (0..inst.z_size).map(|z| z.min(2)).collect();
    let decoder = Decoder::from_indices(&theta).unwrap();
    let grid = budgets(11, 1.0);
    let curve = trade_off_curve(&inst.unseen, &inst.seen, &decoder, &inst.distortion, &grid, search, div).unwrap();
    for p in &curve {
        let want = oracle_t(&u, &s, oracle_maps, &theta, p.gamma);
        assert!(close(p.k_min, want), "T({}): {:?} vs {want:?}", p.gamma, p.k_min);
    }
}

#[test]
fn deterministic_search_matches_oracle() {
    for seed in 0..5 {
        for z in [2, 3] {
            let inst = random_instance(seed, z);
            let search = MapSource::deterministic(3, z, DEFAULT_SEARCH_CAP).unwrap();
            check_against_oracle(&inst, &search, &maps3(&det_rows(z)));
        }
    }
}

#[test]
fn stochastic_search_matches_oracle() {
    for seed in 10..13 {
        for (z, res) in [(2, 4), (3, 2), (3, 3)] {
            let inst = random_instance(seed, z);
            let search = MapSource::stochastic_grid(3, z, res, DEFAULT_SEARCH_CAP).unwrap();
            check_against_oracle(&inst, &search, &maps3(&grid_rows(z, res)));
        }
    }
}

#[test]
fn shipped_instances_match_oracle() {
    for name in ["demo", "identical", "covariate_shift"] {
        let inst = shipped(name).unwrap();
        let search = MapSource::stochastic_grid(3, 3, 2, DEFAULT_SEARCH_CAP).unwrap();
        check_against_oracle(&inst, &search, &maps3(&grid_rows(3, 2)));
    }
}

#[test]
fn map_ids_match_oracle_enumeration_order() {
    // Deterministic ids are mixed radix with the first input most significant,
    // exactly the order of the oracle's nested loops.
    let search = MapSource::deterministic(3, 3, DEFAULT_SEARCH_CAP).unwrap();
    for (id, m) in maps3(&det_rows(3)).iter().enumerate() {
        assert_eq!(search.map(id as u64).rows(), m.as_slice());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn lower_bounds_hold_for_every_map(seed in any::<u64>(), z in 2usize..=3, js in any::<bool>()) {
        let inst = random_instance(seed, z);
        let div = if js { DivergenceKind::Js } else { DivergenceKind::Kl };
        let search = MapSource::stochastic_grid(3, z, 2, DEFAULT_SEARCH_CAP).unwrap();
        for r in verify_prop1_all(&inst.unseen, &inst.seen, &inst.distortion, div, &search).unwrap() {
            prop_assert!(r.holds(), "map {}: slack_1 {} slack_2 {}", r.map_id, r.slack_1, r.slack_2);
        }
    }

    #[test]
    fn w_and_q_are_monotone_in_budget(seed in any::<u64>()) {
        let inst = random_instance(seed, 2);
        let search = MapSource::stochastic_grid(3, 2, 4, DEFAULT_SEARCH_CAP).unwrap();
        let table = MapTable::build(&inst.unseen, &inst.seen, &search, DivergenceKind::Kl,
            &inst.distortion, ReconDomain::Unseen).unwrap();
        // Infeasible budgets may only appear as a prefix.
        let ws: Vec<Option<f64>> = budgets(15, 1.0).into_iter().map(|e| table.w(e).ok()).collect();
        let qs: Vec<Option<f64>> = budgets(15, 1.0).into_iter().map(|g| table.q(g).ok()).collect();
        for seq in [&ws, &qs] {
            for w in seq.windows(2) {
                match (w[0], w[1]) {
                    (Some(a), Some(b)) => prop_assert!(b >= a - 1e-12),
                    (Some(_), None) => prop_assert!(false, "feasibility lost as the budget grew"),
                    _ => {}
                }
            }
        }
        // Under 0/1 loss every map has R <= 1; Q never exceeds I_u(Y;X).
        prop_assert!(qs[14].is_some());
        let qs: Vec<f64> = qs.into_iter().flatten().collect();
        prop_assert!(qs.iter().all(|q| *q <= table.i_unseen_yx() + 1e-12));
    }

    #[test]
    fn trade_off_curve_is_nonincreasing(seed in any::<u64>(), z in 2usize..=3) {
        let inst = random_instance(seed, z);
        let search = MapSource::stochastic_grid(3, z, 3, DEFAULT_SEARCH_CAP).unwrap();
        let decoder = Decoder::truncated_identity(z, 3);
        let grid = budgets(21, 1.0);
        let curve = trade_off_curve(&inst.unseen, &inst.seen, &decoder, &inst.distortion, &grid,
            &search, DivergenceKind::Kl).unwrap();
        // Feasibility only grows with the budget.
        let first = curve.iter().position(|p| p.feasible()).unwrap();
        prop_assert!(curve[first..].iter().all(|p| p.feasible()));
        if let Ok(rep) = verify_prop2(&curve, f64::INFINITY) {
            prop_assert!(rep.max_monotonicity_violation <= MONOTONE_TOL);
        }
    }
}
