mod common;

use common::{hypergradient_error, instance, oracle_descent};
use conformer_core::distgeo::{
    descend_from, hypergradient, inner_gradient, inner_objective, solve_distance_geometry, InnerLoopConfig,
};
use conformer_core::geometry::{aligned_rmsd, AtomMask};
use conformer_core::molgraph::{distances_from_conformation, Conformation, MolecularGraph};
use conformer_core::rng::{standard_normal_vec, SeedSplitter};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn hypergradient_matches_finite_differences(seed in any::<u64>(), n in 4usize..9, steps in prop::sample::select(vec![1usize, 10, 50])) {
        let err = hypergradient_error(&instance(seed, n), steps, false);
        prop_assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn inner_gradient_matches_finite_differences(seed in any::<u64>(), n in 3usize..9) {
        let inst = instance(seed, n);
        let g = inner_gradient(&inst.r0, &inst.d, &inst.g).unwrap();
        let flat = inst.r0.to_flat();
        let h = 1e-6;
        for i in 0..flat.len() {
            let mut p = flat.clone();
            let mut m = flat.clone();
            p[i] += h;
            m[i] -= h;
            let f = |x: &[f64]| inner_objective(&Conformation::from_flat(x).unwrap(), &inst.d, &inst.g).unwrap();
            let numeric = (f(&p) - f(&m)) / (2.0 * h);
            prop_assert!((g[i / 3][i % 3] - numeric).abs() < 1e-5 * numeric.abs().max(1.0));
        }
    }

    #[test]
    fn library_descent_matches_oracle_descent(seed in any::<u64>(), n in 3usize..9) {
        let inst = instance(seed, n);
        let cfg = InnerLoopConfig { steps: 25, ..InnerLoopConfig::default() };
        let traj = descend_from(&inst.r0, &inst.d, &inst.g, &cfg).unwrap();
        let oracle = oracle_descent(inst.r0.coords(), inst.d.values(), &inst.g, cfg.learning_rate, cfg.steps);
        for (a, b) in traj.final_state().coords().iter().zip(&oracle) {
            for k in 0..3 {
                prop_assert!((a[k] - b[k]).abs() < 1e-10);
            }
        }
        prop_assert_eq!(traj.states.len(), cfg.steps + 1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn hypergradient_is_linear_in_the_outer_seed(seed in any::<u64>(), n in 3usize..8, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let inst = instance(seed, n);
        let cfg = InnerLoopConfig { steps: 20, ..InnerLoopConfig::default() };
        let traj = descend_from(&inst.r0, &inst.d, &inst.g, &cfg).unwrap();
        let mut rng = SeedSplitter::new(seed).stream("seeds", &[]);
        let s1: Vec<[f64; 3]> = (0..n).map(|_| { let v = standard_normal_vec(&mut rng, 3); [v[0], v[1], v[2]] }).collect();
        let s2: Vec<[f64; 3]> = (0..n).map(|_| { let v = standard_normal_vec(&mut rng, 3); [v[0], v[1], v[2]] }).collect();
        let mix: Vec<[f64; 3]> = s1.iter().zip(&s2).map(|(x, y)| [0, 1, 2].map(|k| a * x[k] + b * y[k])).collect();
        let h = |s: &[[f64; 3]]| hypergradient(&traj, &inst.d, &inst.g, &cfg, s).unwrap();
        let (h1, h2, hm) = (h(&s1), h(&s2), h(&mix));
        for ((x, y), m) in h1.iter().zip(&h2).zip(&hm) {
            prop_assert!((a * x + b * y - m).abs() < 1e-10 * (1.0 + m.abs()));
        }
        prop_assert!(h(&vec![[0.0; 3]; n]).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn dropping_the_hessian_term_breaks_the_check() {
    let failures = (0..6).filter(|&s| hypergradient_error(&instance(s, 6), 50, true) > 1e-3).count();
    assert!(failures >= 5, "corrupted adjoint passed on {} of 6", 6 - failures);
}

#[test]
fn recovers_a_triangle_from_exact_distances() {
    let atoms = (0..3).map(|_| conformer_core::molgraph::AtomRecord::new("C")).collect();
    let bonds = [(0, 1, conformer_core::molgraph::BondType::Single), (1, 2, conformer_core::molgraph::BondType::Single)];
    let g = MolecularGraph::new("tri", atoms, &bonds).unwrap().expand_auxiliary_edges().unwrap();
    let truth = Conformation::new(vec![[0.0, 0.0, 0.0], [3.0, 0.0, 0.0], [3.0, 4.0, 0.0]]).unwrap();
    let d = distances_from_conformation(&g, &truth).unwrap();
    for seed in 0..5 {
        let traj = solve_distance_geometry(&d, &g, &InnerLoopConfig::standalone(), seed).unwrap();
        assert!(aligned_rmsd(traj.final_state(), &truth, &AtomMask::all(3)).unwrap() < 1e-3);
    }
}

#[test]
fn oversized_step_diverges() {
    let inst = instance(3, 6);
    let cfg = InnerLoopConfig { learning_rate: 5.0, ..InnerLoopConfig::default() };
    let err = solve_distance_geometry(&inst.d, &inst.g, &cfg, 0).unwrap_err();
    assert!(err.is_numerical(), "{err}");
}

#[test]
fn unstored_trajectory_cannot_be_differentiated() {
    let inst = instance(1, 5);
    let cfg = InnerLoopConfig { store_trajectory: false, ..InnerLoopConfig::default() };
    let traj = descend_from(&inst.r0, &inst.d, &inst.g, &cfg).unwrap();
    let seed = vec![[1.0; 3]; 5];
    assert!(matches!(
        hypergradient(&traj, &inst.d, &inst.g, &cfg, &seed),
        Err(conformer_core::Error::TrajectoryNotStored)
    ));
}
