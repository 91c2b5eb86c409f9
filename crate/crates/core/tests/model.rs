mod common;

use common::*;
use conformer_core::difftape::{Tape, Tensor};
use conformer_core::model::{
    cnf_forward, cnf_inverse, encode, integrate, kl_divergence, prior_params, GaussianSpec, LinearField,
    ModelConfig, ModelParameters,
};
use conformer_core::molgraph::MolecularGraph;
use conformer_core::rng::{standard_normal_vec, SeedSplitter};
use conformer_core::synthetic::{random_conformation, random_graph};
use conformer_core::training::{sample_loss_and_gradient, TrainConfig};
use proptest::prelude::*;

fn toy_config() -> ModelConfig {
    ModelConfig { hidden: 8, layers: 2, z_dim: 3, flow_steps: 20 }
}

fn molecule(seed: u64, n: usize) -> (MolecularGraph, conformer_core::molgraph::Conformation) {
    let mut rng = SeedSplitter::new(seed).stream("molecule", &[]);
    let g = random_graph(&mut rng, "m", n, 1);
    let r = random_conformation(&mut rng, &g);
    (g, r)
}

/// Index in `gp` of the image of each edge of `g` under `perm`.
fn edge_images(g: &MolecularGraph, gp: &MolecularGraph, perm: &[usize]) -> Vec<usize> {
    g.edges()
        .iter()
        .map(|e| {
            let (a, b) = (perm[e.u].min(perm[e.v]), perm[e.u].max(perm[e.v]));
            gp.edges().iter().position(|f| f.u == a && f.v == b).expect("edge maps to an edge")
        })
        .collect()
}

/// ∫ q log(q/p) by the trapezoid rule, one dimension at a time.
fn kl_by_quadrature(q: &GaussianSpec, p: &GaussianSpec) -> f64 {
    let logpdf = |x: f64, m: f64, s: f64| -0.5 * ((x - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    (0..q.mean.len())
        .map(|i| {
            let (lo, hi) = (q.mean[i] - 14.0 * q.std[i], q.mean[i] + 14.0 * q.std[i]);
            let n = 40_000;
            let h = (hi - lo) / n as f64;
            (0..=n)
                .map(|k| {
                    let x = lo + k as f64 * h;
                    let lq = logpdf(x, q.mean[i], q.std[i]);
                    let w = if k == 0 || k == n { 0.5 } else { 1.0 };
                    w * lq.exp() * (lq - logpdf(x, p.mean[i], p.std[i]))
                })
                .sum::<f64>()
                * h
        })
        .sum()
}

fn gaussian(dim: usize) -> impl Strategy<Value = GaussianSpec> {
    (prop::collection::vec(-2.0f64..2.0, dim), prop::collection::vec(0.2f64..3.0, dim))
        .prop_map(|(m, s)| GaussianSpec::new(m, s).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn kl_is_nonnegative_and_matches_quadrature((q, p) in (1usize..5).prop_flat_map(|d| (gaussian(d), gaussian(d)))) {
        let kl = kl_divergence(&q, &p).unwrap();
        prop_assert!(kl >= 0.0);
        prop_assert!(kl_divergence(&q, &q).unwrap().abs() < 1e-12);
        let oracle = kl_by_quadrature(&q, &p);
        prop_assert!((kl - oracle).abs() < 1e-6 * oracle.abs().max(1.0), "closed form {kl} vs quadrature {oracle}");
    }

    #[test]
    fn flow_round_trip_and_log_determinants_cancel(seed in any::<u64>(), n in 4usize..9) {
        let (g, _) = molecule(seed, n);
        let params = ModelParameters::init(toy_config(), seed).unwrap();
        let mut rng = SeedSplitter::new(seed).stream("flow", &[]);
        let z = standard_normal_vec(&mut rng, 3);
        let d0 = standard_normal_vec(&mut rng, g.n_edges());
        let fwd = cnf_forward(&d0, &z, &g, &params).unwrap();
        let inv = cnf_inverse(&fwd.d1, &z, &g, &params).unwrap();
        prop_assert!(max_abs_diff(&inv.d0, &d0) < 1e-5);
        prop_assert!((fwd.logdet + inv.logdet).abs() < 1e-4);
    }

    #[test]
    fn encoder_and_prior_ignore_atom_order_and_rigid_motion(seed in any::<u64>(), n in 3usize..9, q in quaternion(), t in translation(), shuffle in any::<u64>()) {
        let (g, r) = molecule(seed, n);
        let perm = {
            use rand::seq::SliceRandom;
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut SeedSplitter::new(shuffle).stream("perm", &[]));
            p
        };
        let params = ModelParameters::init(toy_config(), seed ^ 1).unwrap();
        let base = encode(&g, &r, &params).unwrap();
        let moved = encode(&g, &r.transformed(&rotation_from_quaternion(q), &t), &params).unwrap();
        let gp = g.permuted(&perm).unwrap();
        let relabelled = encode(&gp, &r.permuted(&perm), &params).unwrap();
        for other in [&moved, &relabelled] {
            prop_assert!(max_abs_diff(&base.mean, &other.mean) < 1e-9);
            prop_assert!(max_abs_diff(&base.std, &other.std) < 1e-9);
        }
        let p0 = prior_params(&g, &params).unwrap();
        let p1 = prior_params(&gp, &params).unwrap();
        prop_assert!(max_abs_diff(&p0.mean, &p1.mean) < 1e-9);
    }

    #[test]
    fn flow_is_equivariant_to_edge_relabelling(seed in any::<u64>(), n in 3usize..8, shuffle in any::<u64>()) {
        let (g, _) = molecule(seed, n);
        let perm = {
            use rand::seq::SliceRandom;
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut SeedSplitter::new(shuffle).stream("perm", &[]));
            p
        };
        let gp = g.permuted(&perm).unwrap();
        let images = edge_images(&g, &gp, &perm);
        let params = ModelParameters::init(toy_config(), seed).unwrap();
        let mut rng = SeedSplitter::new(seed).stream("flow", &[]);
        let z = standard_normal_vec(&mut rng, 3);
        let d0 = standard_normal_vec(&mut rng, g.n_edges());
        let mut d0p = vec![0.0; d0.len()];
        for (k, &img) in images.iter().enumerate() {
            d0p[img] = d0[k];
        }
        let a = cnf_forward(&d0, &z, &g, &params).unwrap();
        let b = cnf_forward(&d0p, &z, &gp, &params).unwrap();
        for (k, &img) in images.iter().enumerate() {
            prop_assert!((a.d1[k] - b.d1[img]).abs() < 1e-9);
        }
        prop_assert!((a.logdet - b.logdet).abs() < 1e-9);
    }
}

#[test]
fn training_loss_is_invariant_to_rigid_motion_of_the_target() {
    let (g, r) = molecule(5, 6);
    let cfg = TrainConfig { inner: conformer_core::distgeo::InnerLoopConfig { steps: 20, ..Default::default() }, ..Default::default() };
    let params = ModelParameters::init(toy_config(), 3).unwrap();
    let split = SeedSplitter::new(11);
    let rot = rotation_from_quaternion([0.3, -0.5, 0.8, 0.1]);
    let a = sample_loss_and_gradient(&g, &r, &params, &cfg, &split).unwrap();
    let b = sample_loss_and_gradient(&g, &r.transformed(&rot, &[4.0, -2.0, 7.0]), &params, &cfg, &split).unwrap();
    assert!((a.loss.total - b.loss.total).abs() < 1e-8 * a.loss.total.abs().max(1.0));
    assert!(max_abs_diff(&a.grad, &b.grad) < 1e-6 * a.grad.iter().fold(1.0f64, |m, x| m.max(x.abs())));
}

fn linear_error(rate: f64, steps: usize) -> f64 {
    let mut tape = Tape::new();
    let d0 = vec![0.7, -1.3, 2.0];
    let start = tape.constant(Tensor::column(d0.clone()));
    let (d1, ell) = integrate(&mut tape, &LinearField { rate }, start, 0.0, 1.0, steps).unwrap();
    assert!((tape.value(ell).item() + rate * 3.0).abs() < 1e-12);
    tape.value(d1).data().iter().zip(&d0).map(|(x, x0)| (x - x0 * rate.exp()).abs()).fold(0.0, f64::max)
}

#[test]
fn rk4_on_linear_dynamics_is_fourth_order() {
    for rate in [-1.5, 0.8, 1.2] {
        let ratio = linear_error(rate, 10) / linear_error(rate, 20);
        assert!((8.0..=32.0).contains(&ratio), "rate {rate}: ratio {ratio}");
    }
}

#[test]
fn parameter_init_is_seeded() {
    let a = ModelParameters::init(toy_config(), 1).unwrap();
    let b = ModelParameters::init(toy_config(), 1).unwrap();
    let c = ModelParameters::init(toy_config(), 2).unwrap();
    assert_eq!(a.to_flat(), b.to_flat());
    assert_ne!(a.to_flat(), c.to_flat());
    let mut d = a.clone();
    d.set_flat(&c.to_flat()).unwrap();
    assert_eq!(d.to_flat(), c.to_flat());
    assert!(d.set_flat(&[0.0; 3]).is_err());
}

#[test]
fn unexpanded_graphs_are_refused() {
    let (g, r) = molecule(2, 5);
    let params = ModelParameters::init(toy_config(), 0).unwrap();
    let err = encode(&g.unexpanded().unwrap(), &r, &params).unwrap_err();
    assert!(matches!(err, conformer_core::Error::Precondition(_)), "{err}");
}
