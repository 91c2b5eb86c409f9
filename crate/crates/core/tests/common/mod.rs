#![allow(dead_code)]

use conformer_core::distgeo::{descend_from, hypergradient, hypergradient_corrupted, initial_state, outer_loss_masked, InnerLoopConfig};
use conformer_core::geometry::AtomMask;
use conformer_core::molgraph::{distances_from_conformation, AtomRecord, BondType, Conformation, DistanceVector, MolecularGraph};
use conformer_core::rng::{standard_normal_vec, SeedSplitter};
use conformer_core::synthetic::{random_conformation, random_graph};
use proptest::prelude::*;

/// Rotation matrix from a (not necessarily unit) quaternion.
pub fn rotation_from_quaternion(q: [f64; 4]) -> [[f64; 3]; 3] {
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|c| c / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

pub fn quaternion() -> impl Strategy<Value = [f64; 4]> {
    prop::array::uniform4(-1.0f64..1.0).prop_filter("nonzero", |q| q.iter().map(|x| x * x).sum::<f64>() > 1e-2)
}

pub fn translation() -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(-10.0f64..10.0)
}

/// Bonds-only graph on `n` atoms: a random spanning tree plus a few extra bonds.
pub fn bond_graph(min_atoms: usize, max_atoms: usize) -> impl Strategy<Value = MolecularGraph> {
    (min_atoms..=max_atoms)
        .prop_flat_map(|n| {
            let parents: Vec<_> = (1..n).map(|i| 0..i).collect();
            let extra = prop::collection::vec((0..n, 0..n), 0..3);
            let symbols = prop::collection::vec(prop::sample::select(vec!["C", "N", "O", "H", "F", "S"]), n);
            (Just(n), parents, extra, symbols)
        })
        .prop_map(|(_, parents, extra, symbols)| {
            let mut bonds: Vec<(usize, usize, BondType)> =
                parents.iter().enumerate().map(|(i, &p)| (p, i + 1, BondType::Single)).collect();
            for (a, b) in extra {
                let (u, v) = (a.min(b), a.max(b));
                if u != v && !bonds.iter().any(|&(x, y, _)| (x.min(y), x.max(y)) == (u, v)) {
                    bonds.push((u, v, BondType::Double));
                }
            }
            let atoms = symbols.iter().map(|s| AtomRecord::new(s)).collect();
            MolecularGraph::new("prop", atoms, &bonds).expect("valid random graph")
        })
}

pub fn coords(n: usize) -> impl Strategy<Value = Conformation> {
    prop::collection::vec(prop::array::uniform3(-3.0f64..3.0), n)
        .prop_map(|c| Conformation::new(c).expect("finite"))
}

pub fn graph_with_coords(min_atoms: usize, max_atoms: usize) -> impl Strategy<Value = (MolecularGraph, Conformation)> {
    bond_graph(min_atoms, max_atoms).prop_flat_map(|g| {
        let n = g.n_atoms();
        (Just(g), coords(n))
    })
}

pub fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Plain gradient descent on Σ(√(|Δ|²+ε) − d)², written independently of the library.
pub fn oracle_descent(r0: &[[f64; 3]], d: &[f64], g: &MolecularGraph, eta: f64, steps: usize) -> Vec<[f64; 3]> {
    let mut r = r0.to_vec();
    for _ in 0..steps {
        let mut grad = vec![[0.0; 3]; r.len()];
        for (e, &target) in g.edges().iter().zip(d) {
            let diff: Vec<f64> = (0..3).map(|k| r[e.u][k] - r[e.v][k]).collect();
            let s = (diff.iter().map(|x| x * x).sum::<f64>() + 1e-10).sqrt();
            for k in 0..3 {
                let f = 2.0 * (s - target) * diff[k] / s;
                grad[e.u][k] += f;
                grad[e.v][k] -= f;
            }
        }
        for (ri, gi) in r.iter_mut().zip(&grad) {
            for k in 0..3 {
                ri[k] -= eta * gi[k];
            }
        }
    }
    r
}


pub struct Instance {
    pub g: MolecularGraph,
    pub target: Conformation,
    pub d: DistanceVector,
    pub r0: Conformation,
}

pub fn instance(seed: u64, n: usize) -> Instance {
    let split = SeedSplitter::new(seed);
    let mut rng = split.stream("instance", &[]);
    let g = random_graph(&mut rng, "t", n, 0);
    let target = random_conformation(&mut rng, &g);
    let noise = standard_normal_vec(&mut rng, g.n_edges());
    let d = distances_from_conformation(&g, &target).unwrap();
    let d = DistanceVector::new(d.values().iter().zip(noise).map(|(x, e)| x * (1.0 + 0.05 * e)).collect()).unwrap();
    let r0 = initial_state(n, &InnerLoopConfig::default(), split.derive("start", &[]), 0);
    Instance { g, target, d, r0 }
}

/// Relative ∞-norm error of the library hypergradient against central differences of the oracle descent.
pub fn hypergradient_error(inst: &Instance, steps: usize, corrupt: bool) -> f64 {
    let cfg = InnerLoopConfig { steps, learning_rate: 0.01, ..InnerLoopConfig::default() };
    let traj = descend_from(&inst.r0, &inst.d, &inst.g, &cfg).unwrap();
    let outer = outer_loss_masked(traj.final_state(), &inst.target, &AtomMask::all(inst.g.n_atoms())).unwrap();
    let analytic = if corrupt {
        hypergradient_corrupted(&traj, &inst.d, &inst.g, &cfg, &outer.seed).unwrap()
    } else {
        hypergradient(&traj, &inst.d, &inst.g, &cfg, &outer.seed).unwrap()
    };
    let frozen = outer.aligned_reference.coords().to_vec();
    let loss = |d: &[f64]| -> f64 {
        oracle_descent(inst.r0.coords(), d, &inst.g, 0.01, steps)
            .iter()
            .zip(&frozen)
            .map(|(a, b)| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>())
            .sum()
    };
    let h = 1e-4;
    let mut numeric = Vec::new();
    for e in 0..inst.d.len() {
        let mut p = inst.d.values().to_vec();
        let mut m = p.clone();
        p[e] += h;
        m[e] -= h;
        numeric.push((loss(&p) - loss(&m)) / (2.0 * h));
    }
    let scale = numeric.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    analytic.iter().zip(&numeric).fold(0.0f64, |a, (x, y)| a.max((x - y).abs())) / scale
}
