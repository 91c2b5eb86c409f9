//! Random small molecules with plausible geometry, for benchmarks and checks.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::molgraph::{AtomRecord, BondType, Conformation, MolecularGraph};
use crate::rng::{standard_normal_vec, StreamRng};

const BOND_LENGTH: f64 = 1.5;
const MIN_SEPARATION: f64 = 1.2;

/// A random spanning tree over `n_atoms` heavy atoms plus `extra_bonds` ring
/// closures between atoms 3 or more bonds apart, expanded.
pub fn random_graph(
    rng: &mut StreamRng,
    id: &str,
    n_atoms: usize,
    extra_bonds: usize,
) -> MolecularGraph {
    let elements = ["C", "C", "C", "C", "N", "O"];
    let atoms: Vec<_> =
        (0..n_atoms).map(|_| AtomRecord::new(elements.choose(rng).expect("nonempty"))).collect();
    let mut degree = vec![0usize; n_atoms];
    let mut bonds = Vec::new();
    for i in 1..n_atoms {
        // Prefer low-degree parents to keep valences chemical-looking.
        let candidates: Vec<usize> = (0..i).filter(|&j| degree[j] < 4).collect();
        let parent = *candidates.choose(rng).unwrap_or(&(i - 1));
        degree[parent] += 1;
        degree[i] += 1;
        let kind = if rng.gen_bool(0.15) { BondType::Double } else { BondType::Single };
        bonds.push((parent, i, kind));
    }
    let tree = MolecularGraph::new(id, atoms.clone(), &bonds).expect("tree is valid");
    let expanded = tree.expand_auxiliary_edges().expect("fresh graph");
    let mut far: Vec<(usize, usize)> = (0..n_atoms)
        .flat_map(|u| (u + 1..n_atoms).map(move |v| (u, v)))
        .filter(|&(u, v)| {
            degree[u] < 4
                && degree[v] < 4
                && !expanded.edges().iter().any(|e| e.u == u && e.v == v)
        })
        .collect();
    far.shuffle(rng);
    for &(u, v) in far.iter().take(extra_bonds) {
        bonds.push((u, v, BondType::Single));
    }
    MolecularGraph::new(id, atoms, &bonds)
        .expect("valid bonds")
        .expand_auxiliary_edges()
        .expect("fresh graph")
}

/// Place atoms along bonds (BFS from atom 0) at ~1.5 Å with random directions,
/// rejecting placements closer than 1.2 Å to earlier atoms.
pub fn random_conformation(rng: &mut StreamRng, graph: &MolecularGraph) -> Conformation {
    let n = graph.n_atoms();
    let mut adjacency = vec![Vec::new(); n];
    for e in graph.bonds() {
        adjacency[e.u].push(e.v);
        adjacency[e.v].push(e.u);
    }
    let mut pos: Vec<Option<[f64; 3]>> = vec![None; n];
    let mut order = Vec::with_capacity(n);
    for root in 0..n {
        if pos[root].is_some() {
            continue;
        }
        let offset = standard_normal_vec(rng, 3);
        pos[root] = Some(if order.is_empty() {
            [0.0; 3]
        } else {
            [3.0 * offset[0], 3.0 * offset[1], 3.0 * offset[2]]
        });
        order.push(root);
        let mut queue = std::collections::VecDeque::from([root]);
        while let Some(a) = queue.pop_front() {
            for &b in &adjacency[a] {
                if pos[b].is_some() {
                    continue;
                }
                let base = pos[a].expect("parent placed");
                let mut best = None;
                let mut best_clearance = f64::NEG_INFINITY;
                for _ in 0..50 {
                    let dir = standard_normal_vec(rng, 3);
                    let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt().max(1e-12);
                    let length = BOND_LENGTH + rng.gen_range(-0.1..0.1);
                    let cand: [f64; 3] = std::array::from_fn(|k| base[k] + length * dir[k] / norm);
                    let clearance = pos
                        .iter()
                        .enumerate()
                        .filter(|&(j, p)| j != a && p.is_some())
                        .map(|(_, p)| {
                            let p = p.expect("filtered");
                            ((cand[0] - p[0]).powi(2) + (cand[1] - p[1]).powi(2) + (cand[2] - p[2]).powi(2))
                                .sqrt()
                        })
                        .fold(f64::INFINITY, f64::min);
                    if clearance > best_clearance {
                        best_clearance = clearance;
                        best = Some(cand);
                    }
                    if clearance >= MIN_SEPARATION {
                        break;
                    }
                }
                pos[b] = best;
                order.push(b);
                queue.push_back(b);
            }
        }
    }
    Conformation::new(pos.into_iter().map(|p| p.expect("all placed")).collect())
        .expect("finite coordinates")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedSplitter;

    #[test]
    fn graphs_are_connected_and_expanded() {
        let s = SeedSplitter::new(9);
        for k in 0..20 {
            let mut rng = s.stream("g", &[k]);
            let g = random_graph(&mut rng, "m", 10, 1);
            assert!(g.is_expanded());
            assert!(g.n_bonds() >= 9);
            let r = random_conformation(&mut rng, &g);
            assert_eq!(r.n_atoms(), 10);
        }
    }
}
