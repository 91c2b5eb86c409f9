mod common;

use std::collections::BTreeSet;

use common::*;
use conformer_core::molgraph::{
    distances_from_conformation, entry_to_json_line, parse_dataset_str, BondType, MolecularGraph,
};
use proptest::prelude::*;

/// All-pairs hop counts by Floyd–Warshall over the bond graph.
fn hop_matrix(g: &MolecularGraph) -> Vec<Vec<usize>> {
    let n = g.n_atoms();
    let inf = usize::MAX / 4;
    let mut d = vec![vec![inf; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0;
    }
    for e in g.bonds() {
        d[e.u][e.v] = 1;
        d[e.v][e.u] = 1;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    d
}

fn edge_set(g: &MolecularGraph) -> BTreeSet<(usize, usize, &'static str)> {
    g.edges().iter().map(|e| (e.u, e.v, e.bond_type.name())).collect()
}

proptest! {
    #[test]
    fn expansion_matches_all_pairs_hop_oracle(g in bond_graph(2, 14)) {
        let expanded = g.expand_auxiliary_edges().unwrap();
        let hops = hop_matrix(&g);
        let mut expected: BTreeSet<(usize, usize, &'static str)> = g.edges().iter().map(|e| (e.u, e.v, e.bond_type.name())).collect();
        for u in 0..g.n_atoms() {
            for v in u + 1..g.n_atoms() {
                match hops[u][v] {
                    2 => { expected.insert((u, v, BondType::Virtual2.name())); }
                    3 => { expected.insert((u, v, BondType::Virtual3.name())); }
                    _ => {}
                }
            }
        }
        prop_assert_eq!(edge_set(&expanded), expected);
        prop_assert!(expanded.is_expanded());
        prop_assert_eq!(expanded.n_bonds(), g.n_edges());
        prop_assert_eq!(expanded.unexpanded().unwrap(), g.clone());
        prop_assert!(expanded.expand_auxiliary_edges().is_err());
    }

    #[test]
    fn expansion_commutes_with_relabelling((g, perm) in bond_graph(2, 12).prop_flat_map(|g| { let n = g.n_atoms(); (Just(g), permutation(n)) })) {
        let a = g.expand_auxiliary_edges().unwrap().permuted(&perm).unwrap();
        let b = g.permuted(&perm).unwrap().expand_auxiliary_edges().unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn distances_are_rigid_invariant((g, r) in graph_with_coords(2, 12), q in quaternion(), t in translation()) {
        let g = g.expand_auxiliary_edges().unwrap();
        let moved = r.transformed(&rotation_from_quaternion(q), &t);
        let d0 = distances_from_conformation(&g, &r).unwrap();
        let d1 = distances_from_conformation(&g, &moved).unwrap();
        prop_assert!(max_abs_diff(d0.values(), d1.values()) < 1e-9);
    }

    #[test]
    fn distances_follow_relabelling((g, r, perm) in graph_with_coords(2, 10).prop_flat_map(|(g, r)| { let n = g.n_atoms(); (Just(g), Just(r), permutation(n)) })) {
        let g = g.expand_auxiliary_edges().unwrap();
        let d = distances_from_conformation(&g, &r).unwrap();
        let gp = g.permuted(&perm).unwrap();
        let dp = distances_from_conformation(&gp, &r.permuted(&perm)).unwrap();
        let lookup = |graph: &MolecularGraph, dist: &[f64], u: usize, v: usize| {
            let (a, b) = (u.min(v), u.max(v));
            graph.edges().iter().position(|e| e.u == a && e.v == b).map(|k| dist[k]).unwrap()
        };
        for e in g.edges() {
            let x = lookup(&g, d.values(), e.u, e.v);
            let y = lookup(&gp, dp.values(), perm[e.u], perm[e.v]);
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dataset_lines_round_trip((g, r) in graph_with_coords(2, 10), expand in any::<bool>()) {
        let g = if expand { g.expand_auxiliary_edges().unwrap() } else { g };
        let line = entry_to_json_line(&g, std::slice::from_ref(&r)).unwrap();
        let parsed = parse_dataset_str(&line).unwrap();
        prop_assert_eq!(parsed.len(), 1);
        // A graph without 2/3-hop pairs reads back as bonds-only.
        if parsed[0].graph.is_expanded() == g.is_expanded() {
            prop_assert_eq!(&parsed[0].graph, &g);
        } else {
            prop_assert_eq!(parsed[0].graph.edges(), g.edges());
        }
        prop_assert_eq!(&parsed[0].conformers[0], &r);
    }
}

#[test]
fn ring_closure_uses_shortest_path() {
    // 6-ring: atoms 0 and 3 are 3 hops apart both ways, 0 and 2 are 2 hops apart.
    let atoms = (0..6).map(|_| conformer_core::molgraph::AtomRecord::new("C")).collect();
    let bonds: Vec<_> = (0..6).map(|i| (i, (i + 1) % 6, BondType::Aromatic)).collect();
    let g = MolecularGraph::new("benzene", atoms, &bonds).unwrap().expand_auxiliary_edges().unwrap();
    assert_eq!(g.n_edges(), 6 + 6 + 3);
    let kind = |u, v| g.edges().iter().find(|e| e.u == u && e.v == v).unwrap().bond_type;
    assert_eq!(kind(0, 2), BondType::Virtual2);
    assert_eq!(kind(0, 3), BondType::Virtual3);
}

#[test]
fn malformed_lines_report_their_line_number() {
    let text = "{\"id\":\"a\",\"atoms\":[\"C\",\"O\"],\"bonds\":[[0,1,\"single\"]]}\n\n{\"id\":\"b\",\"atoms\":[\"C\"],\"bonds\":[[0,3,\"single\"]]}\n";
    match parse_dataset_str(text) {
        Err(conformer_core::Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
}
