//! Molecular graphs, conformations, dataset ingestion and auxiliary-edge expansion.
//!
//! A [`MolecularGraph`] keeps its edges sorted by `(min(u,v), max(u,v), bond rank)`.
//! Every [`DistanceVector`] produced for a graph uses that same order, which is
//! what lets flows, solvers and gradient sweeps index edges positionally.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Element {
    H,
    C,
    N,
    O,
    F,
    S,
    Cl,
    Other,
}

impl Element {
    pub const VOCAB: [Element; 8] = [
        Element::H,
        Element::C,
        Element::N,
        Element::O,
        Element::F,
        Element::S,
        Element::Cl,
        Element::Other,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Element::H => "H",
            Element::C => "C",
            Element::N => "N",
            Element::O => "O",
            Element::F => "F",
            Element::S => "S",
            Element::Cl => "Cl",
            Element::Other => "X",
        }
    }

    /// Unknown symbols fall into [`Element::Other`].
    pub fn from_symbol(symbol: &str) -> Element {
        match symbol {
            "H" => Element::H,
            "C" => Element::C,
            "N" => Element::N,
            "O" => Element::O,
            "F" => Element::F,
            "S" => Element::S,
            "Cl" => Element::Cl,
            _ => Element::Other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AtomRecord {
    pub element: Element,
    /// Symbol as written in the input, kept for export of `Other` atoms.
    pub symbol: String,
}

impl AtomRecord {
    pub fn new(symbol: &str) -> Self {
        let element = Element::from_symbol(symbol);
        if element == Element::Other {
            warn!("unknown element symbol {symbol:?}, using the OTHER bucket");
        }
        Self { element, symbol: symbol.to_string() }
    }

    pub fn is_heavy(&self) -> bool {
        self.element != Element::H
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BondType {
    Single,
    Double,
    Triple,
    Aromatic,
    Virtual2,
    Virtual3,
}

impl BondType {
    pub const ALL: [BondType; 6] = [
        BondType::Single,
        BondType::Double,
        BondType::Triple,
        BondType::Aromatic,
        BondType::Virtual2,
        BondType::Virtual3,
    ];

    pub fn rank(self) -> usize {
        self as usize
    }

    pub fn is_virtual(self) -> bool {
        matches!(self, BondType::Virtual2 | BondType::Virtual3)
    }

    pub fn name(self) -> &'static str {
        match self {
            BondType::Single => "single",
            BondType::Double => "double",
            BondType::Triple => "triple",
            BondType::Aromatic => "aromatic",
            BondType::Virtual2 => "virtual2",
            BondType::Virtual3 => "virtual3",
        }
    }
}

impl fmt::Display for BondType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BondType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BondType::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown bond type {s:?}")))
    }
}

/// An undirected edge, always stored with `u < v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EdgeRecord {
    pub u: usize,
    pub v: usize,
    pub bond_type: BondType,
}

impl EdgeRecord {
    fn sort_key(&self) -> (usize, usize, usize) {
        (self.u, self.v, self.bond_type.rank())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MolecularGraph {
    id: String,
    atoms: Vec<AtomRecord>,
    edges: Vec<EdgeRecord>,
    expanded: bool,
}

impl MolecularGraph {
    /// Build an unexpanded graph from real bonds.
    pub fn new(
        id: impl Into<String>,
        atoms: Vec<AtomRecord>,
        bonds: &[(usize, usize, BondType)],
    ) -> Result<Self> {
        if let Some(b) = bonds.iter().find(|b| b.2.is_virtual()) {
            return Err(Error::Validation(format!(
                "virtual bond ({}, {}) in an unexpanded graph",
                b.0, b.1
            )));
        }
        Self::build(id.into(), atoms, bonds, false)
    }

    /// Build a graph whose edge list already contains auxiliary edges.
    pub fn new_expanded(
        id: impl Into<String>,
        atoms: Vec<AtomRecord>,
        edges: &[(usize, usize, BondType)],
    ) -> Result<Self> {
        let g = Self::build(id.into(), atoms, edges, true)?;
        let rebuilt = g.unexpanded()?.expand_auxiliary_edges()?;
        if rebuilt.edges != g.edges {
            return Err(Error::Validation(format!(
                "molecule {}: auxiliary edges do not match the 2/3-hop pairs of its bonds",
                g.id
            )));
        }
        Ok(g)
    }

    fn build(
        id: String,
        atoms: Vec<AtomRecord>,
        raw: &[(usize, usize, BondType)],
        expanded: bool,
    ) -> Result<Self> {
        let n = atoms.len();
        let mut seen = BTreeSet::new();
        let mut edges = Vec::with_capacity(raw.len());
        for &(a, b, bond_type) in raw {
            if a >= n || b >= n {
                return Err(Error::Validation(format!(
                    "molecule {id}: edge ({a}, {b}) references an atom outside 0..{n}"
                )));
            }
            if a == b {
                return Err(Error::Validation(format!("molecule {id}: self-loop on atom {a}")));
            }
            let (u, v) = (a.min(b), a.max(b));
            if !seen.insert((u, v)) {
                return Err(Error::Validation(format!(
                    "molecule {id}: duplicate edge ({u}, {v})"
                )));
            }
            edges.push(EdgeRecord { u, v, bond_type });
        }
        edges.sort_by_key(EdgeRecord::sort_key);
        Ok(Self { id, atoms, edges, expanded })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn atoms(&self) -> &[AtomRecord] {
        &self.atoms
    }

    pub fn edges(&self) -> &[EdgeRecord] {
        &self.edges
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn is_expanded(&self) -> bool {
        self.expanded
    }

    /// Real (non-virtual) bonds.
    pub fn bonds(&self) -> impl Iterator<Item = &EdgeRecord> {
        self.edges.iter().filter(|e| !e.bond_type.is_virtual())
    }

    pub fn n_bonds(&self) -> usize {
        self.bonds().count()
    }

    pub fn heavy_mask(&self) -> Vec<bool> {
        self.atoms.iter().map(AtomRecord::is_heavy).collect()
    }

    /// The same molecule with auxiliary edges dropped.
    pub fn unexpanded(&self) -> Result<MolecularGraph> {
        let bonds: Vec<_> = self.bonds().map(|e| (e.u, e.v, e.bond_type)).collect();
        Self::build(self.id.clone(), self.atoms.clone(), &bonds, false)
    }

    /// Add `virtual2` / `virtual3` edges between atoms whose shortest path over
    /// real bonds has length 2 / 3.
    pub fn expand_auxiliary_edges(&self) -> Result<MolecularGraph> {
        if self.expanded {
            return Err(Error::Precondition(format!(
                "molecule {} is already expanded",
                self.id
            )));
        }
        let n = self.n_atoms();
        let mut adjacency = vec![Vec::new(); n];
        for e in &self.edges {
            adjacency[e.u].push(e.v);
            adjacency[e.v].push(e.u);
        }
        let mut raw: Vec<_> = self.edges.iter().map(|e| (e.u, e.v, e.bond_type)).collect();
        for src in 0..n {
            for (dst, hops) in bfs_hops(&adjacency, src, 3).into_iter().enumerate() {
                if dst <= src {
                    continue;
                }
                match hops {
                    Some(2) => raw.push((src, dst, BondType::Virtual2)),
                    Some(3) => raw.push((src, dst, BondType::Virtual3)),
                    _ => {}
                }
            }
        }
        Self::build(self.id.clone(), self.atoms.clone(), &raw, true)
    }

    /// Relabel atoms: atom `i` of `self` becomes atom `perm[i]` of the result.
    pub fn permuted(&self, perm: &[usize]) -> Result<MolecularGraph> {
        let n = self.n_atoms();
        if perm.len() != n || perm.iter().collect::<BTreeSet<_>>().len() != n {
            return Err(Error::Validation("permutation is not a bijection".into()));
        }
        let mut atoms = self.atoms.clone();
        for (i, &p) in perm.iter().enumerate() {
            atoms[p] = self.atoms[i].clone();
        }
        let raw: Vec<_> = self.edges.iter().map(|e| (perm[e.u], perm[e.v], e.bond_type)).collect();
        Self::build(self.id.clone(), atoms, &raw, self.expanded)
    }
}

/// Hop counts from `src`, truncated at `max_hops`.
fn bfs_hops(adjacency: &[Vec<usize>], src: usize, max_hops: usize) -> Vec<Option<usize>> {
    let mut hops = vec![None; adjacency.len()];
    hops[src] = Some(0);
    let mut queue = VecDeque::from([src]);
    while let Some(a) = queue.pop_front() {
        let h = hops[a].unwrap_or(0);
        if h == max_hops {
            continue;
        }
        for &b in &adjacency[a] {
            if hops[b].is_none() {
                hops[b] = Some(h + 1);
                queue.push_back(b);
            }
        }
    }
    hops
}

/// Per-atom Cartesian coordinates in Ångström.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Conformation(Vec<[f64; 3]>);

impl Conformation {
    pub fn new(coords: Vec<[f64; 3]>) -> Result<Self> {
        if coords.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("conformation coordinates".into()));
        }
        Ok(Self(coords))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![[0.0; 3]; n])
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 3 != 0 {
            return Err(Error::Validation(format!(
                "flat coordinate array of length {} is not a multiple of 3",
                flat.len()
            )));
        }
        Self::new(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.0.iter().flatten().copied().collect()
    }

    pub fn n_atoms(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.0
    }

    pub fn coords_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<[f64; 3]> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|x| x.is_finite())
    }

    /// `rotation · r + translation` for every atom.
    pub fn transformed(&self, rotation: &[[f64; 3]; 3], translation: &[f64; 3]) -> Conformation {
        Conformation(
            self.0
                .iter()
                .map(|r| {
                    let mut out = *translation;
                    for (i, o) in out.iter_mut().enumerate() {
                        *o += rotation[i][0] * r[0] + rotation[i][1] * r[1] + rotation[i][2] * r[2];
                    }
                    out
                })
                .collect(),
        )
    }

    /// Atom `i` moves to slot `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Conformation {
        let mut out = self.0.clone();
        for (i, &p) in perm.iter().enumerate() {
            out[p] = self.0[i];
        }
        Conformation(out)
    }
}

/// One distance per graph edge, in the graph's edge order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DistanceVector(Vec<f64>);

impl DistanceVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("distance vector".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

pub fn check_atom_count(g: &MolecularGraph, r: &Conformation) -> Result<()> {
    if g.n_atoms() != r.n_atoms() {
        return Err(Error::Validation(format!(
            "molecule {} has {} atoms but the conformation has {}",
            g.id(),
            g.n_atoms(),
            r.n_atoms()
        )));
    }
    Ok(())
}

pub(crate) fn norm3(a: &[f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

pub(crate) fn sub3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn distances_from_conformation(g: &MolecularGraph, r: &Conformation) -> Result<DistanceVector> {
    check_atom_count(g, r)?;
    let c = r.coords();
    Ok(DistanceVector(g.edges().iter().map(|e| norm3(&sub3(&c[e.u], &c[e.v]))).collect()))
}

/// A molecule with its conformers, as read from a dataset file.
#[derive(Debug, Clone)]
pub struct MoleculeEntry {
    pub graph: MolecularGraph,
    pub conformers: Vec<Conformation>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MoleculeLine {
    id: String,
    atoms: Vec<String>,
    bonds: Vec<(usize, usize, String)>,
    #[serde(default)]
    conformers: Vec<Vec<[f64; 3]>>,
}

fn entry_from_line(rec: MoleculeLine) -> Result<MoleculeEntry> {
    let atoms: Vec<_> = rec.atoms.iter().map(|s| AtomRecord::new(s)).collect();
    let mut bonds = Vec::with_capacity(rec.bonds.len());
    for (u, v, t) in &rec.bonds {
        bonds.push((*u, *v, t.parse::<BondType>()?));
    }
    let graph = if bonds.iter().any(|b| b.2.is_virtual()) {
        MolecularGraph::new_expanded(rec.id, atoms, &bonds)?
    } else {
        MolecularGraph::new(rec.id, atoms, &bonds)?
    };
    let mut conformers = Vec::with_capacity(rec.conformers.len());
    for (k, c) in rec.conformers.into_iter().enumerate() {
        let conf = Conformation::new(c)?;
        check_atom_count(&graph, &conf)
            .map_err(|e| Error::Validation(format!("conformer {k}: {e}")))?;
        conformers.push(conf);
    }
    Ok(MoleculeEntry { graph, conformers })
}

/// Parse a JSON-lines dataset. Blank lines are skipped; errors carry the 1-based line number.
///
/// Lines whose bond list contains `virtual2`/`virtual3` edges are read as already expanded.
pub fn parse_dataset_str(text: &str) -> Result<Vec<MoleculeEntry>> {
    parse_dataset_reader(text.as_bytes())
}

pub fn parse_dataset(path: impl AsRef<Path>) -> Result<Vec<MoleculeEntry>> {
    parse_dataset_reader(BufReader::new(File::open(path)?))
}

fn parse_dataset_reader(reader: impl BufRead) -> Result<Vec<MoleculeEntry>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MoleculeLine = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        let entry = entry_from_line(rec)
            .map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        out.push(entry);
    }
    Ok(out)
}

/// Serialize one molecule in the dataset line format (edges include virtual ones when expanded).
pub fn entry_to_json_line(graph: &MolecularGraph, conformers: &[Conformation]) -> Result<String> {
    let rec = MoleculeLine {
        id: graph.id().to_string(),
        atoms: graph.atoms().iter().map(|a| a.symbol.clone()).collect(),
        bonds: graph.edges().iter().map(|e| (e.u, e.v, e.bond_type.name().to_string())).collect(),
        conformers: conformers.iter().map(|c| c.coords().to_vec()).collect(),
    };
    Ok(serde_json::to_string(&rec)?)
}

pub fn write_dataset(path: impl AsRef<Path>, entries: &[MoleculeEntry]) -> Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path)?);
    for e in entries {
        writeln!(f, "{}", entry_to_json_line(&e.graph, &e.conformers)?)?;
    }
    f.flush()?;
    Ok(())
}

/// Standard XYZ block: atom count, comment, then `symbol x y z` with 6 decimals.
pub fn write_xyz(
    out: &mut impl Write,
    graph: &MolecularGraph,
    conf: &Conformation,
    comment: &str,
) -> Result<()> {
    check_atom_count(graph, conf)?;
    writeln!(out, "{}", graph.n_atoms())?;
    writeln!(out, "{}", comment.replace('\n', " "))?;
    for (atom, r) in graph.atoms().iter().zip(conf.coords()) {
        writeln!(out, "{} {:.6} {:.6} {:.6}", atom.symbol, r[0], r[1], r[2])?;
    }
    Ok(())
}
