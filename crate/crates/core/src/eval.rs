//! Coverage, matching and MMD between generated and reference conformers.

use std::io::Write;

use log::warn;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{aligned_rmsd, rmsd, superpose, AtomMask};
use crate::molgraph::{check_atom_count, norm3, sub3, Conformation, Element, MolecularGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetRole {
    Generated,
    Reference,
}

#[derive(Debug, Clone)]
pub struct ConformerSet {
    pub graph: MolecularGraph,
    pub conformers: Vec<Conformation>,
    pub role: SetRole,
}

impl ConformerSet {
    pub fn new(graph: MolecularGraph, conformers: Vec<Conformation>, role: SetRole) -> Result<Self> {
        for c in &conformers {
            check_atom_count(&graph, c)?;
        }
        Ok(Self { graph, conformers, role })
    }

    fn require_nonempty(&self) -> Result<()> {
        if self.conformers.is_empty() {
            let which = match self.role {
                SetRole::Generated => "generated",
                SetRole::Reference => "reference",
            };
            return Err(Error::Empty(format!("{which} set for {} is empty", self.graph.id())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricConfig {
    /// RMSD threshold in Ångström.
    pub delta: f64,
    pub heavy_only: bool,
    pub generated_multiplier: usize,
    pub workers: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { delta: 0.5, heavy_only: true, generated_multiplier: 2, workers: 1 }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!("delta must be positive, got {}", self.delta)));
        }
        if self.generated_multiplier == 0 {
            return Err(Error::Config("generated multiplier must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    MedianHeuristic,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmdConfig {
    pub bandwidth: Bandwidth,
}

impl Default for MmdConfig {
    fn default() -> Self {
        Self { bandwidth: Bandwidth::MedianHeuristic }
    }
}

fn check_same_graph(generated: &ConformerSet, reference: &ConformerSet) -> Result<()> {
    if generated.graph.id() != reference.graph.id() || generated.graph.n_atoms() != reference.graph.n_atoms() {
        return Err(Error::Validation(format!(
            "generated set is for {} but reference set is for {}",
            generated.graph.id(),
            reference.graph.id()
        )));
    }
    Ok(())
}

/// Aligned RMSD that also accepts masks of one or two atoms, where the optimal
/// superposition is not unique but the minimal RMSD still is.
fn pair_rmsd(g: &Conformation, r: &Conformation, mask: &AtomMask) -> Result<f64> {
    if mask.count() >= 3 {
        return aligned_rmsd(g, r, mask);
    }
    let t = superpose(g, r, mask)?;
    rmsd(g, &t.apply(r), mask)
}

/// `m[i][j]` = aligned RMSD between reference `i` and generated `j`.
pub fn rmsd_matrix(generated: &ConformerSet, reference: &ConformerSet, cfg: &MetricConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    generated.require_nonempty()?;
    reference.require_nonempty()?;
    check_same_graph(generated, reference)?;
    let mask = AtomMask::for_graph(&reference.graph, !cfg.heavy_only);
    let row = |r: &Conformation| -> Result<Vec<f64>> {
        generated.conformers.iter().map(|g| pair_rmsd(g, r, &mask)).collect()
    };
    if cfg.workers <= 1 {
        reference.conformers.iter().map(row).collect()
    } else {
        crate::with_workers(cfg.workers, || reference.conformers.par_iter().map(row).collect())?
    }
}

fn check_matrix(matrix: &[Vec<f64>]) -> Result<()> {
    if matrix.is_empty() || matrix.iter().any(|r| r.is_empty()) {
        return Err(Error::Empty("RMSD matrix has an empty side".into()));
    }
    Ok(())
}

fn row_minima(matrix: &[Vec<f64>]) -> impl Iterator<Item = f64> + '_ {
    matrix.iter().map(|r| r.iter().copied().fold(f64::INFINITY, f64::min))
}

pub fn coverage_from_matrix(matrix: &[Vec<f64>], delta: f64) -> Result<f64> {
    check_matrix(matrix)?;
    let covered = row_minima(matrix).filter(|&m| m < delta).count();
    Ok(covered as f64 / matrix.len() as f64)
}

pub fn matching_from_matrix(matrix: &[Vec<f64>]) -> Result<f64> {
    check_matrix(matrix)?;
    Ok(row_minima(matrix).sum::<f64>() / matrix.len() as f64)
}

pub fn coverage(generated: &ConformerSet, reference: &ConformerSet, cfg: &MetricConfig) -> Result<f64> {
    coverage_from_matrix(&rmsd_matrix(generated, reference, cfg)?, cfg.delta)
}

pub fn matching(generated: &ConformerSet, reference: &ConformerSet, cfg: &MetricConfig) -> Result<f64> {
    matching_from_matrix(&rmsd_matrix(generated, reference, cfg)?)
}

/// Coverage at each threshold, sharing one RMSD matrix.
pub fn coverage_grid(matrix: &[Vec<f64>], deltas: &[f64]) -> Result<Vec<(f64, f64)>> {
    deltas.iter().map(|&d| Ok((d, coverage_from_matrix(matrix, d)?))).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median pairwise Euclidean distance of the pooled sample; 1 when that is zero.
pub fn median_bandwidth(pooled: &[&[f64]]) -> f64 {
    let mut dists = Vec::with_capacity(pooled.len() * pooled.len().saturating_sub(1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            dists.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    let sigma = if dists.is_empty() { 0.0 } else { median(dists) };
    if sigma > 0.0 {
        sigma
    } else {
        warn!("median heuristic bandwidth is zero; using 1");
        1.0
    }
}

/// Biased squared-MMD with a Gaussian kernel.
pub fn mmd(a: &[Vec<f64>], b: &[Vec<f64>], cfg: &MmdConfig) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("MMD needs nonempty samples".into()));
    }
    let dim = a[0].len();
    if a.iter().chain(b).any(|x| x.len() != dim) {
        return Err(Error::Validation("MMD samples have mismatched dimensions".into()));
    }
    let sigma = match cfg.bandwidth {
        Bandwidth::Fixed(s) if s > 0.0 && s.is_finite() => s,
        Bandwidth::Fixed(s) => return Err(Error::Config(format!("MMD bandwidth must be positive, got {s}"))),
        Bandwidth::MedianHeuristic => {
            let pooled: Vec<&[f64]> = a.iter().chain(b).map(Vec::as_slice).collect();
            median_bandwidth(&pooled)
        }
    };
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let mean_kernel = |x: &[Vec<f64>], y: &[Vec<f64>]| -> f64 {
        let mut s = 0.0;
        for p in x {
            for q in y {
                s += (-gamma * sq_dist(p, q)).exp();
            }
        }
        s / (x.len() * y.len()) as f64
    };
    let value = mean_kernel(a, a) + mean_kernel(b, b) - 2.0 * mean_kernel(a, b);
    Ok(value.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairFilter {
    /// Every pair of atoms whose elements are both C or O.
    CarbonOxygen,
    /// Only pairs with one C and one O.
    StrictCarbonOxygen,
}

impl PairFilter {
    fn accepts(self, a: Element, b: Element) -> bool {
        let co = |e| matches!(e, Element::C | Element::O);
        match self {
            PairFilter::CarbonOxygen => co(a) && co(b),
            PairFilter::StrictCarbonOxygen => matches!((a, b), (Element::C, Element::O) | (Element::O, Element::C)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DistanceSamples {
    /// Atom pairs `(i, j)` with `i < j`, in lexicographic order.
    pub pairs: Vec<(usize, usize)>,
    /// One stream per atom pair, one value per conformer.
    pub marginal: Vec<Vec<f64>>,
    /// One 2-D stream per unordered pair of atom pairs.
    pub pair: Vec<Vec<[f64; 2]>>,
    /// One vector of all selected distances per conformer.
    pub joint: Vec<Vec<f64>>,
}

pub fn distance_samples(set: &ConformerSet, filter: PairFilter) -> Result<DistanceSamples> {
    set.require_nonempty()?;
    let atoms = set.graph.atoms();
    let mut pairs = Vec::new();
    for i in 0..atoms.len() {
        for j in i + 1..atoms.len() {
            if filter.accepts(atoms[i].element, atoms[j].element) {
                pairs.push((i, j));
            }
        }
    }
    if pairs.is_empty() {
        warn!("molecule {} has no atom pairs matching {filter:?}", set.graph.id());
        return Ok(DistanceSamples::default());
    }
    let joint: Vec<Vec<f64>> = set
        .conformers
        .iter()
        .map(|c| pairs.iter().map(|&(i, j)| norm3(&sub3(&c.coords()[i], &c.coords()[j]))).collect())
        .collect();
    let marginal = (0..pairs.len()).map(|p| joint.iter().map(|row| row[p]).collect()).collect();
    let mut pair = Vec::new();
    for p in 0..pairs.len() {
        for q in p + 1..pairs.len() {
            pair.push(joint.iter().map(|row| [row[p], row[q]]).collect());
        }
    }
    Ok(DistanceSamples { pairs, marginal, pair, joint })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MoleculeMetrics {
    pub molecule_id: String,
    pub n_ref: usize,
    pub n_gen: usize,
    pub cov: f64,
    pub mat: f64,
}

pub fn molecule_metrics(generated: &ConformerSet, reference: &ConformerSet, cfg: &MetricConfig) -> Result<MoleculeMetrics> {
    let matrix = rmsd_matrix(generated, reference, cfg)?;
    Ok(MoleculeMetrics {
        molecule_id: reference.graph.id().to_string(),
        n_ref: reference.conformers.len(),
        n_gen: generated.conformers.len(),
        cov: coverage_from_matrix(&matrix, cfg.delta)?,
        mat: matching_from_matrix(&matrix)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub cov_mean: f64,
    pub cov_median: f64,
    pub mat_mean: f64,
    pub mat_median: f64,
}

pub fn aggregate(rows: &[MoleculeMetrics]) -> Result<Aggregate> {
    if rows.is_empty() {
        return Err(Error::Empty("no molecules to aggregate".into()));
    }
    let n = rows.len() as f64;
    let covs: Vec<f64> = rows.iter().map(|r| r.cov).collect();
    let mats: Vec<f64> = rows.iter().map(|r| r.mat).collect();
    Ok(Aggregate {
        cov_mean: covs.iter().sum::<f64>() / n,
        cov_median: median(covs),
        mat_mean: mats.iter().sum::<f64>() / n,
        mat_median: median(mats),
    })
}

/// Per-molecule rows followed by `mean` and `median` rows.
pub fn write_metrics_csv(out: impl Write, rows: &[MoleculeMetrics]) -> Result<Aggregate> {
    let agg = aggregate(rows)?;
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.write_record(["mean", "", "", &agg.cov_mean.to_string(), &agg.mat_mean.to_string()])?;
    w.write_record(["median", "", "", &agg.cov_median.to_string(), &agg.mat_median.to_string()])?;
    w.flush()?;
    Ok(agg)
}

pub fn write_grid_csv(out: impl Write, grids: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["molecule_id", "delta", "cov"])?;
    for (id, grid) in grids {
        for (d, c) in grid {
            w.write_record([id.as_str(), &d.to_string(), &c.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MmdRow {
    pub molecule_id: String,
    pub mmd_single_mean: f64,
    pub mmd_pair_mean: f64,
    pub mmd_joint: f64,
}

fn mean_or_nan(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Single / pair / joint MMD between distance distributions of two sets.
/// Returns `None` when the molecule has no matching atom pairs.
pub fn mmd_row(
    generated: &ConformerSet,
    reference: &ConformerSet,
    filter: PairFilter,
    cfg: &MmdConfig,
) -> Result<Option<MmdRow>> {
    check_same_graph(generated, reference)?;
    let g = distance_samples(generated, filter)?;
    let r = distance_samples(reference, filter)?;
    if g.pairs.is_empty() {
        return Ok(None);
    }
    let as_vecs1 = |xs: &[f64]| xs.iter().map(|&x| vec![x]).collect::<Vec<_>>();
    let as_vecs2 = |xs: &[[f64; 2]]| xs.iter().map(|x| x.to_vec()).collect::<Vec<_>>();
    let single: Vec<f64> = g
        .marginal
        .iter()
        .zip(&r.marginal)
        .map(|(a, b)| mmd(&as_vecs1(a), &as_vecs1(b), cfg))
        .collect::<Result<_>>()?;
    let pair: Vec<f64> = g
        .pair
        .iter()
        .zip(&r.pair)
        .map(|(a, b)| mmd(&as_vecs2(a), &as_vecs2(b), cfg))
        .collect::<Result<_>>()?;
    Ok(Some(MmdRow {
        molecule_id: reference.graph.id().to_string(),
        mmd_single_mean: mean_or_nan(&single),
        mmd_pair_mean: mean_or_nan(&pair),
        mmd_joint: mmd(&g.joint, &r.joint, cfg)?,
    }))
}

pub fn write_mmd_csv(out: impl Write, rows: &[MmdRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::{AtomRecord, BondType};

    fn chain(symbols: &[&str]) -> MolecularGraph {
        let atoms = symbols.iter().map(|s| AtomRecord::new(s)).collect();
        let bonds: Vec<_> = (1..symbols.len()).map(|i| (i - 1, i, BondType::Single)).collect();
        MolecularGraph::new("m", atoms, &bonds).unwrap().expand_auxiliary_edges().unwrap()
    }

    fn conf(coords: &[[f64; 3]]) -> Conformation {
        Conformation::new(coords.to_vec()).unwrap()
    }

    #[test]
    fn hand_built_matrix() {
        let m = vec![vec![0.3, 0.9], vec![0.8, 0.7], vec![0.4, 2.0]];
        assert!((coverage_from_matrix(&m, 0.5).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((matching_from_matrix(&m).unwrap() - 1.4 / 3.0).abs() < 1e-15);
        assert!(coverage_from_matrix(&[], 0.5).is_err());
    }

    #[test]
    fn identical_sets() {
        let g = chain(&["C", "C", "O", "C"]);
        let cs = vec![
            conf(&[[0.0; 3], [1.5, 0.0, 0.0], [2.0, 1.4, 0.0], [3.5, 1.4, 0.3]]),
            conf(&[[0.0; 3], [1.5, 0.0, 0.0], [2.0, -1.4, 0.0], [2.5, -1.4, 1.3]]),
        ];
        let s = ConformerSet::new(g.clone(), cs.clone(), SetRole::Generated).unwrap();
        let r = ConformerSet::new(g, cs, SetRole::Reference).unwrap();
        let cfg = MetricConfig::default();
        assert_eq!(coverage(&s, &r, &cfg).unwrap(), 1.0);
        assert!(matching(&s, &r, &cfg).unwrap() < 1e-8);
        let empty = ConformerSet::new(s.graph.clone(), vec![], SetRole::Generated).unwrap();
        assert!(matches!(coverage(&empty, &r, &cfg), Err(Error::Empty(_))));
    }

    #[test]
    fn mmd_examples() {
        let fixed = MmdConfig { bandwidth: Bandwidth::Fixed(1.0) };
        let v = mmd(&[vec![0.0]], &[vec![1.0]], &fixed).unwrap();
        assert!((v - (2.0 - 2.0 * (-0.5f64).exp())).abs() < 1e-12);
        let a = vec![vec![0.1, 0.2], vec![1.0, -1.0]];
        assert!(mmd(&a, &a, &MmdConfig::default()).unwrap().abs() < 1e-12);
        assert!(mmd(&a, &[vec![1.0]], &fixed).is_err());
        // All-identical pooled sample: bandwidth falls back to 1.
        assert_eq!(mmd(&[vec![2.0]], &[vec![2.0]], &MmdConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn distance_sample_shapes() {
        let g = chain(&["C", "O"]);
        let s = ConformerSet::new(g, vec![conf(&[[0.0; 3], [1.2, 0.0, 0.0]])], SetRole::Reference).unwrap();
        let d = distance_samples(&s, PairFilter::CarbonOxygen).unwrap();
        assert_eq!((d.marginal.len(), d.pair.len(), d.joint[0].len()), (1, 0, 1));

        let g = chain(&["C", "H", "C", "O"]);
        let s = ConformerSet::new(
            g,
            vec![conf(&[[0.0; 3], [1.0, 0.0, 0.0], [1.5, 1.0, 0.0], [3.0, 1.0, 0.0]])],
            SetRole::Reference,
        )
        .unwrap();
        let d = distance_samples(&s, PairFilter::CarbonOxygen).unwrap();
        assert_eq!((d.marginal.len(), d.pair.len(), d.joint[0].len()), (3, 3, 3));
        let strict = distance_samples(&s, PairFilter::StrictCarbonOxygen).unwrap();
        assert_eq!(strict.pairs, vec![(0, 3), (2, 3)]);
    }

    #[test]
    fn csv_report_has_aggregate_rows() {
        let rows = vec![
            MoleculeMetrics { molecule_id: "a".into(), n_ref: 1, n_gen: 2, cov: 1.0, mat: 0.2 },
            MoleculeMetrics { molecule_id: "b".into(), n_ref: 1, n_gen: 2, cov: 0.0, mat: 0.8 },
        ];
        let mut buf = Vec::new();
        let agg = write_metrics_csv(&mut buf, &rows).unwrap();
        assert_eq!(agg.cov_mean, 0.5);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("molecule_id,n_ref,n_gen,cov,mat\n"));
        assert!(text.contains("\nmean,,,0.5,0.5\n"));
        assert!(text.contains("\nmedian,"));
    }
}
