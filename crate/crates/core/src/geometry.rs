//! Rigid superposition (Kabsch) and RMSD.
//!
//! The rotation comes from an SVD of the 3×3 cross-covariance of the centered,
//! masked coordinates. The SVD is a one-sided Jacobi iteration, so no linear
//! algebra dependency is needed for a 3×3 problem.

use crate::error::{Error, Result};
use crate::molgraph::{check_atom_count, Conformation, MolecularGraph};

pub type Mat3 = [[f64; 3]; 3];

const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 50;

/// Which atoms take part in alignment and RMSD.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AtomMask(Vec<bool>);

impl AtomMask {
    pub fn all(n: usize) -> Self {
        Self(vec![true; n])
    }

    pub fn heavy(graph: &MolecularGraph) -> Self {
        Self(graph.heavy_mask())
    }

    /// Heavy atoms, or every atom when `include_hydrogens` is set.
    pub fn for_graph(graph: &MolecularGraph, include_hydrogens: bool) -> Self {
        if include_hydrogens {
            Self::all(graph.n_atoms())
        } else {
            Self::heavy(graph)
        }
    }

    pub fn from_vec(mask: Vec<bool>) -> Self {
        Self(mask)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&m| m).count()
    }

    pub fn selected(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: identity3(), translation: [0.0; 3] }
    }

    pub fn apply(&self, conf: &Conformation) -> Conformation {
        conf.transformed(&self.rotation, &self.translation)
    }
}

pub fn identity3() -> Mat3 {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub fn det(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Singular value decomposition `a = U · diag(s) · Vᵀ` with `s` sorted descending.
///
/// Equal singular values keep their original column order. Null directions of
/// `U` are completed to a right-handed orthonormal basis deterministically.
pub fn svd3(a: &Mat3) -> (Mat3, [f64; 3], Mat3) {
    // Columns of w are rotated until mutually orthogonal; v accumulates the rotations.
    let mut w = *a;
    let mut v = identity3();
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
            for row in &w {
                alpha += row[p] * row[p];
                beta += row[q] * row[q];
                gamma += row[p] * row[q];
            }
            if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                continue;
            }
            rotated = true;
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            for m in [&mut w, &mut v] {
                for row in m.iter_mut() {
                    let (x, y) = (row[p], row[q]);
                    row[p] = c * x - s * y;
                    row[q] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: [f64; 3] =
        std::array::from_fn(|j| (w[0][j] * w[0][j] + w[1][j] * w[1][j] + w[2][j] * w[2][j]).sqrt());
    let mut order = [0usize, 1, 2];
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));

    let s: [f64; 3] = std::array::from_fn(|k| norms[order[k]]);
    let mut v_sorted = [[0.0; 3]; 3];
    let mut u_cols: [[f64; 3]; 3] = [[0.0; 3]; 3];
    for (k, &j) in order.iter().enumerate() {
        for i in 0..3 {
            v_sorted[i][k] = v[i][j];
        }
        u_cols[k] = [w[0][j], w[1][j], w[2][j]];
    }

    let floor = JACOBI_TOL * s[0];
    let rank = if s[0] == 0.0 { 0 } else { s.iter().filter(|&&x| x > floor).count() };
    match rank {
        0 => u_cols = identity3(),
        1 => {
            let u0 = normalize(u_cols[0]);
            // Least-aligned basis vector, first on ties.
            let mut k = 0;
            for c in 1..3 {
                if u0[c].abs() < u0[k].abs() {
                    k = c;
                }
            }
            let mut e = [0.0; 3];
            e[k] = 1.0;
            let d = u0[k];
            let u1 = normalize([e[0] - d * u0[0], e[1] - d * u0[1], e[2] - d * u0[2]]);
            u_cols = [u0, u1, cross(&u0, &u1)];
        }
        2 => {
            let u0 = normalize(u_cols[0]);
            let u1 = normalize(u_cols[1]);
            u_cols = [u0, u1, cross(&u0, &u1)];
        }
        _ => {
            for col in u_cols.iter_mut() {
                *col = normalize(*col);
            }
        }
    }
    let u = transpose(&u_cols);
    (u, s, v_sorted)
}

fn masked_centroid(coords: &[[f64; 3]], mask: &AtomMask) -> [f64; 3] {
    let mut c = [0.0; 3];
    let n = mask.count() as f64;
    for i in mask.selected() {
        for k in 0..3 {
            c[k] += coords[i][k];
        }
    }
    c.map(|x| x / n)
}

fn check_pair(r: &Conformation, r_ref: &Conformation, mask: &AtomMask) -> Result<()> {
    if r.n_atoms() != r_ref.n_atoms() {
        return Err(Error::Validation(format!(
            "conformations have {} and {} atoms",
            r.n_atoms(),
            r_ref.n_atoms()
        )));
    }
    if mask.len() != r.n_atoms() {
        return Err(Error::Validation(format!(
            "mask covers {} atoms, conformations have {}",
            mask.len(),
            r.n_atoms()
        )));
    }
    Ok(())
}

/// Optimal proper rigid transform moving `mobile` onto `target` over masked atoms.
///
/// Accepts any nonzero number of masked atoms; under-determined rotations
/// follow the SVD's completion convention.
pub fn superpose(
    target: &Conformation,
    mobile: &Conformation,
    mask: &AtomMask,
) -> Result<RigidTransform> {
    check_pair(target, mobile, mask)?;
    if mask.count() == 0 {
        return Err(Error::DegenerateAlignment("no atoms selected".into()));
    }
    let (q, p) = (target.coords(), mobile.coords());
    let qc = masked_centroid(q, mask);
    let pc = masked_centroid(p, mask);
    let mut cov = [[0.0; 3]; 3];
    for i in mask.selected() {
        for a in 0..3 {
            for b in 0..3 {
                cov[a][b] += (p[i][a] - pc[a]) * (q[i][b] - qc[b]);
            }
        }
    }
    let (u, _, v) = svd3(&cov);
    let mut rotation = mat_mul(&v, &transpose(&u));
    if det(&rotation) < 0.0 {
        let mut v_flipped = v;
        for row in v_flipped.iter_mut() {
            row[2] = -row[2];
        }
        rotation = mat_mul(&v_flipped, &transpose(&u));
    }
    let mut translation = qc;
    for i in 0..3 {
        translation[i] -= (0..3).map(|k| rotation[i][k] * pc[k]).sum::<f64>();
    }
    Ok(RigidTransform { rotation, translation })
}

/// Rotate and translate `r_ref` onto `r`, returning the moved copy and the transform.
pub fn kabsch_align(
    r: &Conformation,
    r_ref: &Conformation,
    mask: &AtomMask,
) -> Result<(Conformation, RigidTransform)> {
    check_pair(r, r_ref, mask)?;
    if mask.count() < 3 {
        return Err(Error::DegenerateAlignment(format!(
            "{} masked atoms, at least 3 are needed",
            mask.count()
        )));
    }
    let t = superpose(r, r_ref, mask)?;
    Ok((t.apply(r_ref), t))
}

/// Root-mean-square deviation over masked atoms, without any alignment.
pub fn rmsd(r: &Conformation, r_hat: &Conformation, mask: &AtomMask) -> Result<f64> {
    check_pair(r, r_hat, mask)?;
    let n = mask.count();
    if n == 0 {
        return Err(Error::Empty("RMSD mask selects no atoms".into()));
    }
    let (a, b) = (r.coords(), r_hat.coords());
    let sq: f64 = mask
        .selected()
        .map(|i| (0..3).map(|k| (a[i][k] - b[i][k]).powi(2)).sum::<f64>())
        .sum();
    Ok((sq / n as f64).sqrt())
}

pub fn aligned_rmsd(r: &Conformation, r_ref: &Conformation, mask: &AtomMask) -> Result<f64> {
    let (aligned, _) = kabsch_align(r, r_ref, mask)?;
    rmsd(r, &aligned, mask)
}

/// Heavy-atom (or all-atom) aligned RMSD for two conformers of `graph`.
pub fn graph_rmsd(
    graph: &MolecularGraph,
    r: &Conformation,
    r_ref: &Conformation,
    include_hydrogens: bool,
) -> Result<f64> {
    check_atom_count(graph, r)?;
    aligned_rmsd(r, r_ref, &AtomMask::for_graph(graph, include_hydrogens))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn conf(v: Vec<[f64; 3]>) -> Conformation {
        Conformation::new(v).unwrap()
    }

    fn rot_z(deg: f64) -> Mat3 {
        let (s, c) = deg.to_radians().sin_cos();
        [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Conformation {
        conf((0..n).map(|_| std::array::from_fn(|_| rng.gen_range(-2.0..2.0))).collect())
    }

    fn assert_proper(r: &Mat3) {
        let rtr = mat_mul(&transpose(r), r);
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((rtr[i][j] - e).abs() < 1e-9);
            }
        }
        assert!((det(r) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn svd_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let a: Mat3 = std::array::from_fn(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)));
            let (u, s, v) = svd3(&a);
            assert!(s[0] >= s[1] && s[1] >= s[2] && s[2] >= 0.0);
            let us: Mat3 = std::array::from_fn(|i| std::array::from_fn(|j| u[i][j] * s[j]));
            let back = mat_mul(&us, &transpose(&v));
            for i in 0..3 {
                for j in 0..3 {
                    assert!((back[i][j] - a[i][j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn svd_rank_deficient_is_orthonormal() {
        let a = [[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 0.0]];
        let (u, s, _) = svd3(&a);
        assert!(s[1] < 1e-12 && s[2] < 1e-12);
        assert_proper(&u);
        let (u0, _, _) = svd3(&[[0.0; 3]; 3]);
        assert_eq!(u0, identity3());
    }

    #[test]
    fn identity_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = random_cloud(&mut rng, 6);
        let (aligned, t) = kabsch_align(&r, &r, &AtomMask::all(6)).unwrap();
        assert!(rmsd(&r, &aligned, &AtomMask::all(6)).unwrap() < 1e-10);
        for i in 0..3 {
            assert!(t.translation[i].abs() < 1e-10);
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((t.rotation[i][j] - e).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn recovers_known_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = random_cloud(&mut rng, 7);
        let r_ref = r.transformed(&rot_z(37.0), &[1.0, 2.0, 3.0]);
        let mask = AtomMask::all(7);
        let (aligned, t) = kabsch_align(&r, &r_ref, &mask).unwrap();
        assert!(rmsd(&r, &aligned, &mask).unwrap() < 1e-8);
        assert_proper(&t.rotation);
    }

    #[test]
    fn too_few_masked_atoms() {
        let r = conf(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let mask = AtomMask::from_vec(vec![true, true, false]);
        assert!(matches!(kabsch_align(&r, &r, &mask), Err(Error::DegenerateAlignment(_))));
    }

    #[test]
    fn rmsd_examples() {
        let a = conf(vec![[0.0; 3], [0.0; 3], [0.0; 3]]);
        assert_eq!(rmsd(&a, &a, &AtomMask::all(3)).unwrap(), 0.0);
        let b = conf(vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert!((rmsd(&a, &b, &AtomMask::all(3)).unwrap() - 1.0).abs() < 1e-15);
        let one = AtomMask::from_vec(vec![true, false, false]);
        let c = conf(vec![[2.0, 0.0, 0.0], [9.0; 3], [9.0; 3]]);
        assert_eq!(rmsd(&a, &c, &one).unwrap(), 2.0);
        let none = AtomMask::from_vec(vec![false; 3]);
        assert!(matches!(rmsd(&a, &b, &none), Err(Error::Empty(_))));
    }

    #[test]
    fn scaling_is_not_rigid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = random_cloud(&mut rng, 5);
        let scaled = r.transformed(&[[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]], &[0.0; 3]);
        assert!(aligned_rmsd(&r, &scaled, &AtomMask::all(5)).unwrap() > 1e-3);
    }

    #[test]
    fn mirror_image_stays_proper() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = random_cloud(&mut rng, 4);
        let mirror = r.transformed(&[[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], &[0.0; 3]);
        let (aligned, t) = kabsch_align(&r, &mirror, &AtomMask::all(4)).unwrap();
        assert_proper(&t.rotation);
        assert!(rmsd(&r, &aligned, &AtomMask::all(4)).unwrap() > 0.0);
    }
}
