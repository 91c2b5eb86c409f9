//! Distance-geometry inner problem and its unrolled hypergradient.
//!
//! The inner objective is the smoothed stress
//! `H(R, d) = Σ_e (s_e - d_e)^2` with `s_e = sqrt(|r_u - r_v|^2 + EPS_NORM)`,
//! minimized by plain gradient descent `R_{t+1} = R_t - η ∇_R H(R_t, d)`.
//!
//! [`hypergradient`] sweeps the cached iterates backwards. Each step records
//! the analytic map `(R_t, d) ↦ ∇_R H` on a fresh [`Tape`] and takes one VJP
//! against the running adjoint, which yields both the Hessian-vector product
//! for the state adjoint and the mixed term that accumulates into `∂/∂d`.

use std::sync::Arc;

use crate::difftape::{Tape, Tensor, EPS_NORM};
use crate::error::{Error, Result};
use crate::geometry::{superpose, AtomMask};
use crate::molgraph::{check_atom_count, sub3, Conformation, DistanceVector, MolecularGraph};
use crate::rng::{standard_normal_vec, SeedSplitter};

pub const DIVERGENCE_THRESHOLD: f64 = 1e12;
pub const EARLY_STOP_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerLoopConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub init_scale: f64,
    pub restarts: usize,
    pub store_trajectory: bool,
    /// Stop once `H < tol`. Must be `None` whenever the trajectory is differentiated.
    pub early_stop: Option<f64>,
}

impl Default for InnerLoopConfig {
    /// Training defaults: fixed 100 steps at η = 0.01, one start, trajectory kept.
    fn default() -> Self {
        Self {
            steps: 100,
            learning_rate: 0.01,
            init_scale: 1.0,
            restarts: 1,
            store_trajectory: true,
            early_stop: None,
        }
    }
}

impl InnerLoopConfig {
    /// Standalone solving: long runs, ten starts, early stop.
    pub fn standalone() -> Self {
        Self {
            steps: 20000,
            learning_rate: 0.03,
            init_scale: 1.0,
            restarts: 10,
            store_trajectory: false,
            early_stop: Some(EARLY_STOP_TOL),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("inner steps must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "inner learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config(format!(
                "init scale must be positive, got {}",
                self.init_scale
            )));
        }
        if self.restarts == 0 {
            return Err(Error::Config("restarts must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct InnerTrajectory {
    /// `R_0 … R_T` when stored, otherwise just `R_T`.
    pub states: Vec<Conformation>,
    /// `H(R_t, d)` for every visited state.
    pub objective_values: Vec<f64>,
    /// Index of the winning restart.
    pub restart: usize,
    stored: bool,
}

impl InnerTrajectory {
    pub fn final_state(&self) -> &Conformation {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn final_objective(&self) -> f64 {
        *self.objective_values.last().expect("trajectory has at least one value")
    }

    /// Number of gradient steps taken.
    pub fn steps(&self) -> usize {
        self.objective_values.len() - 1
    }

    pub fn is_stored(&self) -> bool {
        self.stored
    }
}

fn check_inputs(r: &Conformation, d: &DistanceVector, g: &MolecularGraph) -> Result<()> {
    check_atom_count(g, r)?;
    if d.len() != g.n_edges() {
        return Err(Error::Validation(format!(
            "{} distances for {} edges",
            d.len(),
            g.n_edges()
        )));
    }
    if !r.is_finite() {
        return Err(Error::NonFinite("conformation".into()));
    }
    if d.values().iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("distances".into()));
    }
    Ok(())
}

fn smoothed(diff: &[f64; 3]) -> f64 {
    (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2] + EPS_NORM).sqrt()
}

fn objective_unchecked(r: &[[f64; 3]], d: &[f64], g: &MolecularGraph) -> f64 {
    g.edges()
        .iter()
        .zip(d)
        .map(|(e, &target)| (smoothed(&sub3(&r[e.u], &r[e.v])) - target).powi(2))
        .sum()
}

fn gradient_unchecked(r: &[[f64; 3]], d: &[f64], g: &MolecularGraph, out: &mut [[f64; 3]]) {
    out.iter_mut().for_each(|row| *row = [0.0; 3]);
    for (e, &target) in g.edges().iter().zip(d) {
        let diff = sub3(&r[e.u], &r[e.v]);
        let s = smoothed(&diff);
        let coef = 2.0 * (s - target) / s;
        for k in 0..3 {
            out[e.u][k] += coef * diff[k];
            out[e.v][k] -= coef * diff[k];
        }
    }
}

pub fn inner_objective(r: &Conformation, d: &DistanceVector, g: &MolecularGraph) -> Result<f64> {
    check_inputs(r, d, g)?;
    Ok(objective_unchecked(r.coords(), d.values(), g))
}

/// Analytic `∇_R H`, one row per atom.
pub fn inner_gradient(
    r: &Conformation,
    d: &DistanceVector,
    g: &MolecularGraph,
) -> Result<Vec<[f64; 3]>> {
    check_inputs(r, d, g)?;
    let mut out = vec![[0.0; 3]; r.n_atoms()];
    gradient_unchecked(r.coords(), d.values(), g, &mut out);
    Ok(out)
}

/// Gaussian starting geometry for restart `restart`.
pub fn initial_state(n_atoms: usize, cfg: &InnerLoopConfig, seed: u64, restart: usize) -> Conformation {
    let mut rng = SeedSplitter::new(seed).stream("inner-init", &[restart as u64]);
    let flat: Vec<f64> =
        standard_normal_vec(&mut rng, 3 * n_atoms).into_iter().map(|x| x * cfg.init_scale).collect();
    Conformation::from_flat(&flat).expect("finite gaussian draw")
}

fn run_descent(
    r0: Conformation,
    d: &[f64],
    g: &MolecularGraph,
    cfg: &InnerLoopConfig,
    restart: usize,
) -> Result<InnerTrajectory> {
    let n = r0.n_atoms();
    let mut current = r0.into_inner();
    let mut grad = vec![[0.0; 3]; n];
    let mut objective = objective_unchecked(&current, d, g);
    let mut objective_values = Vec::with_capacity(cfg.steps + 1);
    let mut states = Vec::new();
    objective_values.push(objective);
    for step in 0..cfg.steps {
        if cfg.early_stop.is_some_and(|tol| objective < tol) {
            break;
        }
        if cfg.store_trajectory {
            states.push(Conformation::new(current.clone())?);
        }
        gradient_unchecked(&current, d, g, &mut grad);
        for (r, gr) in current.iter_mut().zip(&grad) {
            for k in 0..3 {
                r[k] -= cfg.learning_rate * gr[k];
            }
        }
        objective = objective_unchecked(&current, d, g);
        if !objective.is_finite() || objective > DIVERGENCE_THRESHOLD {
            return Err(Error::Diverged { step: step + 1, objective });
        }
        objective_values.push(objective);
    }
    states.push(Conformation::new(current)?);
    Ok(InnerTrajectory { states, objective_values, restart, stored: cfg.store_trajectory })
}

/// Gradient descent from Gaussian starts; with several restarts the run with
/// the lowest final objective wins (earliest on ties). Diverged restarts are
/// dropped; the call fails only when every restart diverges.
pub fn solve_distance_geometry(
    d: &DistanceVector,
    g: &MolecularGraph,
    cfg: &InnerLoopConfig,
    seed: u64,
) -> Result<InnerTrajectory> {
    cfg.validate()?;
    if d.len() != g.n_edges() {
        return Err(Error::Validation(format!("{} distances for {} edges", d.len(), g.n_edges())));
    }
    let mut best: Option<InnerTrajectory> = None;
    let mut first_err = None;
    for restart in 0..cfg.restarts {
        let r0 = initial_state(g.n_atoms(), cfg, seed, restart);
        match run_descent(r0, d.values(), g, cfg, restart) {
            Ok(traj) => {
                if best.as_ref().is_none_or(|b| traj.final_objective() < b.final_objective()) {
                    best = Some(traj);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    best.ok_or_else(|| first_err.expect("at least one restart ran"))
}

/// Run descent from a given start (no restarts); used by finite-difference checks.
pub fn descend_from(
    r0: &Conformation,
    d: &DistanceVector,
    g: &MolecularGraph,
    cfg: &InnerLoopConfig,
) -> Result<InnerTrajectory> {
    cfg.validate()?;
    check_inputs(r0, d, g)?;
    run_descent(r0.clone(), d.values(), g, cfg, 0)
}

/// Outer loss and its seed `∂loss/∂R_T` with the alignment held fixed.
#[derive(Debug, Clone)]
pub struct OuterLoss {
    pub value: f64,
    /// Reference after superposition onto `R_T`.
    pub aligned_reference: Conformation,
    pub seed: Vec<[f64; 3]>,
}

/// `Σ_i |R_i - A(R, R*)_i|^2` over masked atoms, with `A` the optimal proper
/// superposition of the reference onto `r_t`.
pub fn outer_loss_masked(r_t: &Conformation, r_ref: &Conformation, mask: &AtomMask) -> Result<OuterLoss> {
    let transform = superpose(r_t, r_ref, mask)?;
    let aligned = transform.apply(r_ref);
    let mut value = 0.0;
    let mut seed = vec![[0.0; 3]; r_t.n_atoms()];
    for i in mask.selected() {
        for k in 0..3 {
            let diff = r_t.coords()[i][k] - aligned.coords()[i][k];
            value += diff * diff;
            seed[i][k] = 2.0 * diff;
        }
    }
    Ok(OuterLoss { value, aligned_reference: aligned, seed })
}

pub fn outer_loss(r_t: &Conformation, r_ref: &Conformation) -> Result<f64> {
    Ok(outer_loss_masked(r_t, r_ref, &AtomMask::all(r_t.n_atoms()))?.value)
}

/// Record `(R, d) ↦ ∇_R H(R, d)` on a tape. Returns (R leaf, d leaf, gradient).
fn record_inner_gradient(
    tape: &mut Tape,
    r: &[[f64; 3]],
    d: &[f64],
    us: &Arc<[usize]>,
    vs: &Arc<[usize]>,
) -> Result<(crate::difftape::Var, crate::difftape::Var, crate::difftape::Var)> {
    let n = r.len();
    let m = d.len();
    let r_var = tape.leaf(Tensor::new(n, 3, r.iter().flatten().copied().collect())?);
    let d_var = tape.leaf(Tensor::column(d.to_vec()));
    let ru = tape.gather_rows(r_var, us.clone())?;
    let rv = tape.gather_rows(r_var, vs.clone())?;
    let diff = tape.sub(ru, rv)?;
    let s = tape.smoothed_norm(diff)?;
    let resid = tape.sub(s, d_var)?;
    let ratio = tape.div(resid, s)?;
    let coef = tape.scale(ratio, 2.0)?;
    let coef3 = tape.broadcast(coef, m, 3)?;
    let force = tape.mul(coef3, diff)?;
    let on_u = tape.scatter_add_rows(force, us.clone(), n)?;
    let on_v = tape.scatter_add_rows(force, vs.clone(), n)?;
    let grad = tape.sub(on_u, on_v)?;
    Ok((r_var, d_var, grad))
}

/// `∂⟨outer_seed, R_T⟩ / ∂d` by reverse sweep over a stored trajectory.
pub fn hypergradient(
    trajectory: &InnerTrajectory,
    d: &DistanceVector,
    g: &MolecularGraph,
    cfg: &InnerLoopConfig,
    outer_seed: &[[f64; 3]],
) -> Result<Vec<f64>> {
    hypergradient_impl(trajectory, d, g, cfg, outer_seed, false)
}

/// Variant used as a negative control: drops the Hessian term from the state
/// adjoint recursion, so the result is wrong whenever `T > 1`.
pub fn hypergradient_corrupted(
    trajectory: &InnerTrajectory,
    d: &DistanceVector,
    g: &MolecularGraph,
    cfg: &InnerLoopConfig,
    outer_seed: &[[f64; 3]],
) -> Result<Vec<f64>> {
    hypergradient_impl(trajectory, d, g, cfg, outer_seed, true)
}

fn hypergradient_impl(
    trajectory: &InnerTrajectory,
    d: &DistanceVector,
    g: &MolecularGraph,
    cfg: &InnerLoopConfig,
    outer_seed: &[[f64; 3]],
    corrupt: bool,
) -> Result<Vec<f64>> {
    if !trajectory.is_stored() {
        return Err(Error::TrajectoryNotStored);
    }
    let n = g.n_atoms();
    if outer_seed.len() != n {
        return Err(Error::Validation(format!(
            "outer seed has {} rows for {} atoms",
            outer_seed.len(),
            n
        )));
    }
    if d.len() != g.n_edges() {
        return Err(Error::Validation(format!("{} distances for {} edges", d.len(), g.n_edges())));
    }
    let us: Arc<[usize]> = g.edges().iter().map(|e| e.u).collect();
    let vs: Arc<[usize]> = g.edges().iter().map(|e| e.v).collect();
    let eta = cfg.learning_rate;
    let mut adjoint = Tensor::new(n, 3, outer_seed.iter().flatten().copied().collect())?;
    let mut grad_d = vec![0.0; d.len()];
    // states holds R_0..R_T; step t maps R_t to R_{t+1}.
    for state in trajectory.states[..trajectory.states.len() - 1].iter().rev() {
        if adjoint.max_abs() == 0.0 {
            break;
        }
        let mut tape = Tape::new();
        let (r_var, d_var, grad) = record_inner_gradient(&mut tape, state.coords(), d.values(), &us, &vs)?;
        let vjp = tape.backward(grad, &adjoint)?;
        for (acc, v) in grad_d.iter_mut().zip(vjp.get(d_var).data()) {
            *acc -= eta * v;
        }
        if !corrupt {
            let hvp = vjp.get(r_var);
            for (a, h) in adjoint.data_mut().iter_mut().zip(hvp.data()) {
                *a -= eta * h;
            }
        }
    }
    Ok(grad_d)
}

/// Outcome of comparing [`hypergradient`] against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `‖analytic - numeric‖_∞ / ‖numeric‖_∞`.
    pub rel_error: f64,
}

/// Central differences of `d ↦ Σ|R_T(d) - Â|^2` from the fixed start `r0`,
/// where `Â` is the reference aligned onto the base solution and held fixed.
pub fn check_hypergradient(
    r0: &Conformation,
    d: &DistanceVector,
    g: &MolecularGraph,
    r_ref: &Conformation,
    cfg: &InnerLoopConfig,
    h: f64,
    corrupt: bool,
) -> Result<GradCheck> {
    let cfg = InnerLoopConfig { store_trajectory: true, early_stop: None, restarts: 1, ..*cfg };
    let base = descend_from(r0, d, g, &cfg)?;
    let outer = outer_loss_masked(base.final_state(), r_ref, &AtomMask::all(g.n_atoms()))?;
    let analytic = hypergradient_impl(&base, d, g, &cfg, &outer.seed, corrupt)?;
    let frozen = outer.aligned_reference;
    let loss_at = |values: Vec<f64>| -> Result<f64> {
        let traj = descend_from(r0, &DistanceVector::new(values)?, g, &cfg)?;
        Ok(traj
            .final_state()
            .coords()
            .iter()
            .zip(frozen.coords())
            .map(|(a, b)| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>())
            .sum())
    };
    let mut numeric = Vec::with_capacity(d.len());
    for e in 0..d.len() {
        let mut plus = d.values().to_vec();
        let mut minus = plus.clone();
        plus[e] += h;
        minus[e] -= h;
        numeric.push((loss_at(plus)? - loss_at(minus)?) / (2.0 * h));
    }
    let scale = numeric.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic.iter().zip(&numeric).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let rel_error = if scale > 0.0 { diff / scale } else { diff };
    Ok(GradCheck { analytic, numeric, rel_error })
}
