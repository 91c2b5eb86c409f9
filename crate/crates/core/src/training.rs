//! Adam, the per-batch training step, the epoch loop, checkpoints and sampling.
//!
//! One training sample builds a single tape holding encoder, prior, KL, the
//! inverse flow on the true distances and the forward flow from a Gaussian
//! draw. The distance-geometry solve happens off-tape; its hypergradient
//! `a_d = ∂L_recon/∂d` re-enters as the linear term `⟨d, a_d⟩`, whose gradient
//! with respect to the parameters is exactly the chain rule through the solver.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use log::{info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::difftape::{Tape, Tensor};
use crate::distgeo::{hypergradient, outer_loss_masked, solve_distance_geometry, InnerLoopConfig};
use crate::error::{Error, Result};
use crate::eval::{coverage_from_matrix, matching_from_matrix, rmsd_matrix, ConformerSet, MetricConfig, SetRole};
use crate::geometry::AtomMask;
use crate::model::{
    assemble_loss, cnf_forward, integrate, kl_on_tape, prior_params, reparameterize, gaussian_head_on_tape,
    standard_normal_logpdf_on_tape, GraphFeatures, LearnedField, LossBreakdown, ModelConfig, ModelParameters,
    Network, ParamGroup, ParamSlot,
};
use crate::molgraph::{distances_from_conformation, Conformation, DistanceVector, MolecularGraph, MoleculeEntry};
use crate::rng::{standard_normal_vec, SeedSplitter};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    Full,
    /// Reconstruction term reported but excluded from the objective.
    AblationNoRecon,
}

impl FromStr for TrainingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(TrainingMode::Full),
            "ablation_no_recon" => Ok(TrainingMode::AblationNoRecon),
            other => Err(Error::Config(format!("unknown training mode {other:?}"))),
        }
    }
}

impl TrainingMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainingMode::Full => "full",
            TrainingMode::AblationNoRecon => "ablation_no_recon",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub inner: InnerLoopConfig,
    pub seed: u64,
    pub mode: TrainingMode,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 128,
            epochs: 100,
            lambda: 1.0,
            alpha: 1.0,
            inner: InnerLoopConfig::default(),
            seed: 0,
            mode: TrainingMode::Full,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be nonnegative, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lambda >= 0.0 && self.alpha >= 0.0) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.inner.early_stop.is_some() || !self.inner.store_trajectory {
            return Err(Error::Config("training needs a stored, fixed-length inner trajectory".into()));
        }
        self.inner.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

/// Bias-corrected Adam step.
pub fn adam_update(
    params: &[f64],
    grads: &[f64],
    opt: &OptimizerState,
    lr: f64,
) -> Result<(Vec<f64>, OptimizerState)> {
    let n = params.len();
    if grads.len() != n || opt.m.len() != n || opt.v.len() != n {
        return Err(Error::Shape {
            op: "adam",
            detail: format!("{n} params, {} grads, {}/{} moments", grads.len(), opt.m.len(), opt.v.len()),
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    let step = opt.step + 1;
    let c1 = 1.0 - ADAM_BETA1.powf(step as f64);
    let c2 = 1.0 - ADAM_BETA2.powf(step as f64);
    let mut next = OptimizerState { m: Vec::with_capacity(n), v: Vec::with_capacity(n), step };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let m = ADAM_BETA1 * opt.m[i] + (1.0 - ADAM_BETA1) * grads[i];
        let v = ADAM_BETA2 * opt.v[i] + (1.0 - ADAM_BETA2) * grads[i] * grads[i];
        let update = (m / c1) / ((v / c2).sqrt() + ADAM_EPS);
        out.push(params[i] - lr * update);
        next.m.push(m);
        next.v.push(v);
    }
    Ok((out, next))
}

/// Loss parts and parameter gradient for one `(graph, conformer)` sample.
#[derive(Debug, Clone)]
pub struct SampleGradient {
    pub loss: LossBreakdown,
    pub grad: Vec<f64>,
}

/// Loss and gradient for one sample. `rng` supplies ε and `d(t0)`; `inner_seed`
/// seeds the solver's start.
pub fn sample_loss_and_gradient(
    graph: &MolecularGraph,
    target: &Conformation,
    params: &ModelParameters,
    cfg: &TrainConfig,
    splitter: &SeedSplitter,
) -> Result<SampleGradient> {
    let mc = &params.config;
    let feats = GraphFeatures::new(graph)?;
    let d_star = distances_from_conformation(graph, target)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;

    let (mu_q, ls_q) = gaussian_head_on_tape(&mut tape, &bound, Network::Encoder, &feats, mc, Some(d_star.values()))?;
    let (mu_p, ls_p) = gaussian_head_on_tape(&mut tape, &bound, Network::Prior, &feats, mc, None)?;
    let kl = kl_on_tape(&mut tape, mu_q, ls_q, mu_p, ls_p)?;

    let mut rng = splitter.stream("sample-noise", &[]);
    let eps = tape.constant(Tensor::row(standard_normal_vec(&mut rng, mc.z_dim)));
    let sigma_q = tape.exp(ls_q)?;
    let noise = tape.mul(sigma_q, eps)?;
    let z = tape.add(mu_q, noise)?;
    let field = LearnedField::new(&mut tape, &bound, &feats, mc, z)?;

    let d_star_var = tape.constant(Tensor::column(d_star.values().to_vec()));
    let (d0_inv, ell) = integrate(&mut tape, &field, d_star_var, 1.0, 0.0, mc.flow_steps)?;
    let base = standard_normal_logpdf_on_tape(&mut tape, d0_inv)?;
    let aux = tape.sub(ell, base)?;

    let start = tape.constant(Tensor::column(standard_normal_vec(&mut rng, feats.n_edges())));
    let (d_var, _) = integrate(&mut tape, &field, start, 0.0, 1.0, mc.flow_steps)?;
    let d_vals = DistanceVector::new(tape.value(d_var).data().to_vec())
        .map_err(|_| Error::NonFinite("decoded distances".into()))?;

    let traj = solve_distance_geometry(&d_vals, graph, &cfg.inner, splitter.derive("inner-start", &[]))?;
    let outer = outer_loss_masked(traj.final_state(), target, &AtomMask::all(graph.n_atoms()))?;

    let kl_w = tape.scale(kl, cfg.lambda)?;
    let aux_w = tape.scale(aux, cfg.alpha)?;
    let mut objective = tape.add(kl_w, aux_w)?;
    if cfg.mode == TrainingMode::Full {
        let a_d = hypergradient(&traj, &d_vals, graph, &cfg.inner, &outer.seed)?;
        let a_d = tape.constant(Tensor::column(a_d));
        let prod = tape.mul(d_var, a_d)?;
        let linear = tape.sum(prod)?;
        objective = tape.add(objective, linear)?;
    }
    let grads = tape.backward(objective, &Tensor::scalar(1.0))?;
    let grad = bound.flat_gradient(&grads);
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("parameter gradient".into()));
    }

    let (prior, aux) = (tape.value(kl).item(), tape.value(aux).item());
    Ok(SampleGradient { loss: breakdown(outer.value, prior, aux, cfg), grad })
}

fn breakdown(recon: f64, prior: f64, aux: f64, cfg: &TrainConfig) -> LossBreakdown {
    match cfg.mode {
        TrainingMode::Full => assemble_loss(recon, prior, aux, cfg.lambda, cfg.alpha),
        TrainingMode::AblationNoRecon => {
            LossBreakdown { recon, ..assemble_loss(0.0, prior, aux, cfg.lambda, cfg.alpha) }
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub params: ModelParameters,
    pub optimizer: OptimizerState,
    pub loss: LossBreakdown,
    pub diverged: usize,
}

/// One Adam step on the batch-averaged objective. Samples whose forward pass
/// fails numerically are skipped and counted.
pub fn training_step(
    batch: &[(&MolecularGraph, &Conformation)],
    params: &ModelParameters,
    opt: &OptimizerState,
    cfg: &TrainConfig,
    step_seed: &SeedSplitter,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch is empty".into()));
    }
    let run = |(i, (g, r)): (usize, &(&MolecularGraph, &Conformation))| {
        sample_loss_and_gradient(g, r, params, cfg, &step_seed.child("sample", &[i as u64]))
    };
    let results: Vec<Result<SampleGradient>> = if cfg.workers <= 1 {
        batch.iter().enumerate().map(run).collect()
    } else {
        crate::with_workers(cfg.workers, || batch.par_iter().enumerate().map(run).collect())?
    };

    let mut grad = vec![0.0; params.n_params()];
    let mut sums = [0.0; 4];
    let mut used = 0usize;
    let mut diverged = 0usize;
    for (i, res) in results.into_iter().enumerate() {
        match res {
            Ok(s) => {
                used += 1;
                grad.iter_mut().zip(&s.grad).for_each(|(a, b)| *a += b);
                for (acc, v) in sums.iter_mut().zip([s.loss.recon, s.loss.prior, s.loss.aux, s.loss.total]) {
                    *acc += v;
                }
            }
            Err(e) if e.is_numerical() => {
                warn!("skipping sample {i} ({}): {e}", batch[i].0.id());
                diverged += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::AllDiverged(diverged));
    }
    let scale = 1.0 / used as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    let [recon, prior, aux, _] = sums.map(|s| s * scale);
    let loss = breakdown(recon, prior, aux, cfg);

    let (flat, optimizer) = adam_update(&params.to_flat(), &grad, opt, cfg.learning_rate)?;
    let mut next = params.clone();
    next.set_flat(&flat)?;
    Ok(StepOutcome { params: next, optimizer, loss, diverged })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: u64,
    pub recon: f64,
    pub prior: f64,
    pub aux: f64,
    pub total: f64,
    pub diverged_count: usize,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParameters,
    pub optimizer: OptimizerState,
    pub epoch: usize,
}

impl TrainState {
    pub fn fresh(params: ModelParameters) -> Self {
        let n = params.n_params();
        Self { params, optimizer: OptimizerState::new(n), epoch: 0 }
    }
}

/// Train until `cfg.epochs` total epochs have run, calling `on_row` after each
/// step and `on_epoch` after each epoch.
pub fn train(
    data: &[MoleculeEntry],
    cfg: &TrainConfig,
    state: &mut TrainState,
    mut on_row: impl FnMut(&LogRow) -> Result<()>,
    mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    let pairs: Vec<(&MolecularGraph, &Conformation)> =
        data.iter().flat_map(|e| e.conformers.iter().map(move |c| (&e.graph, c))).collect();
    if pairs.is_empty() {
        return Err(Error::Empty("dataset has no conformers".into()));
    }
    let split = SeedSplitter::new(cfg.seed);
    while state.epoch < cfg.epochs {
        let epoch = state.epoch + 1;
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut split.stream("shuffle", &[epoch as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| pairs[i]).collect();
            let step = state.optimizer.step;
            let out = training_step(&batch, &state.params, &state.optimizer, cfg, &split.child("step", &[step]))?;
            state.params = out.params;
            state.optimizer = out.optimizer;
            on_row(&LogRow {
                epoch,
                step: state.optimizer.step,
                recon: out.loss.recon,
                prior: out.loss.prior,
                aux: out.loss.aux,
                total: out.loss.total,
                diverged_count: out.diverged,
            })?;
        }
        state.epoch = epoch;
        on_epoch(state)?;
    }
    Ok(())
}

/// CSV sink for [`LogRow`]s.
pub struct TrainLog<W: Write> {
    writer: csv::Writer<W>,
}

impl<W: Write> TrainLog<W> {
    pub fn new(out: W) -> Self {
        Self { writer: csv::Writer::from_writer(out) }
    }

    pub fn append(out: W) -> Self {
        Self { writer: csv::WriterBuilder::new().has_headers(false).from_writer(out) }
    }

    pub fn write(&mut self, row: &LogRow) -> Result<()> {
        self.writer.serialize(row)?;
        self.writer.flush()?;
        Ok(())
    }
}

pub const CHECKPOINT_SCHEMA: &str = "conformer-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NamedArray {
    name: String,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointFile {
    schema: String,
    config: ModelConfig,
    encoder: Vec<NamedArray>,
    prior: Vec<NamedArray>,
    decoder: Vec<NamedArray>,
    optimizer: Option<OptimizerState>,
    epoch: usize,
}

fn group_to_named(g: &ParamGroup) -> Vec<NamedArray> {
    g.slots()
        .iter()
        .map(|s| NamedArray {
            name: s.name.clone(),
            rows: s.rows,
            cols: s.cols,
            values: g.data()[s.offset..s.offset + s.rows * s.cols].to_vec(),
        })
        .collect()
}

fn group_from_named(arrays: Vec<NamedArray>) -> Result<ParamGroup> {
    let mut slots = Vec::with_capacity(arrays.len());
    let mut data = Vec::new();
    for a in arrays {
        if a.values.len() != a.rows * a.cols {
            return Err(Error::Validation(format!("parameter {} has the wrong length", a.name)));
        }
        slots.push(ParamSlot { name: a.name, rows: a.rows, cols: a.cols, offset: data.len() });
        data.extend(a.values);
    }
    ParamGroup::from_parts(slots, data)
}

pub fn save_checkpoint(path: impl AsRef<Path>, state: &TrainState) -> Result<()> {
    let file = CheckpointFile {
        schema: CHECKPOINT_SCHEMA.into(),
        config: state.params.config,
        encoder: group_to_named(&state.params.encoder),
        prior: group_to_named(&state.params.prior),
        decoder: group_to_named(&state.params.decoder),
        optimizer: Some(state.optimizer.clone()),
        epoch: state.epoch,
    };
    let text = serde_json::to_string(&file)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let file: CheckpointFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if file.schema != CHECKPOINT_SCHEMA {
        return Err(Error::Validation(format!("unsupported checkpoint schema {:?}", file.schema)));
    }
    let params = ModelParameters {
        config: file.config,
        encoder: group_from_named(file.encoder)?,
        prior: group_from_named(file.prior)?,
        decoder: group_from_named(file.decoder)?,
    };
    let reference = ModelParameters::init(file.config, 0)?;
    for (a, b) in params.groups().iter().zip(reference.groups()) {
        if a.slots() != b.slots() {
            return Err(Error::Validation("checkpoint layout does not match its config".into()));
        }
    }
    let n = params.n_params();
    let optimizer = file.optimizer.unwrap_or_else(|| OptimizerState::new(n));
    if optimizer.m.len() != n || optimizer.v.len() != n {
        return Err(Error::Validation("optimizer state does not match the parameters".into()));
    }
    Ok(TrainState { params, optimizer, epoch: file.epoch })
}

/// Draw one conformation: `z ~ p(z|g)`, `d(t0) ~ N(0, I)`, flow, then solve.
pub fn sample_conformation(
    g: &MolecularGraph,
    params: &ModelParameters,
    inner: &InnerLoopConfig,
    seed: u64,
) -> Result<Conformation> {
    Ok(sample_with_distances(g, params, inner, seed)?.0)
}

/// As [`sample_conformation`], also returning the decoded distances.
pub fn sample_with_distances(
    g: &MolecularGraph,
    params: &ModelParameters,
    inner: &InnerLoopConfig,
    seed: u64,
) -> Result<(Conformation, DistanceVector)> {
    let split = SeedSplitter::new(seed);
    let mut rng = split.stream("sample", &[]);
    let prior = prior_params(g, params)?;
    let z = reparameterize(&prior, &standard_normal_vec(&mut rng, params.config.z_dim))?;
    let d0 = standard_normal_vec(&mut rng, g.n_edges());
    let d = DistanceVector::new(cnf_forward(&d0, &z.z, g, params)?.d1)?;
    let traj = solve_distance_geometry(&d, g, inner, split.derive("solve", &[]))?;
    Ok((traj.final_state().clone(), d))
}

/// Small synthetic overfitting benchmark shared by the acceptance suite and the CLI.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub molecules: usize,
    pub atoms: std::ops::RangeInclusive<usize>,
    pub ring_bonds: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub samples_per_molecule: usize,
    pub sample_inner: InnerLoopConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            molecules: 5,
            atoms: 6..=9,
            ring_bonds: 0,
            model: ModelConfig { hidden: 32, layers: 2, z_dim: 4, flow_steps: 8 },
            train: TrainConfig {
                learning_rate: 0.002,
                batch_size: 1,
                epochs: 500,
                inner: InnerLoopConfig { steps: 100, learning_rate: 0.05, ..InnerLoopConfig::default() },
                ..TrainConfig::default()
            },
            samples_per_molecule: 4,
            sample_inner: InnerLoopConfig::standalone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkResult {
    pub seed: u64,
    pub mode: String,
    pub first_epoch_recon: f64,
    pub last_epoch_recon: f64,
    pub cov: f64,
    pub mat: f64,
    pub diverged: usize,
}

/// The benchmark's fixed molecules, one conformer each.
pub fn benchmark_dataset(cfg: &BenchmarkConfig, data_seed: u64) -> Vec<MoleculeEntry> {
    let split = SeedSplitter::new(data_seed);
    (0..cfg.molecules)
        .map(|i| {
            let mut rng = split.stream("benchmark-molecule", &[i as u64]);
            let n = *cfg.atoms.start() + (rand::Rng::gen_range(&mut rng, 0..=cfg.atoms.end() - cfg.atoms.start()));
            let graph = crate::synthetic::random_graph(&mut rng, &format!("syn{i}"), n, cfg.ring_bonds);
            let conf = crate::synthetic::random_conformation(&mut rng, &graph);
            MoleculeEntry { graph, conformers: vec![conf] }
        })
        .collect()
}

/// Train from scratch on `data`, then score sampled conformers with COV/MAT
/// (all-atom, δ from `metric`). `recon` values are epoch means.
pub fn run_benchmark(
    data: &[MoleculeEntry],
    cfg: &BenchmarkConfig,
    mode: TrainingMode,
    seed: u64,
    metric: &MetricConfig,
) -> Result<(BenchmarkResult, TrainState)> {
    let train_cfg = TrainConfig { mode, seed, ..cfg.train.clone() };
    let mut state = TrainState::fresh(ModelParameters::init(cfg.model, seed)?);
    let mut epoch_recon: Vec<(usize, f64, usize)> = Vec::new();
    let mut diverged = 0;
    train(
        data,
        &train_cfg,
        &mut state,
        |row| {
            diverged += row.diverged_count;
            match epoch_recon.last_mut() {
                Some(last) if last.0 == row.epoch => {
                    last.1 += row.recon;
                    last.2 += 1;
                }
                _ => epoch_recon.push((row.epoch, row.recon, 1)),
            }
            Ok(())
        },
        |s| {
            if s.epoch % 50 == 0 {
                info!("{} seed {seed}: epoch {}", mode.name(), s.epoch);
            }
            Ok(())
        },
    )?;
    let mean = |e: &(usize, f64, usize)| e.1 / e.2 as f64;
    let first = epoch_recon.first().map(mean).unwrap_or(f64::NAN);
    let last = epoch_recon.last().map(mean).unwrap_or(f64::NAN);

    let split = SeedSplitter::new(seed);
    let metric = MetricConfig { heavy_only: false, ..*metric };
    let (mut covs, mut mats) = (Vec::new(), Vec::new());
    for (i, entry) in data.iter().enumerate() {
        let n_gen = cfg.samples_per_molecule.max(metric.generated_multiplier * entry.conformers.len());
        let generated: Vec<Conformation> = (0..n_gen)
            .map(|k| {
                sample_conformation(
                    &entry.graph,
                    &state.params,
                    &cfg.sample_inner,
                    split.derive("benchmark-sample", &[i as u64, k as u64]),
                )
            })
            .collect::<Result<_>>()?;
        let gen_set = ConformerSet::new(entry.graph.clone(), generated, SetRole::Generated)?;
        let ref_set = ConformerSet::new(entry.graph.clone(), entry.conformers.clone(), SetRole::Reference)?;
        let matrix = rmsd_matrix(&gen_set, &ref_set, &metric)?;
        covs.push(coverage_from_matrix(&matrix, metric.delta)?);
        mats.push(matching_from_matrix(&matrix)?);
    }
    let avg = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    Ok((
        BenchmarkResult {
            seed,
            mode: mode.name().into(),
            first_epoch_recon: first,
            last_epoch_recon: last,
            cov: avg(&covs),
            mat: avg(&mats),
            diverged,
        },
        state,
    ))
}

pub fn write_benchmark_csv(out: impl Write, rows: &[BenchmarkResult]) -> Result<()> {
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

    #[test]
    fn adam_examples() {
        let opt = OptimizerState::new(1);
        let (p, o) = adam_update(&[1.0], &[0.0], &opt, 0.1).unwrap();
        assert_eq!(p, vec![1.0]);
        assert_eq!((o.m[0], o.v[0], o.step), (0.0, 0.0, 1));

        for g in [3.0, -0.25, 1e-3] {
            let (p, _) = adam_update(&[0.5], &[g], &opt, 0.01).unwrap();
            assert!((p[0] - (0.5 - 0.01 * g.signum())).abs() < 1e-7, "{g}: {}", p[0]);
        }

        let warm = OptimizerState { m: vec![0.2], v: vec![0.3], step: 4 };
        let a = adam_update(&[1.0, 2.0][..1], &[0.7], &warm, 0.01).unwrap();
        let b = adam_update(&[1.0, 2.0][..1], &[0.7], &warm, 0.01).unwrap();
        assert_eq!(a, b);

        assert!(adam_update(&[1.0], &[f64::NAN], &opt, 0.1).is_err());
        assert!(adam_update(&[1.0, 2.0], &[0.0], &opt, 0.1).is_err());
    }

    #[test]
    fn zero_gradient_decays_moments() {
        let warm = OptimizerState { m: vec![0.5], v: vec![0.25], step: 3 };
        let (_, o) = adam_update(&[1.0], &[0.0], &warm, 0.1).unwrap();
        assert!((o.m[0] - 0.45).abs() < 1e-15);
        assert!((o.v[0] - 0.24975).abs() < 1e-15);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("full".parse::<TrainingMode>().unwrap(), TrainingMode::Full);
        assert_eq!("ablation_no_recon".parse::<TrainingMode>().unwrap(), TrainingMode::AblationNoRecon);
        assert!("partial".parse::<TrainingMode>().is_err());
    }

    #[test]
    fn ablation_total_excludes_recon() {
        let cfg = TrainConfig { mode: TrainingMode::AblationNoRecon, lambda: 0.5, alpha: 2.0, ..TrainConfig::default() };
        let b = breakdown(10.0, 1.0, 3.0, &cfg);
        assert_eq!((b.recon, b.total), (10.0, 6.5));
    }
}
