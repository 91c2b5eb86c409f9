//! `conformer` command-line tool.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use conformer_core::config::RunConfig;
use conformer_core::distgeo::{check_hypergradient, initial_state, solve_distance_geometry, InnerLoopConfig};
use conformer_core::eval::{
    coverage_grid, mmd_row, molecule_metrics, rmsd_matrix, write_grid_csv, write_metrics_csv, write_mmd_csv,
    ConformerSet, SetRole,
};
use conformer_core::model::ModelParameters;
use conformer_core::molgraph::{
    distances_from_conformation, parse_dataset, write_dataset, write_xyz, DistanceVector, MoleculeEntry,
};
use conformer_core::rng::SeedSplitter;
use conformer_core::synthetic::{random_conformation, random_graph};
use conformer_core::training::{
    benchmark_dataset, load_checkpoint, run_benchmark, sample_conformation, save_checkpoint, train,
    write_benchmark_csv, BenchmarkConfig, TrainLog, TrainState, TrainingMode,
};
use serde_json::{json, Value};

const OVERRIDE_HELP: &str = "Configuration overrides as `--key value` pairs, placed after the command's own flags";

#[derive(Parser)]
#[command(name = "conformer", version, about = "Molecular conformer generation with a bilevel distance decoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// Flat `key = value` configuration file; built-in defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0.., value_name = "--KEY VALUE", help = OVERRIDE_HELP)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a bonds-only dataset, add auxiliary edges and write it back out.
    Ingest {
        input: PathBuf,
        output: PathBuf,
    },
    /// Train a model; writes checkpoints and a CSV log under `output_dir`.
    Train(ConfigArgs),
    /// Draw `multiplier ×` as many conformers as each reference molecule has.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write one multi-frame XYZ file per molecule here.
        #[arg(long)]
        xyz_dir: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Recover coordinates from target distances.
    Solve {
        /// Dataset file; the first molecule (or `--molecule`) is used.
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        molecule: Option<String>,
        /// CSV with columns u,v,distance covering every (expanded) edge.
        #[arg(long)]
        distances: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// CSV of step,objective for the winning restart.
        #[arg(long)]
        trajectory: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compare unrolled hypergradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 4)]
        min_atoms: usize,
        #[arg(long, default_value_t = 8)]
        max_atoms: usize,
        /// Inner step counts, cycled over instances.
        #[arg(long, value_delimiter = ',', default_value = "10,50")]
        steps: Vec<usize>,
        #[arg(long, default_value_t = 0.01)]
        eta: f64,
        #[arg(long, default_value_t = 1e-4)]
        fd_step: f64,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        /// Drop the Hessian term from the adjoint recursion (negative control).
        #[arg(long)]
        corrupt_vjp: bool,
    },
    /// COV and MAT per molecule, with mean and median rows.
    Eval {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write coverage over a grid of thresholds.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        grid_points: usize,
        #[arg(long, default_value_t = 2.0)]
        grid_max: f64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// MMD between C/O distance distributions (single, pair, joint).
    EvalMmd {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write every conformer of a dataset as XYZ, one file per molecule.
    ExportXyz {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Full vs no-reconstruction training on the synthetic overfit benchmark.
    Ablation {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 7)]
        data_seed: u64,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::Train(_) => "train",
            Command::Sample { .. } => "sample",
            Command::Solve { .. } => "solve",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Eval { .. } => "eval",
            Command::EvalMmd { .. } => "eval-mmd",
            Command::ExportXyz { .. } => "export-xyz",
            Command::Ablation { .. } => "ablation",
        }
    }
}

/// A check that ran but did not pass; reported with the numerical-failure code.
#[derive(Debug)]
struct CheckFailed {
    message: String,
    summary: Value,
}

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CheckFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<CheckFailed>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<conformer_core::Error>() {
            return if e.is_numerical() { 2 } else { 1 };
        }
    }
    1
}

fn load_config(args: &ConfigArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    let mut it = args.overrides.iter();
    while let Some(flag) = it.next() {
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| anyhow!("unexpected argument {flag:?}; overrides look like --key value"))?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| anyhow!("--{key} needs a value"))?;
                (key.to_string(), v.clone())
            }
        };
        cfg.set(&key.replace('-', "_"), &value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_entries(path: &Path) -> anyhow::Result<Vec<MoleculeEntry>> {
    if !path.is_file() {
        bail!(conformer_core::Error::Validation(format!("{} does not exist", path.display())));
    }
    parse_dataset(path).with_context(|| format!("reading {}", path.display())).map_err(Into::into)
}

/// Expand any bonds-only graphs so every molecule carries its auxiliary edges.
fn ensure_expanded(entries: Vec<MoleculeEntry>) -> anyhow::Result<Vec<MoleculeEntry>> {
    entries
        .into_iter()
        .map(|e| {
            if e.graph.is_expanded() {
                Ok(e)
            } else {
                Ok(MoleculeEntry { graph: e.graph.expand_auxiliary_edges()?, conformers: e.conformers })
            }
        })
        .collect()
}

fn create_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn cmd_ingest(input: &Path, output: &Path) -> anyhow::Result<Value> {
    let entries = load_entries(input)?;
    if let Some(e) = entries.iter().find(|e| e.graph.is_expanded()) {
        bail!(conformer_core::Error::Precondition(format!(
            "molecule {} already contains auxiliary edges; ingest expects bonds only",
            e.graph.id()
        )));
    }
    let mut out = Vec::with_capacity(entries.len());
    let mut stats = Vec::new();
    for e in entries {
        let graph = e.graph.expand_auxiliary_edges()?;
        println!(
            "{}\tatoms={}\tbonds={}\tedges={}\tconformers={}",
            graph.id(),
            graph.n_atoms(),
            graph.n_bonds(),
            graph.n_edges(),
            e.conformers.len()
        );
        stats.push(json!({
            "id": graph.id(),
            "atoms": graph.n_atoms(),
            "bonds": graph.n_bonds(),
            "edges": graph.n_edges(),
            "conformers": e.conformers.len(),
        }));
        out.push(MoleculeEntry { graph, conformers: e.conformers });
    }
    create_parent(output)?;
    write_dataset(output, &out)?;
    Ok(json!({ "molecules": stats.len(), "per_molecule": stats, "output": output }))
}

fn cmd_train(args: &ConfigArgs) -> anyhow::Result<Value> {
    let cfg = load_config(args)?;
    let data_path = cfg.data.clone().ok_or_else(|| anyhow!(conformer_core::Error::Config("data is not set".into())))?;
    let data = ensure_expanded(load_entries(&data_path)?)?;
    let train_cfg = cfg.train_config();
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    fs::write(cfg.output_dir.join("config.conf"), cfg.to_text())?;

    let log_path = cfg.output_dir.join("train_log.csv");
    let (mut state, mut log) = match &cfg.resume {
        Some(ckpt) => {
            let state = load_checkpoint(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            if state.params.config != cfg.model_config() {
                bail!(conformer_core::Error::Config("checkpoint architecture differs from the configuration".into()));
            }
            let file = fs::OpenOptions::new().create(true).append(true).open(&log_path)?;
            let log = if file.metadata()?.len() == 0 { TrainLog::new(file) } else { TrainLog::append(file) };
            (state, log)
        }
        None => {
            let params = ModelParameters::init(cfg.model_config(), cfg.seed)?;
            (TrainState::fresh(params), TrainLog::new(File::create(&log_path)?))
        }
    };
    let start_epoch = state.epoch;
    let mut last = None;
    let mut diverged = 0;
    let every = cfg.checkpoint_every.max(1);
    train(
        &data,
        &train_cfg,
        &mut state,
        |row| {
            diverged += row.diverged_count;
            last = Some(*row);
            log.write(row)
        },
        |s| {
            log::info!("epoch {} done", s.epoch);
            if s.epoch % every == 0 {
                save_checkpoint(cfg.output_dir.join(format!("checkpoint_epoch{:04}.json", s.epoch)), s)?;
            }
            Ok(())
        },
    )?;
    let final_ckpt = cfg.output_dir.join("checkpoint_last.json");
    save_checkpoint(&final_ckpt, &state)?;
    Ok(json!({
        "epochs_run": state.epoch - start_epoch,
        "epoch": state.epoch,
        "step": state.optimizer.step,
        "diverged": diverged,
        "last": last.map(|r| json!({"recon": r.recon, "prior": r.prior, "aux": r.aux, "total": r.total})),
        "checkpoint": final_ckpt,
        "log": log_path,
    }))
}

fn write_xyz_file(path: &Path, entry: &MoleculeEntry) -> anyhow::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for (k, c) in entry.conformers.iter().enumerate() {
        write_xyz(&mut out, &entry.graph, c, &format!("{} conformer {k}", entry.graph.id()))?;
    }
    out.flush()?;
    Ok(())
}

fn safe_file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect()
}

fn cmd_sample(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    xyz_dir: Option<&Path>,
    args: &ConfigArgs,
) -> anyhow::Result<Value> {
    let cfg = load_config(args)?;
    let state = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let entries = ensure_expanded(load_entries(data)?)?;
    let inner = cfg.solve_config();
    let split = SeedSplitter::new(cfg.seed);
    let mut generated = Vec::with_capacity(entries.len());
    let mut total = 0;
    for (i, e) in entries.iter().enumerate() {
        let n = cfg.multiplier * e.conformers.len().max(1);
        let conformers = (0..n)
            .map(|k| sample_conformation(&e.graph, &state.params, &inner, split.derive("sample", &[i as u64, k as u64])))
            .collect::<conformer_core::Result<Vec<_>>>()
            .with_context(|| format!("sampling {}", e.graph.id()))?;
        total += conformers.len();
        generated.push(MoleculeEntry { graph: e.graph.clone(), conformers });
    }
    create_parent(out)?;
    write_dataset(out, &generated)?;
    if let Some(dir) = xyz_dir {
        fs::create_dir_all(dir)?;
        for e in &generated {
            write_xyz_file(&dir.join(format!("{}.xyz", safe_file_stem(e.graph.id()))), e)?;
        }
    }
    Ok(json!({ "molecules": generated.len(), "conformers": total, "output": out }))
}

fn read_distance_csv(path: &Path) -> anyhow::Result<HashMap<(usize, usize), f64>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut map = HashMap::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let field = |k: usize| rec.get(k).map(str::trim).unwrap_or("");
        let parse_err = |what: &str| conformer_core::Error::Parse { line: i + 2, message: format!("bad {what}") };
        let u: usize = field(0).parse().map_err(|_| parse_err("u"))?;
        let v: usize = field(1).parse().map_err(|_| parse_err("v"))?;
        let d: f64 = field(2).parse().map_err(|_| parse_err("distance"))?;
        map.insert((u.min(v), u.max(v)), d);
    }
    Ok(map)
}

fn cmd_solve(
    graph_path: &Path,
    molecule: Option<&str>,
    distances: &Path,
    out: &Path,
    trajectory: Option<&Path>,
    args: &ConfigArgs,
) -> anyhow::Result<Value> {
    let cfg = load_config(args)?;
    let entries = ensure_expanded(load_entries(graph_path)?)?;
    let entry = match molecule {
        Some(id) => entries.iter().find(|e| e.graph.id() == id).ok_or_else(|| {
            anyhow!(conformer_core::Error::Validation(format!("molecule {id} not in {}", graph_path.display())))
        })?,
        None => entries
            .first()
            .ok_or_else(|| anyhow!(conformer_core::Error::Empty("graph file has no molecules".into())))?,
    };
    let g = &entry.graph;
    let table = read_distance_csv(distances)?;
    let values = g
        .edges()
        .iter()
        .map(|e| {
            table.get(&(e.u, e.v)).copied().ok_or_else(|| {
                anyhow!(conformer_core::Error::Validation(format!("no distance for edge ({}, {})", e.u, e.v)))
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let d = DistanceVector::new(values)?;
    let inner = cfg.solve_config();
    let traj = solve_distance_geometry(&d, g, &inner, cfg.seed)?;
    create_parent(out)?;
    let mut w = BufWriter::new(File::create(out)?);
    write_xyz(&mut w, g, traj.final_state(), &format!("{} solved", g.id()))?;
    w.flush()?;
    if let Some(p) = trajectory {
        create_parent(p)?;
        let mut tw = csv::Writer::from_path(p)?;
        tw.write_record(["step", "objective"])?;
        for (s, h) in traj.objective_values.iter().enumerate() {
            tw.write_record([s.to_string(), h.to_string()])?;
        }
        tw.flush()?;
    }
    let h = traj.final_objective();
    Ok(json!({
        "molecule": g.id(),
        "objective": h,
        "objective_per_edge": h / g.n_edges().max(1) as f64,
        "steps": traj.steps(),
        "restart": traj.restart,
        "output": out,
    }))
}

#[allow(clippy::too_many_arguments)]
fn cmd_gradcheck(
    seed: u64,
    instances: usize,
    min_atoms: usize,
    max_atoms: usize,
    steps: &[usize],
    eta: f64,
    fd_step: f64,
    tolerance: f64,
    corrupt: bool,
) -> anyhow::Result<Value> {
    if min_atoms < 2 || max_atoms < min_atoms || steps.is_empty() {
        bail!(conformer_core::Error::Config("need 2 <= min_atoms <= max_atoms and at least one step count".into()));
    }
    let split = SeedSplitter::new(seed);
    let mut rows = Vec::with_capacity(instances);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for k in 0..instances {
        let mut rng = split.stream("gradcheck", &[k as u64]);
        let n = min_atoms + (k % (max_atoms - min_atoms + 1));
        let t = steps[k % steps.len()];
        let g = random_graph(&mut rng, &format!("gc{k}"), n, 0);
        let target = random_conformation(&mut rng, &g);
        let noisy: Vec<f64> = distances_from_conformation(&g, &target)?
            .values()
            .iter()
            .zip(conformer_core::rng::standard_normal_vec(&mut rng, g.n_edges()))
            .map(|(d, e)| d * (1.0 + 0.05 * e))
            .collect();
        let d = DistanceVector::new(noisy)?;
        let cfg = InnerLoopConfig { steps: t, learning_rate: eta, ..InnerLoopConfig::default() };
        let r0 = initial_state(n, &cfg, split.derive("gradcheck-start", &[k as u64]), 0);
        let check = check_hypergradient(&r0, &d, &g, &target, &cfg, fd_step, corrupt)?;
        let pass = check.rel_error < tolerance;
        if !pass {
            failures += 1;
        }
        worst = worst.max(check.rel_error);
        println!("instance {k}\tatoms={n}\tT={t}\tmax_rel_error={:.3e}\t{}", check.rel_error, if pass { "pass" } else { "FAIL" });
        rows.push(json!({ "instance": k, "atoms": n, "steps": t, "max_rel_error": check.rel_error, "pass": pass }));
    }
    let summary = json!({
        "instances": instances,
        "failures": failures,
        "worst_rel_error": worst,
        "tolerance": tolerance,
        "corrupt_vjp": corrupt,
        "per_instance": rows,
    });
    if failures > 0 {
        return Err(anyhow!(CheckFailed {
            message: format!("{failures} of {instances} instances exceed {tolerance:e}"),
            summary,
        }));
    }
    Ok(summary)
}

/// Pair generated and reference entries by molecule id; both sides must match exactly.
fn paired_sets(generated: &Path, reference: &Path) -> anyhow::Result<Vec<(ConformerSet, ConformerSet)>> {
    let gen = ensure_expanded(load_entries(generated)?)?;
    let refs = ensure_expanded(load_entries(reference)?)?;
    let mut by_id: HashMap<String, MoleculeEntry> = gen.into_iter().map(|e| (e.graph.id().to_string(), e)).collect();
    let mut out = Vec::with_capacity(refs.len());
    for r in refs {
        let g = by_id.remove(r.graph.id()).ok_or_else(|| {
            anyhow!(conformer_core::Error::Validation(format!("molecule {} has no generated conformers", r.graph.id())))
        })?;
        out.push((
            ConformerSet::new(g.graph, g.conformers, SetRole::Generated)?,
            ConformerSet::new(r.graph, r.conformers, SetRole::Reference)?,
        ));
    }
    if let Some(extra) = by_id.keys().next() {
        bail!(conformer_core::Error::Validation(format!("generated molecule {extra} is not in the reference set")));
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    generated: &Path,
    reference: &Path,
    out: &Path,
    grid: Option<&Path>,
    grid_points: usize,
    grid_max: f64,
    args: &ConfigArgs,
) -> anyhow::Result<Value> {
    let cfg = load_config(args)?;
    let metric = cfg.metric_config();
    let pairs = paired_sets(generated, reference)?;
    let mut rows = Vec::with_capacity(pairs.len());
    let mut grid_rows = Vec::new();
    let deltas: Vec<f64> = (1..=grid_points).map(|i| grid_max * i as f64 / grid_points as f64).collect();
    for (g, r) in &pairs {
        rows.push(molecule_metrics(g, r, &metric)?);
        if grid.is_some() {
            let matrix = rmsd_matrix(g, r, &metric)?;
            grid_rows.push((r.graph.id().to_string(), coverage_grid(&matrix, &deltas)?));
        }
    }
    create_parent(out)?;
    let agg = write_metrics_csv(File::create(out)?, &rows)?;
    if let Some(p) = grid {
        create_parent(p)?;
        write_grid_csv(File::create(p)?, &grid_rows)?;
    }
    Ok(json!({
        "molecules": rows.len(),
        "delta": metric.delta,
        "cov_mean": agg.cov_mean,
        "cov_median": agg.cov_median,
        "mat_mean": agg.mat_mean,
        "mat_median": agg.mat_median,
        "output": out,
    }))
}

fn cmd_eval_mmd(generated: &Path, reference: &Path, out: &Path, args: &ConfigArgs) -> anyhow::Result<Value> {
    let cfg = load_config(args)?;
    let pairs = paired_sets(generated, reference)?;
    let mut rows = Vec::new();
    for (g, r) in &pairs {
        if let Some(row) = mmd_row(g, r, cfg.pair_filter, &cfg.mmd_config())? {
            rows.push(row);
        }
    }
    create_parent(out)?;
    write_mmd_csv(File::create(out)?, &rows)?;
    let mean = |f: fn(&conformer_core::eval::MmdRow) -> f64| {
        let v: Vec<f64> = rows.iter().map(f).filter(|x| x.is_finite()).collect();
        if v.is_empty() { Value::Null } else { json!(v.iter().sum::<f64>() / v.len() as f64) }
    };
    Ok(json!({
        "molecules": rows.len(),
        "mmd_single_mean": mean(|r| r.mmd_single_mean),
        "mmd_pair_mean": mean(|r| r.mmd_pair_mean),
        "mmd_joint_mean": mean(|r| r.mmd_joint),
        "output": out,
    }))
}

fn cmd_export_xyz(data: &Path, out_dir: &Path) -> anyhow::Result<Value> {
    let entries = load_entries(data)?;
    fs::create_dir_all(out_dir)?;
    let mut frames = 0;
    for e in &entries {
        write_xyz_file(&out_dir.join(format!("{}.xyz", safe_file_stem(e.graph.id()))), e)?;
        frames += e.conformers.len();
    }
    Ok(json!({ "molecules": entries.len(), "frames": frames, "output_dir": out_dir }))
}

fn cmd_ablation(out: &Path, seeds: u64, epochs: Option<usize>, data_seed: u64) -> anyhow::Result<Value> {
    let mut bench = BenchmarkConfig::default();
    if let Some(e) = epochs {
        bench.train.epochs = e;
    }
    let data = benchmark_dataset(&bench, data_seed);
    let metric = conformer_core::eval::MetricConfig::default();
    let mut rows = Vec::new();
    let mut full_wins = 0;
    for seed in 0..seeds {
        let (full, _) = run_benchmark(&data, &bench, TrainingMode::Full, seed, &metric)?;
        let (abl, _) = run_benchmark(&data, &bench, TrainingMode::AblationNoRecon, seed, &metric)?;
        println!("seed {seed}\tfull MAT={:.4}\tablation MAT={:.4}", full.mat, abl.mat);
        if full.mat <= abl.mat {
            full_wins += 1;
        }
        rows.push(full);
        rows.push(abl);
    }
    create_parent(out)?;
    write_benchmark_csv(File::create(out)?, &rows)?;
    Ok(json!({ "seeds": seeds, "full_mat_le_ablation": full_wins, "output": out }))
}

fn run(command: &Command) -> anyhow::Result<Value> {
    match command {
        Command::Ingest { input, output } => cmd_ingest(input, output),
        Command::Train(args) => cmd_train(args),
        Command::Sample { checkpoint, data, out, xyz_dir, cfg } => {
            cmd_sample(checkpoint, data, out, xyz_dir.as_deref(), cfg)
        }
        Command::Solve { graph, molecule, distances, out, trajectory, cfg } => {
            cmd_solve(graph, molecule.as_deref(), distances, out, trajectory.as_deref(), cfg)
        }
        Command::Gradcheck { seed, instances, min_atoms, max_atoms, steps, eta, fd_step, tolerance, corrupt_vjp } => {
            cmd_gradcheck(*seed, *instances, *min_atoms, *max_atoms, steps, *eta, *fd_step, *tolerance, *corrupt_vjp)
        }
        Command::Eval { generated, reference, out, grid, grid_points, grid_max, cfg } => {
            cmd_eval(generated, reference, out, grid.as_deref(), *grid_points, *grid_max, cfg)
        }
        Command::EvalMmd { generated, reference, out, cfg } => cmd_eval_mmd(generated, reference, out, cfg),
        Command::ExportXyz { data, out_dir } => cmd_export_xyz(data, out_dir),
        Command::Ablation { out, seeds, epochs, data_seed } => cmd_ablation(out, *seeds, *epochs, *data_seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let name = cli.command.name();
    match run(&cli.command) {
        Ok(mut summary) => {
            if let Value::Object(map) = &mut summary {
                map.insert("command".into(), json!(name));
                map.insert("status".into(), json!("ok"));
            }
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            let code = exit_code(&err);
            eprintln!("error: {err:#}");
            let mut summary = match err.downcast_ref::<CheckFailed>() {
                Some(c) => c.summary.clone(),
                None => json!({}),
            };
            if let Value::Object(map) = &mut summary {
                map.insert("command".into(), json!(name));
                map.insert("status".into(), json!("error"));
                map.insert("exit_code".into(), json!(code));
                map.insert("error".into(), json!(format!("{err:#}")));
            }
            println!("{summary}");
            ExitCode::from(code)
        }
    }
}
