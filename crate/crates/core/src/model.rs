//! Encoder, prior and flow decoder.
//!
//! All three networks share one message-passing backbone shape:
//! an affine node input layer, then `layers` rounds of
//! `h ← h + tanh([h, Σ_in tanh([h_src, bond one-hot, scalar] W_m + b_m)] W_u + b_u)`.
//! The encoder feeds measured distances as the edge scalar; prior and decoder
//! see the graph only.
//!
//! The decoder is a continuous normalizing flow on the distance vector. Its
//! vector field acts edge by edge on `[d_e, t, h_u + h_v, h_u ⊙ h_v, z]`, so the
//! Jacobian `∂g/∂d` is diagonal and its trace is exact and cheap.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::difftape::{Axis, Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::molgraph::{distances_from_conformation, BondType, Conformation, DistanceVector, Element, MolecularGraph};
use crate::rng::SeedSplitter;

pub const SIGMA_MIN: f64 = 1e-4;
pub const SIGMA_MAX: f64 = 1e4;

const N_ELEMENTS: usize = Element::VOCAB.len();
const N_BOND_TYPES: usize = BondType::ALL.len();

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub layers: usize,
    pub z_dim: usize,
    /// Fixed RK4 steps over `[0, 1]`.
    pub flow_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: 256, layers: 3, z_dim: 10, flow_steps: 20 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.z_dim == 0 || self.flow_steps == 0 {
            return Err(Error::Config(format!("invalid model config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Network {
    Encoder,
    Prior,
    Decoder,
}

impl Network {
    fn prefix(self) -> &'static str {
        match self {
            Network::Encoder => "encoder",
            Network::Prior => "prior",
            Network::Decoder => "decoder",
        }
    }

    fn edge_scalar_dim(self) -> usize {
        usize::from(self == Network::Encoder)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSlot {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

/// Flat parameter store with named sub-slices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamGroup {
    slots: Vec<ParamSlot>,
    index: HashMap<String, usize>,
    data: Vec<f64>,
}

impl ParamGroup {
    fn push(&mut self, name: String, rows: usize, cols: usize, mut init: impl FnMut() -> f64) {
        let offset = self.data.len();
        self.data.extend((0..rows * cols).map(|_| init()));
        self.index.insert(name.clone(), self.slots.len());
        self.slots.push(ParamSlot { name, rows, cols, offset });
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn slot(&self, name: &str) -> Option<&ParamSlot> {
        self.index.get(name).map(|&i| &self.slots[i])
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.slot(name).map(|s| &self.data[s.offset..s.offset + s.rows * s.cols])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let s = self.slot(name)?.clone();
        Some(&mut self.data[s.offset..s.offset + s.rows * s.cols])
    }

    /// Rebuild from explicit slots (checkpoint loading).
    pub fn from_parts(slots: Vec<ParamSlot>, data: Vec<f64>) -> Result<Self> {
        let mut expected = 0;
        for s in &slots {
            if s.offset != expected {
                return Err(Error::Validation(format!("parameter {} has a gap before it", s.name)));
            }
            expected += s.rows * s.cols;
        }
        if expected != data.len() {
            return Err(Error::Validation(format!(
                "parameter slots cover {expected} values but {} were given",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("parameters".into()));
        }
        let index = slots.iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect();
        Ok(Self { slots, index, data })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub config: ModelConfig,
    pub encoder: ParamGroup,
    pub prior: ParamGroup,
    pub decoder: ParamGroup,
}

fn add_mpnn(group: &mut ParamGroup, prefix: &str, cfg: &ModelConfig, scalar_dim: usize, rng: &mut impl Rng) {
    let h = cfg.hidden;
    let mut dense = |group: &mut ParamGroup, name: String, rows: usize, cols: usize| {
        let std = 1.0 / (rows as f64).sqrt();
        group.push(name, rows, cols, || std * rng.sample::<f64, _>(StandardNormal));
    };
    dense(group, format!("{prefix}.input.w"), N_ELEMENTS, h);
    group.push(format!("{prefix}.input.b"), 1, h, || 0.0);
    for l in 0..cfg.layers {
        dense(group, format!("{prefix}.layer{l}.msg.w"), h + N_BOND_TYPES + scalar_dim, h);
        group.push(format!("{prefix}.layer{l}.msg.b"), 1, h, || 0.0);
        dense(group, format!("{prefix}.layer{l}.upd.w"), 2 * h, h);
        group.push(format!("{prefix}.layer{l}.upd.b"), 1, h, || 0.0);
    }
}

impl ModelParameters {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let split = SeedSplitter::new(seed);
        let (h, z) = (config.hidden, config.z_dim);
        let mut groups = Vec::new();
        for net in [Network::Encoder, Network::Prior, Network::Decoder] {
            let mut rng = split.stream("param-init", &[net as u64]);
            let mut g = ParamGroup::default();
            let p = net.prefix();
            add_mpnn(&mut g, &format!("{p}.mpnn"), &config, net.edge_scalar_dim(), &mut rng);
            if net == Network::Decoder {
                let f = h;
                let mut dense = |g: &mut ParamGroup, name: &str, rows: usize, cols: usize, gain: f64| {
                    let std = gain / (rows as f64).sqrt();
                    g.push(format!("decoder.flow.{name}"), rows, cols, || {
                        std * rng.sample::<f64, _>(StandardNormal)
                    });
                };
                dense(&mut g, "w_d", 1, f, 0.3);
                dense(&mut g, "w_t", 1, f, 1.0);
                dense(&mut g, "w_ctx", 2 * h + z, f, 1.0);
                g.push("decoder.flow.b1".into(), 1, f, || 0.0);
                dense(&mut g, "w2", f, f, 1.0);
                g.push("decoder.flow.b2".into(), 1, f, || 0.0);
                dense(&mut g, "w3", f, 1, 0.1);
                g.push("decoder.flow.b3".into(), 1, 1, || 0.0);
            } else {
                let std = 0.1 / (h as f64).sqrt();
                g.push(format!("{p}.head.w"), h, 2 * z, || std * rng.sample::<f64, _>(StandardNormal));
                g.push(format!("{p}.head.b"), 1, 2 * z, || 0.0);
            }
            groups.push(g);
        }
        let decoder = groups.pop().expect("three groups");
        let prior = groups.pop().expect("three groups");
        let encoder = groups.pop().expect("three groups");
        Ok(Self { config, encoder, prior, decoder })
    }

    pub fn groups(&self) -> [&ParamGroup; 3] {
        [&self.encoder, &self.prior, &self.decoder]
    }

    pub fn groups_mut(&mut self) -> [&mut ParamGroup; 3] {
        [&mut self.encoder, &mut self.prior, &mut self.decoder]
    }

    pub fn n_params(&self) -> usize {
        self.groups().iter().map(|g| g.len()).sum()
    }

    /// Encoder, prior and decoder values concatenated.
    pub fn to_flat(&self) -> Vec<f64> {
        self.groups().iter().flat_map(|g| g.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::Validation(format!(
                "{} values for {} parameters",
                flat.len(),
                self.n_params()
            )));
        }
        let mut off = 0;
        for g in self.groups_mut() {
            let n = g.len();
            g.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.groups().into_iter().find_map(|g| g.get(name))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.groups_mut().into_iter().find_map(|g| g.get_mut(name))
    }

    /// Zero the flow's output layer so the vector field vanishes.
    pub fn zero_flow_output(&mut self) {
        for name in ["decoder.flow.w3", "decoder.flow.b3"] {
            self.get_mut(name).expect("decoder has an output layer").fill(0.0);
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundParams> {
        let mut vars = HashMap::new();
        let mut order = Vec::new();
        for g in self.groups() {
            for s in g.slots() {
                let t = Tensor::new(s.rows, s.cols, g.data()[s.offset..s.offset + s.rows * s.cols].to_vec())?;
                let v = tape.leaf(t);
                vars.insert(s.name.clone(), v);
                order.push(v);
            }
        }
        Ok(BoundParams { vars, order })
    }
}

/// Parameters registered as leaves on one tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: HashMap<String, Var>,
    order: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("model has no parameter {name}")))
    }

    /// Gradients in the flat layout of [`ModelParameters::to_flat`].
    pub fn flat_gradient(&self, grads: &Gradients) -> Vec<f64> {
        self.order.iter().flat_map(|&v| grads.get(v).into_vec()).collect()
    }
}

/// Graph-derived constants reused by every network on the same molecule.
#[derive(Debug, Clone)]
pub struct GraphFeatures {
    n_atoms: usize,
    n_edges: usize,
    node_onehot: Tensor,
    /// Directed message edges: each undirected edge in both directions.
    src: Arc<[usize]>,
    dst: Arc<[usize]>,
    edge_onehot: Tensor,
    edge_u: Arc<[usize]>,
    edge_v: Arc<[usize]>,
}

impl GraphFeatures {
    pub fn new(g: &MolecularGraph) -> Result<Self> {
        if !g.is_expanded() {
            return Err(Error::Precondition(format!("molecule {} is not expanded", g.id())));
        }
        let n = g.n_atoms();
        let m = g.n_edges();
        let mut node_onehot = Tensor::zeros(n, N_ELEMENTS);
        for (i, a) in g.atoms().iter().enumerate() {
            node_onehot.data_mut()[i * N_ELEMENTS + a.element.index()] = 1.0;
        }
        let mut src = Vec::with_capacity(2 * m);
        let mut dst = Vec::with_capacity(2 * m);
        let mut edge_onehot = Tensor::zeros(2 * m, N_BOND_TYPES);
        for (k, e) in g.edges().iter().enumerate() {
            src.extend([e.u, e.v]);
            dst.extend([e.v, e.u]);
            for r in [2 * k, 2 * k + 1] {
                edge_onehot.data_mut()[r * N_BOND_TYPES + e.bond_type.rank()] = 1.0;
            }
        }
        Ok(Self {
            n_atoms: n,
            n_edges: m,
            node_onehot,
            src: src.into(),
            dst: dst.into(),
            edge_onehot,
            edge_u: g.edges().iter().map(|e| e.u).collect(),
            edge_v: g.edges().iter().map(|e| e.v).collect(),
        })
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    pub fn n_edges(&self) -> usize {
        self.n_edges
    }
}

/// Per-atom embeddings (`n × hidden`) on a tape.
pub fn mpnn_on_tape(
    tape: &mut Tape,
    params: &BoundParams,
    network: Network,
    feats: &GraphFeatures,
    layers: usize,
    edge_scalars: Option<&[f64]>,
) -> Result<Var> {
    let prefix = format!("{}.mpnn", network.prefix());
    let expects_scalars = network.edge_scalar_dim() == 1;
    let edge_input = match (edge_scalars, expects_scalars) {
        (Some(d), true) => {
            if d.len() != feats.n_edges {
                return Err(Error::Shape {
                    op: "mpnn",
                    detail: format!("{} edge scalars for {} edges", d.len(), feats.n_edges),
                });
            }
            let scalars = Tensor::column(d.iter().flat_map(|&x| [x, x]).collect());
            let onehot = tape.constant(feats.edge_onehot.clone());
            let sc = tape.constant(scalars);
            tape.concat(&[onehot, sc], Axis::Cols)?
        }
        (None, false) => tape.constant(feats.edge_onehot.clone()),
        (Some(_), false) => {
            return Err(Error::Config(format!("{} network takes no edge scalars", network.prefix())))
        }
        (None, true) => {
            return Err(Error::Config(format!("{} network needs edge scalars", network.prefix())))
        }
    };
    let x = tape.constant(feats.node_onehot.clone());
    let mut h = tape.affine(x, params.var(&format!("{prefix}.input.w"))?, params.var(&format!("{prefix}.input.b"))?)?;
    for l in 0..layers {
        let src = tape.gather_rows(h, feats.src.clone())?;
        let msg_in = tape.concat(&[src, edge_input], Axis::Cols)?;
        let pre = tape.affine(
            msg_in,
            params.var(&format!("{prefix}.layer{l}.msg.w"))?,
            params.var(&format!("{prefix}.layer{l}.msg.b"))?,
        )?;
        let msg = tape.tanh(pre)?;
        let agg = tape.scatter_add_rows(msg, feats.dst.clone(), feats.n_atoms)?;
        let upd_in = tape.concat(&[h, agg], Axis::Cols)?;
        let upd_pre = tape.affine(
            upd_in,
            params.var(&format!("{prefix}.layer{l}.upd.w"))?,
            params.var(&format!("{prefix}.layer{l}.upd.b"))?,
        )?;
        let upd = tape.tanh(upd_pre)?;
        h = tape.add(h, upd)?;
    }
    Ok(h)
}

/// Mean-pooled embedding through the affine head; returns `(μ, log σ)` rows,
/// with `log σ` clamped to `[ln 1e-4, ln 1e4]`.
pub fn gaussian_head_on_tape(
    tape: &mut Tape,
    params: &BoundParams,
    network: Network,
    feats: &GraphFeatures,
    config: &ModelConfig,
    edge_scalars: Option<&[f64]>,
) -> Result<(Var, Var)> {
    let h = mpnn_on_tape(tape, params, network, feats, config.layers, edge_scalars)?;
    let summed = tape.sum_rows(h)?;
    let pooled = tape.scale(summed, 1.0 / feats.n_atoms.max(1) as f64)?;
    let p = network.prefix();
    let out = tape.affine(pooled, params.var(&format!("{p}.head.w"))?, params.var(&format!("{p}.head.b"))?)?;
    let mu = tape.slice(out, Axis::Cols, 0, config.z_dim)?;
    let raw_log_sigma = tape.slice(out, Axis::Cols, config.z_dim, config.z_dim)?;
    let log_sigma = tape.clamp(raw_log_sigma, SIGMA_MIN.ln(), SIGMA_MAX.ln())?;
    Ok((mu, log_sigma))
}

/// Closed-form `KL(q || p)` for diagonal Gaussians given as `(μ, log σ)` rows.
pub fn kl_on_tape(tape: &mut Tape, mu_q: Var, ls_q: Var, mu_p: Var, ls_p: Var) -> Result<Var> {
    let log_ratio = tape.sub(ls_p, ls_q)?;
    let two_ls_q = tape.scale(ls_q, 2.0)?;
    let var_q = tape.exp(two_ls_q)?;
    let dmu = tape.sub(mu_q, mu_p)?;
    let dmu2 = tape.square(dmu)?;
    let num = tape.add(var_q, dmu2)?;
    let neg_two_ls_p = tape.scale(ls_p, -2.0)?;
    let inv_var_p = tape.exp(neg_two_ls_p)?;
    let quad = tape.mul(num, inv_var_p)?;
    let half_quad = tape.scale(quad, 0.5)?;
    let per_dim = tape.add(log_ratio, half_quad)?;
    let per_dim = tape.offset(per_dim, -0.5)?;
    tape.sum(per_dim)
}

/// A time-dependent vector field on distance vectors, evaluated on a tape.
pub trait VectorField {
    /// `(g(d, t), Tr ∂g/∂d)` with `d` an `m × 1` column and the trace `1 × 1`.
    fn eval(&self, tape: &mut Tape, d: Var, t: f64) -> Result<(Var, Var)>;
}

/// `g(d, t) = c · d`; used to check the integrator against `e^c`.
#[derive(Debug, Clone, Copy)]
pub struct LinearField {
    pub rate: f64,
}

impl VectorField for LinearField {
    fn eval(&self, tape: &mut Tape, d: Var, _t: f64) -> Result<(Var, Var)> {
        let g = tape.scale(d, self.rate)?;
        let tr = tape.constant(Tensor::scalar(self.rate * d.rows() as f64));
        Ok((g, tr))
    }
}

/// The learned edge-wise field, with graph and latent context folded in once.
pub struct LearnedField {
    w_d: Var,
    w_t: Var,
    context: Var,
    w2: Var,
    b2: Var,
    w3: Var,
    b3: Var,
    hidden: usize,
}

impl LearnedField {
    pub fn new(
        tape: &mut Tape,
        params: &BoundParams,
        feats: &GraphFeatures,
        config: &ModelConfig,
        z: Var,
    ) -> Result<Self> {
        if z.shape() != (1, config.z_dim) {
            return Err(Error::Shape { op: "flow", detail: format!("latent shape {:?}", z.shape()) });
        }
        let h = mpnn_on_tape(tape, params, Network::Decoder, feats, config.layers, None)?;
        let hu = tape.gather_rows(h, feats.edge_u.clone())?;
        let hv = tape.gather_rows(h, feats.edge_v.clone())?;
        let sum = tape.add(hu, hv)?;
        let prod = tape.mul(hu, hv)?;
        let zb = tape.broadcast(z, feats.n_edges, config.z_dim)?;
        let ctx_in = tape.concat(&[sum, prod, zb], Axis::Cols)?;
        let context = tape.affine(ctx_in, params.var("decoder.flow.w_ctx")?, params.var("decoder.flow.b1")?)?;
        Ok(Self {
            w_d: params.var("decoder.flow.w_d")?,
            w_t: params.var("decoder.flow.w_t")?,
            context,
            w2: params.var("decoder.flow.w2")?,
            b2: params.var("decoder.flow.b2")?,
            w3: params.var("decoder.flow.w3")?,
            b3: params.var("decoder.flow.b3")?,
            hidden: config.hidden,
        })
    }
}

impl VectorField for LearnedField {
    fn eval(&self, tape: &mut Tape, d: Var, t: f64) -> Result<(Var, Var)> {
        let m = d.rows();
        let f = self.hidden;
        let dw = tape.matmul(d, self.w_d)?;
        let tw = tape.scale(self.w_t, t)?;
        let tw = tape.broadcast(tw, m, f)?;
        let a1 = tape.add(dw, tw)?;
        let a1 = tape.add(a1, self.context)?;
        let h1 = tape.tanh(a1)?;
        let a2 = tape.affine(h1, self.w2, self.b2)?;
        let h2 = tape.tanh(a2)?;
        let g = tape.affine(h2, self.w3, self.b3)?;

        // Diagonal Jacobian: forward tangent of each edge output w.r.t. its own d.
        let h1sq = tape.square(h1)?;
        let s1 = tape.scale(h1sq, -1.0)?;
        let s1 = tape.offset(s1, 1.0)?;
        let wd = tape.broadcast(self.w_d, m, f)?;
        let j1 = tape.mul(s1, wd)?;
        let j2 = tape.matmul(j1, self.w2)?;
        let h2sq = tape.square(h2)?;
        let s2 = tape.scale(h2sq, -1.0)?;
        let s2 = tape.offset(s2, 1.0)?;
        let j2 = tape.mul(j2, s2)?;
        let diag = tape.matmul(j2, self.w3)?;
        let trace = tape.sum(diag)?;
        Ok((g, trace))
    }
}

/// RK4 on the augmented state `(d, ℓ)` with `ℓ' = -Tr ∂g/∂d`, from `t0` to `t1`.
/// Returns `(d(t1), ℓ(t1))` with `ℓ(t0) = 0`.
pub fn integrate(
    tape: &mut Tape,
    field: &dyn VectorField,
    d_start: Var,
    t0: f64,
    t1: f64,
    steps: usize,
) -> Result<(Var, Var)> {
    let h = (t1 - t0) / steps as f64;
    let mut d = d_start;
    let mut ell = tape.constant(Tensor::scalar(0.0));
    for k in 0..steps {
        let t = t0 + k as f64 * h;
        let (k1, tr1) = field.eval(tape, d, t)?;
        let step1 = tape.scale(k1, h / 2.0)?;
        let d2 = tape.add(d, step1)?;
        let (k2, tr2) = field.eval(tape, d2, t + h / 2.0)?;
        let step2 = tape.scale(k2, h / 2.0)?;
        let d3 = tape.add(d, step2)?;
        let (k3, tr3) = field.eval(tape, d3, t + h / 2.0)?;
        let step3 = tape.scale(k3, h)?;
        let d4 = tape.add(d, step3)?;
        let (k4, tr4) = field.eval(tape, d4, t + h)?;

        let k23 = tape.add(k2, k3)?;
        let k23 = tape.scale(k23, 2.0)?;
        let k14 = tape.add(k1, k4)?;
        let incr = tape.add(k14, k23)?;
        let incr = tape.scale(incr, h / 6.0)?;
        d = tape.add(d, incr)?;

        let tr23 = tape.add(tr2, tr3)?;
        let tr23 = tape.scale(tr23, 2.0)?;
        let tr14 = tape.add(tr1, tr4)?;
        let tr_sum = tape.add(tr14, tr23)?;
        let tr_incr = tape.scale(tr_sum, -h / 6.0)?;
        ell = tape.add(ell, tr_incr)?;

        let finite = tape.value(d).data().iter().all(|x| x.is_finite()) && tape.value(ell).item().is_finite();
        if !finite {
            return Err(Error::Integration { t: t + h, message: "non-finite flow state".into() });
        }
    }
    Ok((d, ell))
}

/// `log N(x; 0, I)` for an `m × 1` column.
pub fn standard_normal_logpdf_on_tape(tape: &mut Tape, x: Var) -> Result<Var> {
    let sq = tape.square(x)?;
    let s = tape.sum(sq)?;
    let half = tape.scale(s, -0.5)?;
    tape.offset(half, -0.5 * x.rows() as f64 * (2.0 * PI).ln())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSpec {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GaussianSpec {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::Validation("mean and std lengths differ".into()));
        }
        if std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Validation("standard deviations must be positive".into()));
        }
        Ok(Self { mean, std })
    }

    fn from_tape(tape: &Tape, mu: Var, log_sigma: Var) -> Self {
        Self {
            mean: tape.value(mu).data().to_vec(),
            std: tape.value(log_sigma).data().iter().map(|x| x.exp()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub z: Vec<f64>,
    pub epsilon: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowForward {
    pub d1: Vec<f64>,
    /// `-∫ Tr ∂g/∂d dt`, so `log p(d1) = log p(d0) + logdet`.
    pub logdet: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowInverse {
    pub d0: Vec<f64>,
    /// Change in the augmented state along the reverse integration; cancels the forward logdet.
    pub logdet: f64,
    /// `log N(d0; 0, I) - ∫ Tr ∂g/∂d dt`.
    pub log_likelihood: f64,
}

pub fn mpnn_embed(
    g: &MolecularGraph,
    edge_scalars: Option<&DistanceVector>,
    params: &ModelParameters,
    network: Network,
) -> Result<Tensor> {
    let feats = GraphFeatures::new(g)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let h = mpnn_on_tape(
        &mut tape,
        &bound,
        network,
        &feats,
        params.config.layers,
        edge_scalars.map(DistanceVector::values),
    )?;
    Ok(tape.value(h).clone())
}

pub fn encode(g: &MolecularGraph, r: &Conformation, params: &ModelParameters) -> Result<GaussianSpec> {
    let d = distances_from_conformation(g, r)?;
    let feats = GraphFeatures::new(g)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let (mu, ls) =
        gaussian_head_on_tape(&mut tape, &bound, Network::Encoder, &feats, &params.config, Some(d.values()))?;
    Ok(GaussianSpec::from_tape(&tape, mu, ls))
}

pub fn prior_params(g: &MolecularGraph, params: &ModelParameters) -> Result<GaussianSpec> {
    let feats = GraphFeatures::new(g)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let (mu, ls) = gaussian_head_on_tape(&mut tape, &bound, Network::Prior, &feats, &params.config, None)?;
    Ok(GaussianSpec::from_tape(&tape, mu, ls))
}

pub fn reparameterize(spec: &GaussianSpec, epsilon: &[f64]) -> Result<LatentSample> {
    if epsilon.len() != spec.mean.len() {
        return Err(Error::Validation(format!(
            "epsilon has {} entries for a {}-dim latent",
            epsilon.len(),
            spec.mean.len()
        )));
    }
    let z = spec.mean.iter().zip(&spec.std).zip(epsilon).map(|((m, s), e)| m + s * e).collect();
    Ok(LatentSample { z, epsilon: epsilon.to_vec() })
}

pub fn kl_divergence(q: &GaussianSpec, p: &GaussianSpec) -> Result<f64> {
    if q.mean.len() != p.mean.len() {
        return Err(Error::Validation("latent dimensions differ".into()));
    }
    if q.std.iter().chain(&p.std).any(|&s| !(s > 0.0)) {
        return Err(Error::Validation("standard deviations must be positive".into()));
    }
    let mut kl = 0.0;
    for i in 0..q.mean.len() {
        let (mq, sq, mp, sp) = (q.mean[i], q.std[i], p.mean[i], p.std[i]);
        kl += (sp / sq).ln() + (sq * sq + (mq - mp).powi(2)) / (2.0 * sp * sp) - 0.5;
    }
    Ok(kl)
}

fn flow_setup(
    g: &MolecularGraph,
    z: &[f64],
    params: &ModelParameters,
    d_len: usize,
) -> Result<(Tape, LearnedField)> {
    let feats = GraphFeatures::new(g)?;
    if d_len != feats.n_edges() {
        return Err(Error::Validation(format!("{d_len} distances for {} edges", feats.n_edges())));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let zv = tape.constant(Tensor::row(z.to_vec()));
    let field = LearnedField::new(&mut tape, &bound, &feats, &params.config, zv)?;
    Ok((tape, field))
}

pub fn cnf_forward(d0: &[f64], z: &[f64], g: &MolecularGraph, params: &ModelParameters) -> Result<FlowForward> {
    let (mut tape, field) = flow_setup(g, z, params, d0.len())?;
    let start = tape.constant(Tensor::column(d0.to_vec()));
    let (d1, ell) = integrate(&mut tape, &field, start, 0.0, 1.0, params.config.flow_steps)?;
    Ok(FlowForward { d1: tape.value(d1).data().to_vec(), logdet: tape.value(ell).item() })
}

pub fn cnf_inverse(d1: &[f64], z: &[f64], g: &MolecularGraph, params: &ModelParameters) -> Result<FlowInverse> {
    let (mut tape, field) = flow_setup(g, z, params, d1.len())?;
    let start = tape.constant(Tensor::column(d1.to_vec()));
    let (d0, ell) = integrate(&mut tape, &field, start, 1.0, 0.0, params.config.flow_steps)?;
    let base = standard_normal_logpdf_on_tape(&mut tape, d0)?;
    let logdet = tape.value(ell).item();
    Ok(FlowInverse {
        d0: tape.value(d0).data().to_vec(),
        logdet,
        log_likelihood: tape.value(base).item() - logdet,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub prior: f64,
    pub aux: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub total: f64,
}

/// `total = recon + λ·prior + α·aux`.
pub fn assemble_loss(recon: f64, prior: f64, aux: f64, lambda: f64, alpha: f64) -> LossBreakdown {
    LossBreakdown { recon, prior, aux, lambda, alpha, total: recon + lambda * prior + alpha * aux }
}
