//! Differentiable molecular conformer generation.
//!
//! A conditional VAE whose decoder predicts inter-atomic distances with a
//! continuous normalizing flow, then recovers coordinates by gradient descent
//! on a distance-geometry stress. Training differentiates through the unrolled
//! solver so the reconstruction loss is measured in 3D after Kabsch alignment.
//!
//! Modules, bottom-up:
//! - [`molgraph`]: graphs, conformations, dataset IO, auxiliary edges
//! - [`difftape`]: reverse-mode tape used by the model and the unrolled solver
//! - [`geometry`]: Kabsch alignment and RMSD
//! - [`distgeo`]: inner objective, gradient-descent solver, hypergradient
//! - [`model`]: MPNN encoder/prior, flow decoder, KL, loss assembly
//! - [`training`]: Adam, training step, sampling
//! - [`eval`]: COV, MAT and MMD metrics
//! - [`config`]: flat `key=value` run configuration

pub mod config;
pub mod difftape;
pub mod distgeo;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod molgraph;
pub mod rng;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};

/// Run `f` on a dedicated pool of `workers` threads, or inline when `workers <= 1`.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers <= 1 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(f))
}
