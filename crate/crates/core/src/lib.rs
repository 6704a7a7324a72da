//! Particle-based numerical laboratory for pathwise calculus on the space of
//! probability measures over continuous paths.
//!
//! The crate is organised around a single concrete representation: an empirical
//! measure of `n` discrete paths sampled on a shared uniform time grid
//! ([`PathMeasure`]). On top of that representation it provides
//!
//! * transport distances between path measures and between time/measure pairs
//!   ([`transport`]), with an exact assignment solver for small clouds and an
//!   entropically regularised fallback for large ones ([`assignment`]);
//! * Euler–Maruyama simulation of (controlled, possibly mean-field) SDE clouds
//!   with deterministic counter-based randomness ([`sim`], [`rng`]);
//! * numerical measure derivatives (linear functional derivative scaled to the
//!   particle picture, and its pathwise second derivative) together with a
//!   discrete functional Itô decomposition ([`calculus`]);
//! * parabolic generators on measure space, paraboloid test functions,
//!   semi-jet membership sampling and classical/viscosity residual checks
//!   ([`master`]);
//! * piecewise-constant closed-loop policies, value estimation, exhaustive
//!   policy search and dynamic-programming residuals ([`policy`], [`value`]);
//! * a registry of closed-form reference instances with exact derivative
//!   bundles used to calibrate every numerical estimator in the crate
//!   ([`reference`]), and higher-level experiments built from them
//!   ([`experiments`]).
//!
//! All randomness flows through explicit stream keys ([`rng::StreamKey`]), so
//! every experiment is bit-reproducible for a fixed seed, independent of
//! thread count.

pub mod assignment;
pub mod calculus;
pub mod coupling;
pub mod dynamics;
pub mod experiments;
pub mod functional;
pub mod grid;
pub mod io;
pub mod master;
pub mod measure;
pub mod policy;
pub mod quantile;
pub mod reference;
pub mod rng;
pub mod sim;
pub mod stats;
pub mod transport;
pub mod value;

use thiserror::Error;

/// Crate-wide error type. Computational routines fail loudly instead of
/// silently degrading accuracy.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside the documented domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// Two objects that must live on the same grid / have the same shape do not.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// An invalid run configuration (bad sizes, empty catalogs, ...).
    #[error("configuration error: {0}")]
    Config(String),
    /// A simulation produced a non-finite state.
    #[error("simulation diverged at step {step}: {msg}")]
    Diverged { step: usize, msg: String },
    /// An iterative numerical routine failed to converge or lost precision.
    #[error("numerical failure: {0}")]
    Numerics(String),
    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    /// A snapshot file is malformed or has an unsupported version.
    #[error("file format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub use grid::{PathView, SamplePath, TimeGrid};
pub use measure::PathMeasure;
pub use rng::{Purpose, Rng, StreamKey};

/// Cap the global worker pool used by the parallel loops in this crate.
/// Streams are keyed per particle, so results do not depend on the pool size;
/// this only controls resource usage. The pool can be configured once per
/// process — a second call with a different size fails.
pub fn configure_threads(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("thread count must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool already configured: {e}")))
}
