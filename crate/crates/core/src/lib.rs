//! Numerical laboratory for time-dependent (sequential and random) compositions of
//! full-branch expanding interval maps.
//!
//! The crate provides, in dependency order:
//!
//! - [`maps`]: piecewise expanding maps of `[0,1]`, sequential schedules,
//!   cylinder partitions and uniform-expansion certificates;
//! - [`transfer`]: grid-based transfer operators, log-Hölder seminorms,
//!   coupling constants, memory-loss decay curves and correlation functions;
//! - [`clt`]: vector observables, centered Birkhoff sums, Monte-Carlo
//!   covariance matrices and eigenvalue-growth checks;
//! - [`convex`]: convex sets (half-spaces, balls, axis boxes), exact Gaussian
//!   measures, empirical measures, and the convex-set discrepancy estimator;
//! - [`stein`]: the Stein-equation apparatus — smoothed indicators, the
//!   solution `f_h(w) = ∫ g(w,τ) dτ`, its derivatives, and the seven-term
//!   decomposition identity over punctured sums;
//! - [`random`]: random map selection processes, quenched experiments and
//!   convergence-rate fits.
//!
//! All Monte-Carlo paths are deterministic: sample streams are derived from
//! `(seed, stream tag, chunk index)` and reductions run over a fixed chunk
//! tree, so results are bit-identical regardless of worker count. The
//! `parallel` feature (default) enables rayon data-parallelism; without it
//! every pipeline runs sequentially through the same code paths.

pub mod clt;
pub mod convex;
pub mod error;
pub mod exec;
pub mod maps;
pub mod numerics;
pub mod random;
pub mod rng;
pub mod stein;
pub mod transfer;

pub use error::{Error, Result};
