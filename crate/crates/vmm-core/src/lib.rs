//! Variational method of moments (VMM) estimators for conditional moment
//! problems of the form `E[rho(X; theta) | Z] = 0`.
//!
//! The crate provides:
//!
//! - [`owgmm`]: classic optimally weighted GMM over a finite instrument basis,
//!   together with its minimax reformulation on the same span.
//! - [`kernel_vmm`]: the kernel VMM estimator with its closed-form objective,
//!   k-step refinement of the weighting prior, and the closed-form kernel IV
//!   regression estimator.
//! - [`neural_vmm`]: a toy-scale neural adversary variant trained by
//!   alternating gradient ascent/descent.
//! - [`inference`]: plug-in asymptotic covariance estimation (efficient and
//!   sandwich forms) and Wald confidence intervals.
//! - [`simulation`]: data-generating processes and a deterministic Monte
//!   Carlo harness used to check consistency, normality, and efficiency
//!   empirically.
//! - [`verify`]: randomized self-check suites driven by the `vmm verify`
//!   subcommand.
//!
//! Everything is deterministic given a seed: random numbers come from an
//! explicit counter-based generator ([`rng`]) and all dense factorizations
//! run single-threaded, so parallel Monte Carlo runs are bit-identical to
//! serial ones.

pub mod cli;
pub mod inference;
pub mod kernel_vmm;
pub mod kernels;
pub mod linalg;
pub mod moments;
pub mod neural_vmm;
pub mod numerics;
pub mod optim;
pub mod owgmm;
pub mod rng;
pub mod simulation;
pub mod verify;

pub use kernel_vmm::{GramAssembly, VmmConfig, VmmSolution};
pub use moments::{Dataset, MomentProblem};

/// Crate version, embedded in every CLI report.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
