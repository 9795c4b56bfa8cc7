//! Lazy-map variational inference for PDE-constrained Bayesian inverse
//! problems on desk-scale grids.
//!
//! The pipeline has an offline and an online phase. Offline: sample the
//! Gaussian prior ([`prior`]), push samples through the reaction–diffusion
//! parameter-to-observable map with adjoint Jacobians ([`forward`]), build a
//! derivative-informed subspace ([`subspace`]), and train a reduced-basis
//! surrogate of the whitened observable map ([`surrogate`]). Online: train a
//! lazy transport map against the surrogate's reverse-KL objective
//! ([`transport`]) for a given observation, in seconds. Laplace and pCN
//! references live in [`baselines`]; posterior accuracy measures in
//! [`diagnostics`]; config, archives, and the command pipeline in [`config`],
//! [`archive`], and [`pipeline`].
//!
//! Runnable walkthroughs, one per capability, live in `examples/`:
//!
//! ```text
//! cargo run --release --example prior_sampling
//! cargo run --release --example forward_solve
//! cargo run --release --example subspace_basis
//! cargo run --release --example surrogate_training
//! cargo run --release --example transport_inference
//! cargo run --release --example laplace_baseline
//! cargo run --release --example mcmc_baseline
//! cargo run --release --example diagnostics_report
//! cargo run --release --example full_pipeline
//! ```

pub mod archive;
pub mod baselines;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod forward;
pub mod pipeline;
pub mod prior;
pub mod seed;
pub mod subspace;
pub mod surrogate;
pub mod transport;

pub use error::{Error, Result};
