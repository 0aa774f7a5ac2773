//! Bayesian functional factor analysis with nearly mutually orthogonal
//! (NeMO) Gaussian-process priors on the factor loadings.
//!
//! The crate is organised bottom-up:
//!
//! * [`grid`]: common evaluation grid, trapezoid weights and subject index maps.
//! * [`kernels`]: squared-exponential covariances, Gaussian log-densities and
//!   hyperprior densities.
//! * [`nemo`]: conditional covariance of one loading given the others, prior
//!   sampling and the orthogonality penalty.
//! * [`model`]: sparse functional datasets, model state, simulators and
//!   likelihoods.
//! * [`sampler`]: Metropolis-within-Gibbs chains for continuous, binary and
//!   latent-factor-regression models.
//! * [`analysis`]: alignment, simultaneous bands, factor selection, ESS, WAIC,
//!   MISE and posterior predictive statistics.

pub mod analysis;
pub mod error;
pub mod grid;
pub mod kernels;
pub mod linalg;
pub mod model;
pub mod nemo;
pub mod rng;
pub mod sampler;

pub use error::{Error, Result};
pub use grid::{Grid, SubjectIndexMap};
pub use kernels::{HyperpriorConfig, SEKernelParams};
pub use model::{DataKind, FFAState, PriorConfig, SparseFunctionalDataset};
pub use sampler::{ChainConfig, PosteriorDraws};
