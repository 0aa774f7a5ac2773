//! Metropolis-within-Gibbs samplers for the continuous, binary (probit) and
//! latent-factor-regression models.

mod chain;
pub mod conditionals;
pub mod mh;
pub mod truncnorm;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::{DataKind, FFAState, PriorConfig, SparseFunctionalDataset};

pub use chain::{prior_draw, Chain, Checkpoint};
pub use conditionals::*;
pub use mh::{mh_step, Adaptation, Adapter, ProposalScale};
pub use truncnorm::{sample_truncated_normal, truncated_normal_moments, Side};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ffa,
    Binary,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub target_accept: f64,
    pub adapt_rate_decay: f64,
    pub seed: u64,
    /// Starting random-walk scale for every kernel hyperparameter.
    pub initial_scale: f64,
    pub proposal: ProposalScale,
    /// Keep the per-observation log-likelihood of each saved draw (for WAIC).
    pub record_pointwise: bool,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            n_iter: 2000,
            burn_in: 500,
            thin: 1,
            target_accept: 0.44,
            adapt_rate_decay: 0.7,
            seed: 1,
            initial_scale: 0.5,
            proposal: ProposalScale::Log,
            record_pointwise: true,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iter == 0 || self.thin == 0 || self.burn_in >= self.n_iter {
            return Err(Error::Config("need n_iter >= 1, thin >= 1 and burn_in < n_iter".into()));
        }
        if (self.n_iter - self.burn_in) / self.thin < 1 {
            return Err(Error::Config("no draws would be saved; lower thin or burn_in".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config("target_accept must lie in (0, 1)".into()));
        }
        if !(self.adapt_rate_decay > 0.5 && self.adapt_rate_decay <= 1.0) {
            return Err(Error::Config("adapt_rate_decay must lie in (0.5, 1]".into()));
        }
        if !(self.initial_scale >= 0.0) || !self.initial_scale.is_finite() {
            return Err(Error::Config("initial_scale must be finite and nonnegative".into()));
        }
        Ok(())
    }

    pub fn n_saved(&self) -> usize {
        (self.n_iter - self.burn_in) / self.thin
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceRecord {
    pub parameter: String,
    pub accepted: u64,
    pub attempts: u64,
}

/// Saved states after burn-in and thinning, with the diagnostics the
/// post-processing needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub model: ModelKind,
    pub grid: Grid,
    pub config: ChainConfig,
    /// Saved states; covariates are stored once in `covariates`.
    pub states: Vec<FFAState>,
    pub acceptance: Vec<AcceptanceRecord>,
    /// Log-likelihood after every iteration, burn-in included.
    pub loglik_trace: Vec<f64>,
    /// Log-likelihood of each saved state.
    pub saved_loglik: Vec<f64>,
    /// Saved draws × observations (subject order), empty unless recorded.
    pub pointwise: Vec<Vec<f64>>,
    pub covariates: Option<DMatrix<f64>>,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn k(&self) -> usize {
        self.states.first().map_or(0, |s| s.k())
    }

    pub fn acceptance_rate(&self, parameter: &str) -> Option<f64> {
        self.acceptance
            .iter()
            .find(|a| a.parameter == parameter)
            .map(|a| if a.attempts == 0 { 0.0 } else { a.accepted as f64 / a.attempts as f64 })
    }
}

pub fn run_ffa_chain(
    data: &SparseFunctionalDataset,
    prior: &PriorConfig,
    config: &ChainConfig,
    k: usize,
) -> Result<PosteriorDraws> {
    data.require_kind(DataKind::Continuous)?;
    Chain::new(ModelKind::Ffa, data.clone(), None, *prior, config.clone(), k)?.run()
}

/// Probit model: latent utilities refreshed first each sweep, then the
/// continuous sweep on the utilities with `σ² = 1`.
pub fn run_gffa_chain(
    data: &SparseFunctionalDataset,
    prior: &PriorConfig,
    config: &ChainConfig,
    k: usize,
) -> Result<PosteriorDraws> {
    data.require_kind(DataKind::Binary)?;
    Chain::new(ModelKind::Binary, data.clone(), None, *prior, config.clone(), k)?.run()
}

/// Latent-factor regression `ηᵢ = Θxᵢ + ξᵢ`; `covariates` is `n × q`.
pub fn run_regression_chain(
    data: &SparseFunctionalDataset,
    covariates: &DMatrix<f64>,
    prior: &PriorConfig,
    config: &ChainConfig,
    k: usize,
) -> Result<PosteriorDraws> {
    data.require_kind(DataKind::Continuous)?;
    Chain::new(
        ModelKind::Regression,
        data.clone(),
        Some(covariates.clone()),
        *prior,
        config.clone(),
        k,
    )?
    .run()
}
