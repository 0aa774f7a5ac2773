use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::kernels::{log_len_prior, log_tau_prior, GpCovariance, HyperpriorConfig, SEKernelParams};
use crate::model::{
    log_likelihood, pointwise_log_likelihood, sample_eta_column, DataKind, FFAState, PriorConfig,
    SparseFunctionalDataset,
};
use crate::nemo::{conditional_log_density, others, sample_nemo_joint};
use crate::rng::{seeded, ChainRng};

use super::conditionals::*;
use super::mh::{mh_step, Adaptation, Adapter};
use super::{AcceptanceRecord, ChainConfig, ModelKind, PosteriorDraws};

const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to continue a chain bit-exactly, except the data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelKind,
    pub prior: PriorConfig,
    pub config: ChainConfig,
    pub iteration: usize,
    pub state: FFAState,
    pub latent: Option<Vec<Vec<f64>>>,
    pub rng: ChainRng,
    pub mu_adapters: [Adapter; 2],
    pub loading_adapters: Vec<[Adapter; 2]>,
    pub draws: PosteriorDraws,
}

/// A chain advanced one sweep at a time.
pub struct Chain {
    model: ModelKind,
    prior: PriorConfig,
    config: ChainConfig,
    observed: SparseFunctionalDataset,
    /// Observed values, or the latent utilities for the probit model.
    working: SparseFunctionalDataset,
    state: FFAState,
    rng: ChainRng,
    iteration: usize,
    mu_adapters: [Adapter; 2],
    loading_adapters: Vec<[Adapter; 2]>,
    mu_cov: GpCovariance,
    loading_covs: Vec<GpCovariance>,
    draws: PosteriorDraws,
}

fn inverse_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    let g = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::Config(e.to_string()))?;
    let v: f64 = g.sample(rng);
    Ok(1.0 / v)
}

/// One draw of every parameter from the prior. `covariates` switches on the
/// regression layer.
pub fn prior_draw<R: Rng + ?Sized>(
    grid: &Grid,
    n: usize,
    k: usize,
    covariates: Option<&DMatrix<f64>>,
    prior: &PriorConfig,
    rng: &mut R,
) -> Result<FFAState> {
    let mu_kernel = prior.mu_hyper.sample(rng);
    let mu = crate::kernels::sample_gp(grid, &mu_kernel, &prior.jitter, rng)?;
    let loading_kernels: Vec<SEKernelParams> = (0..k).map(|_| prior.loading_hyper.sample(rng)).collect();
    let lambda = if k == 0 {
        DMatrix::zeros(0, grid.len())
    } else {
        sample_nemo_joint(&loading_kernels, grid, prior.nu_lambda, 5, &prior.jitter, rng)?.lambda
    };
    let psi = (0..k)
        .map(|_| inverse_gamma(prior.alpha_eta, prior.beta_eta, rng))
        .collect::<Result<Vec<_>>>()?;
    let theta = covariates.map(|x| {
        DMatrix::from_fn(k, x.ncols(), |r, _| psi[r].sqrt() * rng.sample::<f64, _>(StandardNormal))
    });
    let mut eta = DMatrix::zeros(n, k);
    for kk in 0..k {
        let col = sample_eta_column(n, prior.nu_eta, psi[kk], rng);
        eta.column_mut(kk).copy_from_slice(&col);
    }
    if let (Some(x), Some(th)) = (covariates, &theta) {
        eta += x * th.transpose();
    }
    let sigma_sq = inverse_gamma(prior.alpha_sigma, prior.beta_sigma, rng)?;
    Ok(FFAState {
        mu,
        lambda,
        eta,
        psi,
        sigma_sq,
        mu_kernel,
        loading_kernels,
        theta,
        covariates: covariates.cloned(),
    })
}

fn wrap(iteration: usize, parameter: impl Into<String>) -> impl FnOnce(Error) -> Error {
    let parameter = parameter.into();
    move |e| Error::Chain { iteration, parameter, source: Box::new(e) }
}

fn value_variance(data: &SparseFunctionalDataset) -> f64 {
    let vals: Vec<f64> = data.subjects.iter().flat_map(|s| s.values.iter().copied()).collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0)
}

impl Chain {
    pub fn new(
        model: ModelKind,
        data: SparseFunctionalDataset,
        covariates: Option<DMatrix<f64>>,
        prior: PriorConfig,
        config: ChainConfig,
        k: usize,
    ) -> Result<Self> {
        prior.validate()?;
        config.validate()?;
        data.validate()?;
        match model {
            ModelKind::Binary => data.require_kind(DataKind::Binary)?,
            _ => data.require_kind(DataKind::Continuous)?,
        }
        if model == ModelKind::Regression {
            match &covariates {
                Some(x) if x.nrows() == data.n() && x.ncols() >= 1 => {}
                _ => return Err(Error::Dimension("covariates must be n × q with q >= 1".into())),
            }
        }
        let covariates = if model == ModelKind::Regression { covariates } else { None };
        let mut rng = seeded(config.seed);
        let mut state = prior_draw(&data.grid, data.n(), k, covariates.as_ref(), &prior, &mut rng)?;
        if model == ModelKind::Binary {
            state.sigma_sq = 1.0;
        } else {
            let v = value_variance(&data);
            if v > 0.0 && state.sigma_sq > 100.0 * v {
                state.sigma_sq = v;
            }
        }
        Self::from_state(model, data, prior, config, state, rng)
    }

    /// Start from a given state; the randomness stream continues from `rng`.
    pub fn from_state(
        model: ModelKind,
        data: SparseFunctionalDataset,
        prior: PriorConfig,
        config: ChainConfig,
        state: FFAState,
        mut rng: ChainRng,
    ) -> Result<Self> {
        state.check_against(&data)?;
        let working = if model == ModelKind::Binary {
            let z = gibbs_update_latent_z(&state, &data, &mut rng)?;
            data.with_values(z, DataKind::Continuous)?
        } else {
            data.clone()
        };
        let k = state.k();
        let mu_cov = GpCovariance::new(&data.grid, state.mu_kernel, &prior.jitter)?;
        let loading_covs = state
            .loading_kernels
            .iter()
            .map(|p| GpCovariance::new(&data.grid, *p, &prior.jitter))
            .collect::<Result<Vec<_>>>()?;
        let s = config.initial_scale;
        let draws = PosteriorDraws {
            model,
            grid: data.grid.clone(),
            config: config.clone(),
            states: Vec::with_capacity(config.n_saved()),
            acceptance: Vec::new(),
            loglik_trace: Vec::with_capacity(config.n_iter),
            saved_loglik: Vec::new(),
            pointwise: Vec::new(),
            covariates: state.covariates.clone(),
        };
        Ok(Chain {
            model,
            prior,
            config,
            observed: data,
            working,
            state,
            rng,
            iteration: 0,
            mu_adapters: [Adapter::new(s), Adapter::new(s)],
            loading_adapters: vec![[Adapter::new(s), Adapter::new(s)]; k],
            mu_cov,
            loading_covs,
            draws,
        })
    }

    pub fn state(&self) -> &FFAState {
        &self.state
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.n_iter
    }

    /// Replace the observed values (same index maps), e.g. when alternating
    /// data regeneration and parameter updates.
    pub fn set_observed_values(&mut self, values: Vec<Vec<f64>>) -> Result<()> {
        self.observed = self.observed.with_values(values, self.observed.kind)?;
        if self.model != ModelKind::Binary {
            self.working = self.observed.clone();
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut draws = self.draws.clone();
        draws.acceptance = self.acceptance();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            model: self.model,
            prior: self.prior,
            config: self.config.clone(),
            iteration: self.iteration,
            state: self.state.clone(),
            latent: (self.model == ModelKind::Binary)
                .then(|| self.working.subjects.iter().map(|s| s.values.clone()).collect()),
            rng: self.rng.clone(),
            mu_adapters: self.mu_adapters.clone(),
            loading_adapters: self.loading_adapters.clone(),
            draws,
        }
    }

    pub fn resume(cp: Checkpoint, data: SparseFunctionalDataset) -> Result<Self> {
        if cp.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint version {}", cp.version)));
        }
        cp.state.check_against(&data)?;
        let working = match &cp.latent {
            Some(z) => data.with_values(z.clone(), DataKind::Continuous)?,
            None => data.clone(),
        };
        let mu_cov = GpCovariance::new(&data.grid, cp.state.mu_kernel, &cp.prior.jitter)?;
        let loading_covs = cp
            .state
            .loading_kernels
            .iter()
            .map(|p| GpCovariance::new(&data.grid, *p, &cp.prior.jitter))
            .collect::<Result<Vec<_>>>()?;
        Ok(Chain {
            model: cp.model,
            prior: cp.prior,
            config: cp.config,
            observed: data,
            working,
            state: cp.state,
            rng: cp.rng,
            iteration: cp.iteration,
            mu_adapters: cp.mu_adapters,
            loading_adapters: cp.loading_adapters,
            mu_cov,
            loading_covs,
            draws: cp.draws,
        })
    }

    pub fn run(mut self) -> Result<PosteriorDraws> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(self.finish())
    }

    pub fn finish(mut self) -> PosteriorDraws {
        self.draws.acceptance = self.acceptance();
        self.draws
    }

    fn acceptance(&self) -> Vec<AcceptanceRecord> {
        let rec = |name: String, a: &Adapter| AcceptanceRecord {
            parameter: name,
            accepted: a.accepted,
            attempts: a.attempts,
        };
        let mut out = vec![
            rec("mu_len_sq".into(), &self.mu_adapters[0]),
            rec("mu_tau_sq".into(), &self.mu_adapters[1]),
        ];
        for (k, a) in self.loading_adapters.iter().enumerate() {
            out.push(rec(format!("lambda{}_len_sq", k + 1), &a[0]));
            out.push(rec(format!("lambda{}_tau_sq", k + 1), &a[1]));
        }
        out
    }

    fn adaptation(&self) -> Option<Adaptation> {
        (self.iteration <= self.config.burn_in).then_some(Adaptation {
            iteration: self.iteration,
            target: self.config.target_accept,
            decay: self.config.adapt_rate_decay,
        })
    }

    /// One full sweep, then bookkeeping and (after burn-in) saving.
    pub fn step(&mut self) -> Result<()> {
        self.iteration += 1;
        let it = self.iteration;
        if self.model == ModelKind::Binary {
            let z = gibbs_update_latent_z(&self.state, &self.observed, &mut self.rng)
                .map_err(wrap(it, "latent_z"))?;
            self.working = self.working.with_values(z, DataKind::Continuous).map_err(wrap(it, "latent_z"))?;
        }

        self.state.mu = gibbs_update_mu(&self.state, &self.working, &self.mu_cov, &mut self.rng)
            .map_err(wrap(it, "mu"))?;
        self.update_mu_hypers();

        for k in 0..self.state.k() {
            let row = gibbs_update_lambda_k(
                &self.state,
                &self.working,
                k,
                self.prior.nu_lambda,
                &self.loading_covs[k],
                &mut self.rng,
            )
            .map_err(wrap(it, format!("lambda{}", k + 1)))?;
            self.state.lambda.row_mut(k).copy_from_slice(&row);
            self.update_loading_hypers(k);
            let col = gibbs_update_eta_k(&self.state, &self.working, k, self.prior.nu_eta, &mut self.rng);
            self.state.eta.column_mut(k).copy_from_slice(&col);
            self.state.psi[k] = gibbs_update_psi_k(&self.state, k, &self.prior, &mut self.rng)
                .map_err(wrap(it, format!("psi{}", k + 1)))?;
        }

        if self.model == ModelKind::Regression && self.state.k() > 0 {
            self.state.theta = Some(
                gibbs_update_theta(&self.state, self.prior.nu_eta, &mut self.rng).map_err(wrap(it, "theta"))?,
            );
            for k in 0..self.state.k() {
                mean_shift_update(&mut self.state, k, self.prior.nu_eta, &self.mu_cov, &mut self.rng);
            }
        }
        if self.model != ModelKind::Binary {
            self.state.sigma_sq = gibbs_update_sigma2(&self.state, &self.working, &self.prior, &mut self.rng)
                .map_err(wrap(it, "sigma_sq"))?;
        }

        let ll = self.log_likelihood();
        if !ll.is_finite() {
            return Err(wrap(it, "log_likelihood")(Error::Numerical(format!("log-likelihood {ll}"))));
        }
        self.draws.loglik_trace.push(ll);
        if it > self.config.burn_in && (it - self.config.burn_in) % self.config.thin == 0 {
            let mut saved = self.state.clone();
            saved.covariates = None;
            self.draws.states.push(saved);
            self.draws.saved_loglik.push(ll);
            if self.config.record_pointwise {
                self.draws.pointwise.push(pointwise_log_likelihood(&self.state, &self.observed));
            }
        }
        Ok(())
    }

    fn log_likelihood(&self) -> f64 {
        match self.model {
            ModelKind::Binary => pointwise_log_likelihood(&self.state, &self.observed).iter().sum(),
            _ => log_likelihood(&self.state, &self.observed).unwrap_or(f64::NAN),
        }
    }

    fn update_mu_hypers(&mut self) {
        let adapt = self.adaptation();
        let grid = &self.observed.grid;
        let jitter = self.prior.jitter;
        let f = DVector::from_column_slice(&self.state.mu);
        let density = |p: SEKernelParams| match GpCovariance::new(grid, p, &jitter) {
            Ok(c) => c.log_density(&f),
            Err(_) => f64::NEG_INFINITY,
        };
        let params = hyper_sweep(
            self.state.mu_kernel,
            &self.prior.mu_hyper,
            density,
            &mut self.mu_adapters,
            self.config.proposal,
            adapt,
            &mut self.rng,
        );
        if params != self.state.mu_kernel {
            if let Ok(c) = GpCovariance::new(grid, params, &jitter) {
                self.state.mu_kernel = params;
                self.mu_cov = c;
            }
        }
    }

    fn update_loading_hypers(&mut self, k: usize) {
        let adapt = self.adaptation();
        let grid = &self.observed.grid;
        let jitter = self.prior.jitter;
        let nu = self.prior.nu_lambda;
        let f = self.state.lambda.row(k).transpose();
        let rest = others(&self.state.lambda, k);
        let density = |p: SEKernelParams| {
            GpCovariance::new(grid, p, &jitter)
                .and_then(|c| conditional_log_density(&f, &c, &rest, grid, nu))
                .unwrap_or(f64::NEG_INFINITY)
        };
        let params = hyper_sweep(
            self.state.loading_kernels[k],
            &self.prior.loading_hyper,
            density,
            &mut self.loading_adapters[k],
            self.config.proposal,
            adapt,
            &mut self.rng,
        );
        if params != self.state.loading_kernels[k] {
            if let Ok(c) = GpCovariance::new(grid, params, &jitter) {
                self.state.loading_kernels[k] = params;
                self.loading_covs[k] = c;
            }
        }
    }
}

/// Metropolis updates of `l²` then `τ²` against `density(params) + log prior`.
fn hyper_sweep<R: Rng + ?Sized>(
    current: SEKernelParams,
    cfg: &HyperpriorConfig,
    density: impl Fn(SEKernelParams) -> f64,
    adapters: &mut [Adapter; 2],
    proposal: super::ProposalScale,
    adapt: Option<Adaptation>,
    rng: &mut R,
) -> SEKernelParams {
    let mut p = current;
    let tau = p.tau_sq;
    let (len_sq, _) = mh_step(
        p.len_sq,
        |l| density(SEKernelParams { tau_sq: tau, len_sq: l }) + log_len_prior(l, cfg),
        &mut adapters[0],
        proposal,
        adapt,
        rng,
    );
    p.len_sq = len_sq;
    let (tau_sq, _) = mh_step(
        p.tau_sq,
        |t| density(SEKernelParams { tau_sq: t, len_sq }) + log_tau_prior(t, cfg),
        &mut adapters[1],
        proposal,
        adapt,
        rng,
    );
    p.tau_sq = tau_sq;
    p
}
