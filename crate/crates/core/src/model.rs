//! Sparse functional datasets, the model state, prior constants, data
//! generators and likelihoods.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{merge_grids, Grid, SubjectIndexMap};
use crate::kernels::{sample_gp, HyperpriorConfig, JitterPolicy, SEKernelParams};
use crate::nemo::sample_nemo_joint;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Continuous,
    Binary,
}

/// Observations of one subject on a subset of the common grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    pub map: SubjectIndexMap,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseFunctionalDataset {
    pub grid: Grid,
    pub subjects: Vec<Subject>,
    pub kind: DataKind,
}

impl SparseFunctionalDataset {
    pub fn new(grid: Grid, subjects: Vec<Subject>, kind: DataKind) -> Result<Self> {
        let d = SparseFunctionalDataset { grid, subjects, kind };
        d.validate()?;
        Ok(d)
    }

    /// Build from per-subject time stamps and values, merging the grids.
    pub fn from_observations(
        ids: Vec<String>,
        times: Vec<Vec<f64>>,
        values: Vec<Vec<f64>>,
        kind: DataKind,
    ) -> Result<Self> {
        if ids.len() != times.len() || times.len() != values.len() {
            return Err(Error::Dimension("ids, times and values differ in length".into()));
        }
        let (grid, maps) = merge_grids(&times)?;
        let subjects = ids
            .into_iter()
            .zip(maps)
            .zip(values)
            .map(|((id, map), values)| Subject { id, map, values })
            .collect();
        Self::new(grid, subjects, kind)
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let m = self.grid.len();
        for s in &self.subjects {
            if s.map.len() != s.values.len() {
                return Err(Error::Dimension(format!(
                    "subject {}: {} indices but {} values",
                    s.id,
                    s.map.len(),
                    s.values.len()
                )));
            }
            if s.map.indices().iter().any(|&i| i >= m) {
                return Err(Error::Dimension(format!("subject {}: index outside grid", s.id)));
            }
            if s.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("subject {}: non-finite value", s.id)));
            }
            if self.kind == DataKind::Binary && s.values.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Domain(format!("subject {}: binary value not in {{0, 1}}", s.id)));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn m(&self) -> usize {
        self.grid.len()
    }

    pub fn total_obs(&self) -> usize {
        self.subjects.iter().map(|s| s.values.len()).sum()
    }

    /// Number of subjects observed at each grid point.
    pub fn counts(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.m()];
        for s in &self.subjects {
            for &i in s.map.indices() {
                c[i] += 1.0;
            }
        }
        c
    }

    pub fn with_values(&self, values: Vec<Vec<f64>>, kind: DataKind) -> Result<Self> {
        let subjects = self
            .subjects
            .iter()
            .zip(values)
            .map(|(s, v)| Subject { id: s.id.clone(), map: s.map.clone(), values: v })
            .collect();
        Self::new(self.grid.clone(), subjects, kind)
    }

    pub fn require_kind(&self, kind: DataKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::WrongKind(format!(
                "expected {:?} data, found {:?}",
                kind, self.kind
            )));
        }
        Ok(())
    }
}

/// One full parameter configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FFAState {
    pub mu: Vec<f64>,
    /// `K × m`, row `k` is `λₖ` on the grid.
    pub lambda: DMatrix<f64>,
    /// `n × K`.
    pub eta: DMatrix<f64>,
    pub psi: Vec<f64>,
    pub sigma_sq: f64,
    pub mu_kernel: SEKernelParams,
    pub loading_kernels: Vec<SEKernelParams>,
    /// `K × q`.
    pub theta: Option<DMatrix<f64>>,
    /// `n × q`.
    pub covariates: Option<DMatrix<f64>>,
}

impl FFAState {
    pub fn k(&self) -> usize {
        self.lambda.nrows()
    }

    pub fn n(&self) -> usize {
        self.eta.nrows()
    }

    pub fn m(&self) -> usize {
        self.mu.len()
    }

    pub fn check_against(&self, data: &SparseFunctionalDataset) -> Result<()> {
        self.check_shape(data)?;
        if !(self.sigma_sq > 0.0) || self.psi.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::Domain("sigma_sq and psi must be positive".into()));
        }
        Ok(())
    }

    /// Dimension checks only.
    pub fn check_shape(&self, data: &SparseFunctionalDataset) -> Result<()> {
        let k = self.k();
        let ok = self.mu.len() == data.m()
            && self.lambda.ncols() == data.m()
            && self.eta.nrows() == data.n()
            && self.eta.ncols() == k
            && self.psi.len() == k
            && self.loading_kernels.len() == k;
        if !ok {
            return Err(Error::Dimension("state does not match dataset or K".into()));
        }
        if let (Some(th), Some(x)) = (&self.theta, &self.covariates) {
            if th.nrows() != k || th.ncols() != x.ncols() || x.nrows() != data.n() {
                return Err(Error::Dimension("regression coefficients vs covariates".into()));
            }
        }
        Ok(())
    }

    /// `μ + Λᵀηᵢ` on the full grid.
    pub fn fitted(&self, i: usize) -> Vec<f64> {
        let mut f = self.mu.clone();
        for k in 0..self.k() {
            let e = self.eta[(i, k)];
            if e != 0.0 {
                for (l, v) in f.iter_mut().enumerate() {
                    *v += e * self.lambda[(k, l)];
                }
            }
        }
        f
    }

    /// Fitted values at subject `i`'s observed points only.
    pub fn fitted_at(&self, i: usize, map: &SubjectIndexMap) -> Vec<f64> {
        map.indices()
            .iter()
            .map(|&l| {
                let mut v = self.mu[l];
                for k in 0..self.k() {
                    v += self.eta[(i, k)] * self.lambda[(k, l)];
                }
                v
            })
            .collect()
    }

    /// Drop to the factors flagged in `keep`.
    pub fn restrict(&self, keep: &[bool]) -> FFAState {
        let idx: Vec<usize> = (0..self.k()).filter(|&k| keep[k]).collect();
        let lambda = DMatrix::from_fn(idx.len(), self.m(), |r, c| self.lambda[(idx[r], c)]);
        let eta = DMatrix::from_fn(self.n(), idx.len(), |r, c| self.eta[(r, idx[c])]);
        FFAState {
            mu: self.mu.clone(),
            lambda,
            eta,
            psi: idx.iter().map(|&k| self.psi[k]).collect(),
            sigma_sq: self.sigma_sq,
            mu_kernel: self.mu_kernel,
            loading_kernels: idx.iter().map(|&k| self.loading_kernels[k]).collect(),
            theta: self
                .theta
                .as_ref()
                .map(|t| DMatrix::from_fn(idx.len(), t.ncols(), |r, c| t[(idx[r], c)])),
            covariates: self.covariates.clone(),
        }
    }
}

pub fn fitted_values(state: &FFAState, subject: usize) -> Vec<f64> {
    state.fitted(subject)
}

/// Fixed prior constants. Gamma distributions are shape/rate on precisions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub nu_lambda: f64,
    pub nu_eta: f64,
    pub mu_hyper: HyperpriorConfig,
    pub loading_hyper: HyperpriorConfig,
    pub alpha_sigma: f64,
    pub beta_sigma: f64,
    pub alpha_eta: f64,
    pub beta_eta: f64,
    pub k_max: usize,
    pub jitter: JitterPolicy,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            nu_lambda: 1e-4,
            nu_eta: 1e-4,
            mu_hyper: HyperpriorConfig::default(),
            loading_hyper: HyperpriorConfig::default(),
            alpha_sigma: 1.0,
            beta_sigma: 1.0,
            alpha_eta: 1.0,
            beta_eta: 1.0,
            k_max: 5,
            jitter: JitterPolicy::default(),
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu_lambda > 0.0) || !(self.nu_eta > 0.0) {
            return Err(Error::Config("nu_lambda and nu_eta must be positive".into()));
        }
        if self.k_max < 1 {
            return Err(Error::Config("k_max must be at least 1".into()));
        }
        for (name, v) in [
            ("alpha_sigma", self.alpha_sigma),
            ("beta_sigma", self.beta_sigma),
            ("alpha_eta", self.alpha_eta),
            ("beta_eta", self.beta_eta),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.jitter.relative >= 0.0) || !(self.jitter.max_relative >= self.jitter.relative) {
            return Err(Error::Config("jitter policy must satisfy 0 <= relative <= max_relative".into()));
        }
        self.mu_hyper.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.loading_hyper.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

/// `ψ (I − 11ᵀ/(ν + n))`, the prior covariance of one column of `η`.
pub fn eta_prior_covariance(n: usize, nu_eta: f64, psi: f64) -> DMatrix<f64> {
    let c = 1.0 / (nu_eta + n as f64);
    DMatrix::from_fn(n, n, |i, j| psi * (if i == j { 1.0 } else { 0.0 } - c))
}

/// One draw from `N(0, ψ (I − 11ᵀ/(ν + n)))` in `O(n)`.
pub fn sample_eta_column<R: Rng + ?Sized>(n: usize, nu_eta: f64, psi: f64, rng: &mut R) -> Vec<f64> {
    let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let nf = n as f64;
    let a = (1.0 - (nu_eta / (nu_eta + nf)).sqrt()) / nf;
    let s: f64 = z.iter().sum();
    let sd = psi.sqrt();
    z.iter().map(|v| sd * (v - a * s)).collect()
}

/// Generator settings shared by the continuous, binary and regression
/// simulators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub t_min: f64,
    pub t_max: f64,
    pub mu_kernel: SEKernelParams,
    pub loading_kernel: SEKernelParams,
    pub sigma_sq: f64,
    /// Fraction of each subject's grid points deleted at random.
    pub sparsity: f64,
    pub nu_lambda: f64,
    pub nu_eta: f64,
    pub nemo_sweeps: usize,
    /// Number of covariates for the latent regression generator.
    pub n_covariates: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n: 100,
            m: 30,
            k: 2,
            t_min: 0.0,
            t_max: 1.0,
            mu_kernel: SEKernelParams { tau_sq: 1.0, len_sq: 0.4 },
            loading_kernel: SEKernelParams { tau_sq: 1.0, len_sq: 0.4 },
            sigma_sq: 1.0,
            sparsity: 0.0,
            nu_lambda: 1e-4,
            nu_eta: 1e-4,
            nemo_sweeps: 50,
            n_covariates: 1,
        }
    }
}

impl SimConfig {
    /// Binary defaults: larger kernel variance so the probit link is not flat.
    pub fn binary() -> Self {
        SimConfig {
            mu_kernel: SEKernelParams { tau_sq: 10.0, len_sq: 0.4 },
            loading_kernel: SEKernelParams { tau_sq: 10.0, len_sq: 0.4 },
            ..Default::default()
        }
    }

    /// Latent regression defaults: one factor.
    pub fn regression() -> Self {
        SimConfig { k: 1, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::Config(format!("sparsity must lie in [0, 1), got {}", self.sparsity)));
        }
        if self.n == 0 || self.m < 2 || self.k == 0 || self.nemo_sweeps == 0 {
            return Err(Error::Config("need n >= 1, m >= 2, k >= 1 and nemo_sweeps >= 1".into()));
        }
        if !(self.sigma_sq > 0.0) || !(self.nu_lambda > 0.0) || !(self.nu_eta > 0.0) {
            return Err(Error::Config("sigma_sq, nu_lambda and nu_eta must be positive".into()));
        }
        if !(self.t_max > self.t_min) {
            return Err(Error::Config("t_max must exceed t_min".into()));
        }
        self.mu_kernel.validate()?;
        self.loading_kernel.validate()
    }
}

/// Delete `fraction` of each subject's points, keeping at least two. Points
/// are removed in the order of a per-subject random permutation, so a larger
/// fraction drawn with the same randomness removes a superset of points.
pub fn sparsify<R: Rng + ?Sized>(
    data: &SparseFunctionalDataset,
    fraction: f64,
    rng: &mut R,
) -> Result<SparseFunctionalDataset> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("sparsity must lie in [0, 1), got {fraction}")));
    }
    let mut subjects = Vec::with_capacity(data.n());
    for s in &data.subjects {
        let mi = s.values.len();
        let mut order: Vec<usize> = (0..mi).collect();
        order.shuffle(rng);
        let keep_n = ((mi as f64) * (1.0 - fraction)).round() as usize;
        let keep_n = keep_n.max(2.min(mi)).min(mi);
        let mut kept: Vec<usize> = order[..keep_n].to_vec();
        kept.sort_unstable();
        let indices = kept.iter().map(|&j| s.map.indices()[j]).collect();
        subjects.push(Subject {
            id: s.id.clone(),
            map: SubjectIndexMap::new(indices, data.m())?,
            values: kept.iter().map(|&j| s.values[j]).collect(),
        });
    }
    SparseFunctionalDataset::new(data.grid.clone(), subjects, data.kind)
}

fn draw_truth<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Result<(Grid, FFAState)> {
    cfg.validate()?;
    let grid = Grid::uniform(cfg.t_min, cfg.t_max, cfg.m)?;
    let policy = JitterPolicy::default();
    let mu = sample_gp(&grid, &cfg.mu_kernel, &policy, rng)?;
    let kernels = vec![cfg.loading_kernel; cfg.k];
    let loadings = sample_nemo_joint(&kernels, &grid, cfg.nu_lambda, cfg.nemo_sweeps, &policy, rng)?;
    let mut eta = DMatrix::zeros(cfg.n, cfg.k);
    for k in 0..cfg.k {
        let col = sample_eta_column(cfg.n, cfg.nu_eta, 1.0, rng);
        eta.column_mut(k).copy_from_slice(&col);
    }
    let state = FFAState {
        mu,
        lambda: loadings.lambda,
        eta,
        psi: vec![1.0; cfg.k],
        sigma_sq: cfg.sigma_sq,
        mu_kernel: cfg.mu_kernel,
        loading_kernels: kernels,
        theta: None,
        covariates: None,
    };
    Ok((grid, state))
}

/// Noisy observations of `truth` on the full grid for every subject.
pub fn observe_complete<R: Rng + ?Sized>(
    grid: &Grid,
    truth: &FFAState,
    kind: DataKind,
    rng: &mut R,
) -> Result<SparseFunctionalDataset> {
    let sd = truth.sigma_sq.sqrt();
    let m = grid.len();
    let subjects = (0..truth.n())
        .map(|i| {
            let f = truth.fitted(i);
            let values = f
                .iter()
                .map(|&v| match kind {
                    DataKind::Continuous => v + sd * rng.sample::<f64, _>(StandardNormal),
                    DataKind::Binary => {
                        if rng.random::<f64>() < normal_cdf(v) {
                            1.0
                        } else {
                            0.0
                        }
                    }
                })
                .collect();
            Subject { id: i.to_string(), map: SubjectIndexMap::identity(m), values }
        })
        .collect();
    SparseFunctionalDataset::new(grid.clone(), subjects, kind)
}

/// Continuous FFA data: GP mean, NeMO loadings, sum-relaxed factors,
/// Gaussian noise and random per-point deletion.
pub fn simulate_ffa<R: Rng + ?Sized>(
    cfg: &SimConfig,
    rng: &mut R,
) -> Result<(SparseFunctionalDataset, FFAState)> {
    let (grid, truth) = draw_truth(cfg, rng)?;
    let full = observe_complete(&grid, &truth, DataKind::Continuous, rng)?;
    Ok((sparsify(&full, cfg.sparsity, rng)?, truth))
}

/// Binary data through the probit link `P(y = 1) = Φ(f)`.
pub fn simulate_gffa_binary<R: Rng + ?Sized>(
    cfg: &SimConfig,
    rng: &mut R,
) -> Result<(SparseFunctionalDataset, FFAState)> {
    let (grid, mut truth) = draw_truth(cfg, rng)?;
    truth.sigma_sq = 1.0;
    let full = observe_complete(&grid, &truth, DataKind::Binary, rng)?;
    Ok((sparsify(&full, cfg.sparsity, rng)?, truth))
}

/// Latent-factor regression truth: `ηᵢ = Θxᵢ + ξᵢ` with standard-normal
/// covariates and coefficients, `ξ` from the factor prior.
pub fn regression_truth<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Result<(Grid, FFAState)> {
    if cfg.n_covariates == 0 {
        return Err(Error::Config("regression needs at least one covariate".into()));
    }
    let (grid, mut truth) = draw_truth(cfg, rng)?;
    let q = cfg.n_covariates;
    let x = DMatrix::from_fn(cfg.n, q, |_, _| rng.sample::<f64, _>(StandardNormal));
    let theta = DMatrix::from_fn(cfg.k, q, |_, _| rng.sample::<f64, _>(StandardNormal));
    truth.eta += &x * theta.transpose();
    truth.theta = Some(theta);
    truth.covariates = Some(x);
    Ok((grid, truth))
}

pub fn simulate_latent_regression<R: Rng + ?Sized>(
    cfg: &SimConfig,
    rng: &mut R,
) -> Result<(SparseFunctionalDataset, FFAState)> {
    let (grid, truth) = regression_truth(cfg, rng)?;
    let full = observe_complete(&grid, &truth, DataKind::Continuous, rng)?;
    Ok((sparsify(&full, cfg.sparsity, rng)?, truth))
}

/// Gaussian log-likelihood of continuous data.
pub fn log_likelihood(state: &FFAState, data: &SparseFunctionalDataset) -> Result<f64> {
    data.require_kind(DataKind::Continuous)?;
    state.check_against(data)?;
    let mut ssr = 0.0;
    for (i, s) in data.subjects.iter().enumerate() {
        let f = state.fitted_at(i, &s.map);
        ssr += s.values.iter().zip(&f).map(|(y, v)| (y - v) * (y - v)).sum::<f64>();
    }
    let n = data.total_obs() as f64;
    Ok(-0.5 * n * (LN_2PI + state.sigma_sq.ln()) - 0.5 * ssr / state.sigma_sq)
}

/// Log-likelihood of every observation in subject order; probit for binary
/// data, Gaussian otherwise.
pub fn pointwise_log_likelihood(state: &FFAState, data: &SparseFunctionalDataset) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.total_obs());
    let half_log = 0.5 * (LN_2PI + state.sigma_sq.ln());
    for (i, s) in data.subjects.iter().enumerate() {
        let f = state.fitted_at(i, &s.map);
        for (y, v) in s.values.iter().zip(&f) {
            out.push(match data.kind {
                DataKind::Continuous => -half_log - 0.5 * (y - v) * (y - v) / state.sigma_sq,
                DataKind::Binary => log_normal_cdf(if *y == 1.0 { *v } else { -*v }),
            });
        }
    }
    out
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn normal_log_pdf(x: f64) -> f64 {
    -0.5 * LN_2PI - 0.5 * x * x
}

/// `log Φ(x)`, accurate far into the lower tail.
pub fn log_normal_cdf(x: f64) -> f64 {
    if x > -30.0 {
        normal_cdf(x).ln()
    } else {
        let x2 = x * x;
        normal_log_pdf(x) - (-x).ln() + (1.0 - 1.0 / x2 + 3.0 / (x2 * x2)).ln()
    }
}
