//! Squared-exponential covariance, Gaussian-process densities and draws, and
//! the hyperprior on `(l², τ²)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::linalg::{cholesky_escalating, CovFactor};

/// `C(s,t) = τ² exp(-(s-t)² / (2 l²))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SEKernelParams {
    pub tau_sq: f64,
    pub len_sq: f64,
}

impl SEKernelParams {
    pub fn new(tau_sq: f64, len_sq: f64) -> Result<Self> {
        let p = SEKernelParams { tau_sq, len_sq };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_sq > 0.0 && self.tau_sq.is_finite()) {
            return Err(Error::Domain(format!("tau_sq must be positive, got {}", self.tau_sq)));
        }
        if !(self.len_sq > 0.0 && self.len_sq.is_finite()) {
            return Err(Error::Domain(format!("len_sq must be positive, got {}", self.len_sq)));
        }
        Ok(())
    }

    pub fn eval(&self, s: f64, t: f64) -> f64 {
        let d = s - t;
        self.tau_sq * (-d * d / (2.0 * self.len_sq)).exp()
    }
}

/// Gamma(shape `alpha`, rate `beta`) on the precision `1/l²` and
/// half-normal with scale `gamma_hn` on `τ²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperpriorConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma_hn: f64,
}

impl Default for HyperpriorConfig {
    fn default() -> Self {
        HyperpriorConfig {
            alpha: 1.0,
            beta: 1.0,
            gamma_hn: 1.0,
        }
    }
}

impl HyperpriorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma_hn", self.gamma_hn)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Domain(format!("hyperprior {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Draw `(τ², l²)` from the hyperprior.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SEKernelParams {
        let gamma = rand_distr::Gamma::new(self.alpha, 1.0 / self.beta).expect("validated");
        let prec: f64 = rng.sample(gamma);
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        SEKernelParams {
            tau_sq: (self.gamma_hn * z.abs()).max(f64::MIN_POSITIVE),
            len_sq: (1.0 / prec).min(f64::MAX),
        }
    }
}

/// Diagonal jitter relative to `τ²`, escalated ×10 on factorisation failure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JitterPolicy {
    pub relative: f64,
    pub max_relative: f64,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        JitterPolicy {
            relative: 1e-8,
            max_relative: 1e-4,
        }
    }
}

pub fn se_cov_matrix(grid: &Grid, params: &SEKernelParams, jitter: f64) -> DMatrix<f64> {
    let t = grid.points();
    let m = t.len();
    let mut c = DMatrix::zeros(m, m);
    for i in 0..m {
        c[(i, i)] = params.tau_sq + jitter;
        for j in 0..i {
            let v = params.eval(t[i], t[j]);
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    c
}

/// Jittered covariance of a GP on `grid` with its Cholesky factor. The
/// returned matrix includes any escalated jitter, so it is exactly `L Lᵀ`.
#[derive(Debug, Clone)]
pub struct GpCovariance {
    pub params: SEKernelParams,
    pub cov: DMatrix<f64>,
    pub factor: CovFactor,
}

impl GpCovariance {
    pub fn new(grid: &Grid, params: SEKernelParams, policy: &JitterPolicy) -> Result<Self> {
        params.validate()?;
        let base = policy.relative * params.tau_sq;
        let mut cov = se_cov_matrix(grid, &params, base);
        let max = policy.max_relative * params.tau_sq;
        let factor = cholesky_escalating(&cov, 10.0 * base, max)?;
        if factor.extra_jitter > 0.0 {
            for i in 0..cov.nrows() {
                cov[(i, i)] += factor.extra_jitter;
            }
        }
        Ok(GpCovariance { params, cov, factor })
    }

    pub fn log_density(&self, f: &DVector<f64>) -> f64 {
        self.factor.log_density(f)
    }
}

/// `log N(f; 0, cov)` including the normalising constant.
pub fn gp_log_density(f: &[f64], cov: &DMatrix<f64>) -> Result<f64> {
    if f.len() != cov.nrows() {
        return Err(Error::Dimension(format!(
            "vector of length {} against {}x{} covariance",
            f.len(),
            cov.nrows(),
            cov.ncols()
        )));
    }
    let scale = (0..cov.nrows()).map(|i| cov[(i, i)]).fold(0.0f64, f64::max);
    let factor = cholesky_escalating(cov, 1e-8 * scale, 1e-4 * scale)?;
    Ok(factor.log_density(&DVector::from_column_slice(f)))
}

pub fn sample_gp<R: Rng + ?Sized>(
    grid: &Grid,
    params: &SEKernelParams,
    policy: &JitterPolicy,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let gp = GpCovariance::new(grid, *params, policy)?;
    Ok(gp.factor.sample(rng).as_slice().to_vec())
}

/// Log gamma density of the precision `1/l²` expressed as a density in `l²`
/// (Jacobian `l⁻⁴`) plus the half-normal log density of `τ²`.
pub fn log_hyperprior(params: &SEKernelParams, cfg: &HyperpriorConfig) -> Result<f64> {
    params.validate()?;
    cfg.validate()?;
    Ok(log_len_prior(params.len_sq, cfg) + log_tau_prior(params.tau_sq, cfg))
}

pub(crate) fn log_len_prior(len_sq: f64, cfg: &HyperpriorConfig) -> f64 {
    let p = 1.0 / len_sq;
    cfg.alpha * cfg.beta.ln() - libm::lgamma(cfg.alpha) + (cfg.alpha - 1.0) * p.ln() - cfg.beta * p
        - 2.0 * len_sq.ln()
}

pub(crate) fn log_tau_prior(tau_sq: f64, cfg: &HyperpriorConfig) -> f64 {
    let g = cfg.gamma_hn;
    0.5 * (2.0 / std::f64::consts::PI).ln() - g.ln() - tau_sq * tau_sq / (2.0 * g * g)
}
