//! Brute-force references for the Gibbs full conditionals: explicit selection
//! matrices, dense joint Gaussians, direct inverses and numerical integration.
//! Nothing here goes through the pseudo-observation or Sherman–Morrison paths
//! used by the sampler.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use nemo_core::model::{FFAState, PriorConfig, SparseFunctionalDataset};

pub struct Moments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// `Oᵢ` as an `mᵢ × m` 0/1 matrix.
pub fn selection(data: &SparseFunctionalDataset, i: usize) -> DMatrix<f64> {
    let idx = data.subjects[i].map.indices();
    let mut o = DMatrix::zeros(idx.len(), data.m());
    for (r, &l) in idx.iter().enumerate() {
        o[(r, l)] = 1.0;
    }
    o
}

fn inv(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone().try_inverse().expect("oracle matrix is invertible")
}

fn ones(n: usize) -> DMatrix<f64> {
    DMatrix::from_element(n, n, 1.0)
}

/// `I + 11ᵀ/ν`.
pub fn eta_precision_shape(n: usize, nu_eta: f64) -> DMatrix<f64> {
    DMatrix::identity(n, n) + ones(n) / nu_eta
}

fn lambda_col(state: &FFAState, k: usize) -> DVector<f64> {
    state.lambda.row(k).transpose()
}

fn y(data: &SparseFunctionalDataset, i: usize) -> DVector<f64> {
    DVector::from_column_slice(&data.subjects[i].values)
}

/// `μ + Σ_{j ∉ skip} ηᵢⱼ λⱼ` on the full grid.
fn signal(state: &FFAState, i: usize, with_mu: bool, skip: Option<usize>) -> DVector<f64> {
    let mut f = if with_mu {
        DVector::from_column_slice(&state.mu)
    } else {
        DVector::zeros(state.m())
    };
    for j in 0..state.k() {
        if Some(j) != skip {
            f += lambda_col(state, j) * state.eta[(i, j)];
        }
    }
    f
}

/// Stack all subjects into `y = Oμ + offset + ε` and condition the joint
/// Gaussian of `(μ, y)` in covariance form.
pub fn mu(state: &FFAState, data: &SparseFunctionalDataset, prior_cov: &DMatrix<f64>) -> Moments {
    let total = data.total_obs();
    let m = data.m();
    let mut o = DMatrix::zeros(total, m);
    let mut resid = DVector::zeros(total);
    let mut row = 0;
    for i in 0..data.n() {
        let oi = selection(data, i);
        let r = y(data, i) - &oi * signal(state, i, false, None);
        for a in 0..oi.nrows() {
            o.set_row(row, &oi.row(a));
            resid[row] = r[a];
            row += 1;
        }
    }
    let sy = &o * prior_cov * o.transpose() + DMatrix::identity(total, total) * state.sigma_sq;
    let cross = prior_cov * o.transpose();
    let gain = &cross * inv(&sy);
    Moments { mean: &gain * resid, cov: prior_cov - &gain * cross.transpose() }
}

/// Precision form: `C⁻¹ + (1/ν)WΛ₋ₖΛ₋ₖᵀW + (1/σ²)Σ ηᵢₖ² OᵢᵀOᵢ`.
pub fn lambda(
    state: &FFAState,
    data: &SparseFunctionalDataset,
    k: usize,
    nu_lambda: f64,
    prior_cov: &DMatrix<f64>,
    weights: &[f64],
) -> Moments {
    let m = data.m();
    let w = DMatrix::from_diagonal(&DVector::from_column_slice(weights));
    let mut prec = inv(prior_cov);
    for j in (0..state.k()).filter(|&j| j != k) {
        let lj = lambda_col(state, j);
        prec += &w * &lj * lj.transpose() * &w / nu_lambda;
    }
    let mut rhs = DVector::zeros(m);
    for i in 0..data.n() {
        let oi = selection(data, i);
        let e = state.eta[(i, k)];
        prec += oi.transpose() * &oi * (e * e / state.sigma_sq);
        let r = y(data, i) - &oi * signal(state, i, true, Some(k));
        rhs += oi.transpose() * r * (e / state.sigma_sq);
    }
    let cov = inv(&prec);
    Moments { mean: &cov * rhs, cov }
}

/// Dense precision `diag(λₖᵀOᵢᵀOᵢλₖ)/σ² + Q/ψ` with prior mean `Xθₖ`.
pub fn eta(state: &FFAState, data: &SparseFunctionalDataset, k: usize, nu_eta: f64) -> Moments {
    let n = data.n();
    let psi = state.psi[k];
    let q = eta_precision_shape(n, nu_eta);
    let lk = lambda_col(state, k);
    let mut prec = &q / psi;
    let prior_mean = prior_eta_mean(state, k);
    let mut rhs = &q * &prior_mean / psi;
    for i in 0..n {
        let oi = selection(data, i);
        let ol = &oi * &lk;
        prec[(i, i)] += ol.norm_squared() / state.sigma_sq;
        let r = y(data, i) - &oi * signal(state, i, true, Some(k));
        rhs[i] += ol.dot(&r) / state.sigma_sq;
    }
    let cov = inv(&prec);
    Moments { mean: &cov * rhs, cov }
}

fn prior_eta_mean(state: &FFAState, k: usize) -> DVector<f64> {
    match (&state.theta, &state.covariates) {
        (Some(th), Some(x)) => x * th.row(k).transpose(),
        _ => DVector::zeros(state.n()),
    }
}

/// Gamma shape and rate of `1/ψₖ` from the dense quadratic form.
pub fn psi(state: &FFAState, k: usize, prior: &PriorConfig) -> (f64, f64) {
    let n = state.n();
    let xi = state.eta.column(k) - prior_eta_mean(state, k);
    let quad = (xi.transpose() * eta_precision_shape(n, prior.nu_eta) * &xi)[(0, 0)];
    let mut shape = prior.alpha_eta + n as f64 / 2.0;
    let mut rate = prior.beta_eta + quad / 2.0;
    if let Some(th) = &state.theta {
        shape += th.ncols() as f64 / 2.0;
        rate += th.row(k).norm_squared() / 2.0;
    }
    (shape, rate)
}

/// Gamma shape and rate of `1/σ²` from dense residuals.
pub fn sigma(state: &FFAState, data: &SparseFunctionalDataset, prior: &PriorConfig) -> (f64, f64) {
    let mut ss = 0.0;
    let mut count = 0usize;
    for i in 0..data.n() {
        let oi = selection(data, i);
        let r = y(data, i) - &oi * signal(state, i, true, None);
        ss += r.norm_squared();
        count += r.len();
    }
    (prior.alpha_sigma + count as f64 / 2.0, prior.beta_sigma + ss / 2.0)
}

/// Joint Gaussian of `(θₖ, η·ₖ)` with `θₖ ~ N(0, ψI)`, `η = Xθ + ξ`,
/// `ξ ~ N(0, ψQ⁻¹)`, conditioned on `η·ₖ` in covariance form.
pub fn theta(state: &FFAState, k: usize, nu_eta: f64) -> Moments {
    let x = state.covariates.as_ref().expect("covariates");
    let n = x.nrows();
    let q = x.ncols();
    let psi = state.psi[k];
    let s_eta = x * x.transpose() * psi + inv(&eta_precision_shape(n, nu_eta)) * psi;
    let cross = x.transpose() * psi;
    let gain = &cross * inv(&s_eta);
    let eta = state.eta.column(k).into_owned();
    Moments {
        mean: &gain * eta,
        cov: DMatrix::identity(q, q) * psi - &gain * cross.transpose(),
    }
}

/// Composite Simpson rule on `[a, b]` with `2·half` panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, half: usize) -> f64 {
    let n = 2 * half;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for j in 1..n {
        s += f(a + j as f64 * h) * if j % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Mean and variance of `N(f, 1)` restricted to `(0, ∞)` (`positive`) or
/// `(−∞, 0)`, by quadrature of the unnormalised density.
pub fn truncated_moments(f: f64, positive: bool) -> (f64, f64) {
    let g = if positive { f } else { -f };
    // reflect the negative side onto the positive one
    let lo = 0.0;
    let hi = g.max(0.0) + 14.0;
    let dens = |x: f64| (-0.5 * (x - g) * (x - g)).exp();
    let z = simpson(dens, lo, hi, 200_000);
    let m1 = simpson(|x| x * dens(x), lo, hi, 200_000) / z;
    let m2 = simpson(|x| x * x * dens(x), lo, hi, 200_000) / z;
    let mean = if positive { m1 } else { -m1 };
    (mean, m2 - m1 * m1)
}

/// Fitted latent means at each observed point via dense `Oᵢ`.
pub fn fitted(state: &FFAState, data: &SparseFunctionalDataset, i: usize) -> DVector<f64> {
    selection(data, i) * signal(state, i, true, None)
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max()
}
