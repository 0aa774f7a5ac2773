//! Gibbs full conditionals. Each Gaussian block exposes its moments (used by
//! the dense-oracle tests) next to the sampler used inside the chain.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::kernels::GpCovariance;
use crate::linalg::{cholesky_escalating, GaussianConditioner, LinearObservations};
use crate::model::{DataKind, FFAState, PriorConfig, SparseFunctionalDataset};

use super::truncnorm::{sample_truncated_normal, truncated_normal_moments, Side};

#[derive(Debug, Clone)]
pub struct GaussianMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// `y − [μ] − Σ_{j≠skip} ηᵢⱼ λⱼ` at each subject's observed points.
fn partial_residuals(
    state: &FFAState,
    data: &SparseFunctionalDataset,
    include_mu: bool,
    skip: Option<usize>,
) -> Vec<Vec<f64>> {
    let k_total = state.k();
    data.subjects
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.map
                .indices()
                .iter()
                .zip(&s.values)
                .map(|(&l, &y)| {
                    let mut r = y;
                    if include_mu {
                        r -= state.mu[l];
                    }
                    for j in 0..k_total {
                        if Some(j) != skip {
                            r -= state.eta[(i, j)] * state.lambda[(j, l)];
                        }
                    }
                    r
                })
                .collect()
        })
        .collect()
}

/// The likelihood for `μ` collapsed to one pseudo-observation per observed
/// grid point: the mean residual with noise `σ²/dₗ`.
pub fn mu_observations(state: &FFAState, data: &SparseFunctionalDataset) -> LinearObservations {
    let m = data.m();
    let r = partial_residuals(state, data, false, None);
    let mut sum = vec![0.0; m];
    let mut count = vec![0.0; m];
    for (s, ri) in data.subjects.iter().zip(&r) {
        for (j, &l) in s.map.indices().iter().enumerate() {
            sum[l] += ri[j];
            count[l] += 1.0;
        }
    }
    let rows = (0..m)
        .filter(|&l| count[l] > 0.0)
        .map(|l| {
            let mut row = vec![0.0; m];
            row[l] = 1.0;
            (row, sum[l] / count[l], state.sigma_sq / count[l])
        })
        .collect();
    LinearObservations::from_rows(m, rows)
}

pub fn mu_conditional(
    state: &FFAState,
    data: &SparseFunctionalDataset,
    mu_cov: &GpCovariance,
) -> Result<GaussianMoments> {
    let obs = mu_observations(state, data);
    let c = GaussianConditioner::new(&mu_cov.cov, &mu_cov.factor, &obs)?;
    Ok(GaussianMoments { mean: c.mean(), cov: c.covariance() })
}

pub fn gibbs_update_mu<R: Rng + ?Sized>(
    state: &FFAState,
    data: &SparseFunctionalDataset,
    mu_cov: &GpCovariance,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let obs = mu_observations(state, data);
    let c = GaussianConditioner::new(&mu_cov.cov, &mu_cov.factor, &obs)?;
    Ok(c.sample(rng).as_slice().to_vec())
}

/// Likelihood and orthogonality penalty for `λₖ` as linear observations:
/// per grid point the `η²`-weighted mean of `rᵢₗ/ηᵢₖ` with noise `σ²/Σηᵢₖ²`,
/// and `⟨λⱼ, λₖ⟩ = 0` with noise `ν` for every `j ≠ k`.
pub fn lambda_observations(
    state: &FFAState,
    data: &SparseFunctionalDataset,
    k: usize,
    nu_lambda: f64,
) -> LinearObservations {
    let m = data.m();
    let r = partial_residuals(state, data, true, Some(k));
    let mut prec = vec![0.0; m];
    let mut rhs = vec![0.0; m];
    for (i, (s, ri)) in data.subjects.iter().zip(&r).enumerate() {
        let e = state.eta[(i, k)];
        for (j, &l) in s.map.indices().iter().enumerate() {
            prec[l] += e * e;
            rhs[l] += e * ri[j];
        }
    }
    let mut rows: Vec<(Vec<f64>, f64, f64)> = (0..m)
        .filter(|&l| prec[l] > 0.0)
        .map(|l| {
            let mut row = vec![0.0; m];
            row[l] = 1.0;
            (row, rhs[l] / prec[l], state.sigma_sq / prec[l])
        })
        .collect();
    let w = data.grid.weights();
    for j in (0..state.k()).filter(|&j| j != k) {
        let row = (0..m).map(|l| w[l] * state.lambda[(j, l)]).collect();
        rows.push((row, 0.0, nu_lambda));
    }
    LinearObservations::from_rows(m, rows)
}

pub fn lambda_conditional(
    state: &FFAState,
    data: &SparseFunctionalDataset,
    k: usize,
    nu_lambda: f64,
    cov_k: &GpCovariance,
) -> Result<GaussianMoments> {
    let obs = lambda_observations(state, data, k, nu_lambda);
    let c = GaussianConditioner::new(&cov_k.cov, &cov_k.factor, &obs)?;
    Ok(GaussianMoments { mean: c.mean(), cov: c.covariance() })
}

pub fn gibbs_update_lambda_k<R: Rng + ?Sized>(
    state: &FFAState,
    data: &SparseFunctionalDataset,
    k: usize,
    nu_lambda: f64,
    cov_k: &GpCovariance,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let obs = lambda_observations(state, data, k, nu_lambda);
    let c = GaussianConditioner::new(&cov_k.cov, &cov_k.factor, &obs)?;
    Ok(c.sample(rng).as_slice().to_vec())
}

/// Posterior precision `diag(d) + c 11ᵀ` of `η·ₖ` and the right-hand side
/// `precision × mean`.
struct EtaSystem {
    d: Vec<f64>,
    c: f64,
    h: Vec<f64>,
}

impl EtaSystem {
    fn build(state: &FFAState, data: &SparseFunctionalDataset, k: usize, nu_eta: f64) -> Self {
        let r = partial_residuals(state, data, true, Some(k));
        let psi = state.psi[k];
        let prior_mean = eta_prior_mean(state, k);
        let mean_sum: f64 = prior_mean.iter().sum();
        let mut d = Vec::with_capacity(data.n());
        let mut h = Vec::with_capacity(data.n());
        for (i, (s, ri)) in data.subjects.iter().zip(&r).enumerate() {
            let mut a = 0.0;
            let mut b = 0.0;
            for (j, &l) in s.map.indices().iter().enumerate() {
                let v = state.lambda[(k, l)];
                a += v * v;
                b += v * ri[j];
            }
            d.push(a / state.sigma_sq + 1.0 / psi);
            h.push(b / state.sigma_sq + (prior_mean[i] + mean_sum / nu_eta) / psi);
        }
        EtaSystem { d, c: 1.0 / (psi * nu_eta), h }
    }

    /// Sherman–Morrison pieces: `g = D⁻¹1`, `q = 1ᵀg`.
    fn g_q(&self) -> (Vec<f64>, f64) {
        let g: Vec<f64> = self.d.iter().map(|v| 1.0 / v).collect();
        let q = g.iter().sum();
        (g, q)
    }

    fn mean(&self) -> Vec<f64> {
        let (g, q) = self.g_q();
        let u: Vec<f64> = self.h.iter().zip(&self.d).map(|(h, d)| h / d).collect();
        let su: f64 = u.iter().sum();
        let f = self.c * su / (1.0 + self.c * q);
        u.iter().zip(&g).map(|(u, g)| u - f * g).collect()
    }
}

/// Prior mean of `η·ₖ`: `Xθₖ` under the latent regression, zero otherwise.
fn eta_prior_mean(state: &FFAState, k: usize) -> Vec<f64> {
    match (&state.theta, &state.covariates) {
        (Some(th), Some(x)) => (x * th.row(k).transpose()).as_slice().to_vec(),
        _ => vec![0.0; state.n()],
    }
}

pub fn eta_conditional(
    state: &FFAState,
    data: &SparseFunctionalDataset,
    k: usize,
    nu_eta: f64,
) -> GaussianMoments {
    let sys = EtaSystem::build(state, data, k, nu_eta);
    let (g, q) = sys.g_q();
    let n = g.len();
    let f = sys.c / (1.0 + sys.c * q);
    let cov = DMatrix::from_fn(n, n, |i, j| if i == j { g[i] } else { 0.0 } - f * g[i] * g[j]);
    GaussianMoments { mean: DVector::from_vec(sys.mean()), cov }
}

/// `O(n)` draw of `η·ₖ`: independent draws under `diag(d)` corrected by a
/// rank-one shrink along `D⁻¹1`.
pub fn gibbs_update_eta_k<R: Rng + ?Sized>(
    state: &FFAState,
    data: &SparseFunctionalDataset,
    k: usize,
    nu_eta: f64,
    rng: &mut R,
) -> Vec<f64> {
    let sys = EtaSystem::build(state, data, k, nu_eta);
    let (g, q) = sys.g_q();
    let x0: Vec<f64> = sys
        .d
        .iter()
        .map(|d| rng.sample::<f64, _>(StandardNormal) / d.sqrt())
        .collect();
    let s = (1.0 - 1.0 / (1.0 + sys.c * q).sqrt()) / q;
    let sx: f64 = x0.iter().sum();
    let mean = sys.mean();
    x0.iter()
        .zip(&g)
        .zip(&mean)
        .map(|((x, g), m)| m + x - s * g * sx)
        .collect()
}

/// `ξᵀ(I + 11ᵀ/ν)ξ`.
fn eta_quadratic(xi: &[f64], nu_eta: f64) -> f64 {
    let ss: f64 = xi.iter().map(|v| v * v).sum();
    let s: f64 = xi.iter().sum();
    ss + s * s / nu_eta
}

/// Shape and rate of the gamma conditional of `1/ψₖ`.
pub fn psi_posterior(state: &FFAState, k: usize, prior: &PriorConfig) -> (f64, f64) {
    let n = state.n();
    let m0 = eta_prior_mean(state, k);
    let xi: Vec<f64> = (0..n).map(|i| state.eta[(i, k)] - m0[i]).collect();
    let mut shape = prior.alpha_eta + n as f64 / 2.0;
    let mut rate = prior.beta_eta + 0.5 * eta_quadratic(&xi, prior.nu_eta);
    if let (Some(th), Some(_)) = (&state.theta, &state.covariates) {
        shape += th.ncols() as f64 / 2.0;
        rate += 0.5 * th.row(k).norm_squared();
    }
    (shape, rate)
}

fn sample_inverse_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    let g = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| Error::Numerical(format!("gamma({shape}, {rate}): {e}")))?;
    let prec: f64 = g.sample(rng);
    if !(prec > 0.0) || !prec.is_finite() {
        return Err(Error::Numerical(format!("degenerate precision draw {prec}")));
    }
    Ok(1.0 / prec)
}

pub fn gibbs_update_psi_k<R: Rng + ?Sized>(
    state: &FFAState,
    k: usize,
    prior: &PriorConfig,
    rng: &mut R,
) -> Result<f64> {
    let (shape, rate) = psi_posterior(state, k, prior);
    sample_inverse_gamma(shape, rate, rng)
}

pub fn sum_squared_residuals(state: &FFAState, data: &SparseFunctionalDataset) -> f64 {
    partial_residuals(state, data, true, None)
        .iter()
        .flatten()
        .map(|r| r * r)
        .sum()
}

/// Shape and rate of the gamma conditional of `1/σ²`.
pub fn sigma_posterior(state: &FFAState, data: &SparseFunctionalDataset, prior: &PriorConfig) -> (f64, f64) {
    let n = data.total_obs() as f64;
    (
        prior.alpha_sigma + n / 2.0,
        prior.beta_sigma + 0.5 * sum_squared_residuals(state, data),
    )
}

pub fn gibbs_update_sigma2<R: Rng + ?Sized>(
    state: &FFAState,
    data: &SparseFunctionalDataset,
    prior: &PriorConfig,
    rng: &mut R,
) -> Result<f64> {
    data.require_kind(DataKind::Continuous)?;
    let (shape, rate) = sigma_posterior(state, data, prior);
    sample_inverse_gamma(shape, rate, rng)
}

/// Conjugate regression of `η·ₖ` on `X` with `ξ ~ N(0, ψ(I + 11ᵀ/ν)⁻¹)` and
/// `θₖ ~ N(0, ψ I)`: precision `(XᵀQX + I)/ψ`, mean `(XᵀQX + I)⁻¹XᵀQη·ₖ`.
pub fn theta_conditional(state: &FFAState, k: usize, nu_eta: f64) -> Result<GaussianMoments> {
    let (a, b) = theta_system(state, k, nu_eta)?;
    let f = cholesky_escalating(&a, 0.0, 1e-10 * a.diagonal().max())?;
    let mean = f.solve(&b);
    let cov = f.inverse() * state.psi[k];
    Ok(GaussianMoments { mean, cov })
}

/// `(XᵀQX + I, XᵀQη·ₖ)` with `Q = I + 11ᵀ/ν`.
fn theta_system(state: &FFAState, k: usize, nu_eta: f64) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let x = state
        .covariates
        .as_ref()
        .ok_or_else(|| Error::Config("latent regression needs covariates".into()))?;
    let q = x.ncols();
    let col_sums = DVector::from_fn(q, |j, _| x.column(j).sum());
    let eta = state.eta.column(k).into_owned();
    let mut a = x.transpose() * x + &col_sums * col_sums.transpose() / nu_eta;
    for j in 0..q {
        a[(j, j)] += 1.0;
    }
    let b = x.transpose() * &eta + &col_sums * (eta.sum() / nu_eta);
    Ok((a, b))
}

pub fn gibbs_update_theta<R: Rng + ?Sized>(
    state: &FFAState,
    nu_eta: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let x = state
        .covariates
        .as_ref()
        .ok_or_else(|| Error::Config("latent regression needs covariates".into()))?;
    let q = x.ncols();
    let mut theta = DMatrix::zeros(state.k(), q);
    for k in 0..state.k() {
        let (a, b) = theta_system(state, k, nu_eta)?;
        let f = cholesky_escalating(&a, 0.0, 1e-10 * a.diagonal().max())?;
        let mean = f.solve(&b);
        // L⁻ᵀz has covariance (LLᵀ)⁻¹
        let mut z = crate::linalg::standard_normal_vec(q, rng);
        f.l().transpose().solve_upper_triangular_mut(&mut z);
        let draw = mean + z * state.psi[k].sqrt();
        theta.row_mut(k).copy_from_slice(draw.as_slice());
    }
    Ok(theta)
}

/// Mean and variance of each latent utility given the current state.
pub fn latent_z_conditional(state: &FFAState, data: &SparseFunctionalDataset) -> Result<Vec<Vec<(f64, f64)>>> {
    data.require_kind(DataKind::Binary)?;
    Ok(data
        .subjects
        .iter()
        .enumerate()
        .map(|(i, s)| {
            state
                .fitted_at(i, &s.map)
                .iter()
                .zip(&s.values)
                .map(|(&f, &y)| truncated_normal_moments(f, 1.0, side_of(y)))
                .collect()
        })
        .collect())
}

fn side_of(y: f64) -> Side {
    if y == 1.0 {
        Side::Positive
    } else {
        Side::Negative
    }
}

/// Latent probit utilities: truncated normals centred at the fitted values,
/// positive where `y = 1`, negative where `y = 0`.
pub fn gibbs_update_latent_z<R: Rng + ?Sized>(
    state: &FFAState,
    data: &SparseFunctionalDataset,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    data.require_kind(DataKind::Binary)?;
    Ok(data
        .subjects
        .iter()
        .enumerate()
        .map(|(i, s)| {
            state
                .fitted_at(i, &s.map)
                .iter()
                .zip(&s.values)
                .map(|(&f, &y)| sample_truncated_normal(f, 1.0, side_of(y), rng))
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::kernels::{JitterPolicy, SEKernelParams};
    use crate::model::{simulate_ffa, SimConfig};
    use crate::rng::seeded;

    fn toy(k: usize, seed: u64) -> (SparseFunctionalDataset, FFAState) {
        let cfg = SimConfig { n: 3, m: 4, k, sparsity: 0.3, ..Default::default() };
        simulate_ffa(&cfg, &mut seeded(seed)).unwrap()
    }

    #[test]
    fn mu_without_data_is_prior() {
        let grid = Grid::uniform(0.0, 1.0, 4).unwrap();
        let gp = GpCovariance::new(&grid, SEKernelParams::new(1.0, 0.3).unwrap(), &JitterPolicy::default()).unwrap();
        let (data, state) = toy(1, 1);
        let obs = LinearObservations::empty(4);
        let c = GaussianConditioner::new(&gp.cov, &gp.factor, &obs).unwrap();
        assert_eq!(c.covariance(), gp.cov);
        // observations exist in the toy, so its conditional differs from the prior
        let m = mu_conditional(&state, &data, &gp).unwrap();
        assert!((m.cov - &gp.cov).abs().max() > 1e-3);
    }

    #[test]
    fn mu_low_noise_matches_cross_sectional_mean() {
        let cfg = SimConfig { n: 6, m: 5, k: 1, sigma_sq: 1.0, ..Default::default() };
        let (data, mut state) = simulate_ffa(&cfg, &mut seeded(2)).unwrap();
        let state0 = FFAState { lambda: DMatrix::zeros(0, 5), eta: DMatrix::zeros(6, 0), psi: vec![], loading_kernels: vec![], ..state.clone() };
        state = state0;
        state.sigma_sq = 1e-12;
        let gp = GpCovariance::new(&data.grid, SEKernelParams::new(1.0, 0.4).unwrap(), &JitterPolicy::default()).unwrap();
        let mom = mu_conditional(&state, &data, &gp).unwrap();
        for l in 0..5 {
            let avg = data.subjects.iter().map(|s| s.values[l]).sum::<f64>() / 6.0;
            assert!((mom.mean[l] - avg).abs() < 1e-4, "{l}");
        }
    }

    #[test]
    fn lambda_without_information_is_prior() {
        let (data, mut state) = toy(2, 3);
        state.eta.column_mut(0).fill(0.0);
        let gp = GpCovariance::new(&data.grid, SEKernelParams::new(1.0, 0.4).unwrap(), &JitterPolicy::default()).unwrap();
        let mom = lambda_conditional(&state, &data, 0, 1e12, &gp).unwrap();
        assert!((mom.cov - &gp.cov).abs().max() < 1e-9);
        assert!(mom.mean.abs().max() < 1e-9);
    }

    #[test]
    fn eta_without_loading_is_prior() {
        let (data, mut state) = toy(1, 4);
        state.lambda.fill(0.0);
        state.psi[0] = 1.7;
        let mom = eta_conditional(&state, &data, 0, 0.5);
        let want = crate::model::eta_prior_covariance(3, 0.5, 1.7);
        // (I + 11ᵀ/ν)⁻¹ = I − 11ᵀ/(ν + n)
        assert!((mom.cov - want).abs().max() < 1e-12);
        assert!(mom.mean.abs().max() < 1e-12);
    }

    #[test]
    fn eta_single_subject_conjugate() {
        let (data, mut state) = toy(1, 5);
        let data = SparseFunctionalDataset::new(data.grid.clone(), data.subjects[..1].to_vec(), data.kind).unwrap();
        state.eta = state.eta.rows(0, 1).into_owned();
        state.psi[0] = 0.8;
        let mom = eta_conditional(&state, &data, 0, 1e12);
        let s = &data.subjects[0];
        let lam: Vec<f64> = s.map.gather(&state.lambda.row(0).iter().copied().collect::<Vec<_>>());
        let mu = s.map.gather(&state.mu);
        let a: f64 = lam.iter().map(|v| v * v).sum();
        let b: f64 = lam.iter().zip(&s.values).zip(&mu).map(|((l, y), m)| l * (y - m)).sum();
        let prec = a / state.sigma_sq + 1.0 / 0.8;
        assert!((mom.cov[(0, 0)] - 1.0 / prec).abs() < 1e-10);
        assert!((mom.mean[0] - b / state.sigma_sq / prec).abs() < 1e-10);
    }

    #[test]
    fn eta_sampler_matches_moments() {
        let (data, mut state) = toy(2, 6);
        state.psi = vec![0.9, 1.4];
        let mom = eta_conditional(&state, &data, 1, 0.3);
        let mut rng = seeded(7);
        let reps = 100_000;
        let mut m1 = DVector::zeros(3);
        let mut m2 = DMatrix::zeros(3, 3);
        for _ in 0..reps {
            let v = DVector::from_vec(gibbs_update_eta_k(&state, &data, 1, 0.3, &mut rng));
            m1 += &v;
            m2 += &v * v.transpose();
        }
        m1 /= reps as f64;
        m2 /= reps as f64;
        let cov = m2 - &m1 * m1.transpose();
        assert!((m1 - &mom.mean).abs().max() < 0.02);
        assert!((cov - &mom.cov).abs().max() < 0.02);
    }

    #[test]
    fn psi_examples() {
        let (_, mut state) = toy(1, 8);
        let prior = PriorConfig { nu_eta: 1e12, alpha_eta: 2.0, beta_eta: 3.0, ..Default::default() };
        state.eta.fill(0.0);
        let (a, b) = psi_posterior(&state, 0, &prior);
        assert_eq!((a, b), (2.0 + 1.5, 3.0));
        state.eta = DMatrix::from_element(1, 1, 2.0);
        let (a, b) = psi_posterior(&state, 0, &prior);
        assert_eq!(a, 2.5);
        assert!((b - 5.0).abs() < 1e-10);
    }

    #[test]
    fn psi_monte_carlo_mean() {
        let (_, state) = toy(1, 9);
        let prior = PriorConfig { alpha_eta: 3.0, beta_eta: 2.0, nu_eta: 0.7, ..Default::default() };
        let (a, b) = psi_posterior(&state, 0, &prior);
        let mut rng = seeded(10);
        let reps = 100_000;
        let mean = (0..reps)
            .map(|_| 1.0 / gibbs_update_psi_k(&state, 0, &prior, &mut rng).unwrap())
            .sum::<f64>()
            / reps as f64;
        assert!((mean / (a / b) - 1.0).abs() < 0.01);
    }

    #[test]
    fn sigma_examples() {
        let (data, mut state) = toy(1, 11);
        let prior = PriorConfig { alpha_sigma: 2.0, beta_sigma: 0.5, ..Default::default() };
        let n_obs = data.total_obs() as f64;
        let mut exact = data.clone();
        for (i, s) in exact.subjects.iter_mut().enumerate() {
            s.values = state.fitted_at(i, &s.map);
        }
        assert_eq!(sigma_posterior(&state, &exact, &prior), (2.0 + n_obs / 2.0, 0.5));
        let mut ones = exact.clone();
        for s in ones.subjects.iter_mut() {
            for v in s.values.iter_mut() {
                *v += 1.0;
            }
        }
        let (_, rate) = sigma_posterior(&state, &ones, &prior);
        assert!((rate - (0.5 + n_obs / 2.0)).abs() < 1e-12);

        let mut rng = seeded(12);
        state.sigma_sq = 1.0;
        let (a, b) = sigma_posterior(&state, &data, &prior);
        let reps = 100_000;
        let mean = (0..reps)
            .map(|_| 1.0 / gibbs_update_sigma2(&state, &data, &prior, &mut rng).unwrap())
            .sum::<f64>()
            / reps as f64;
        assert!((mean / (a / b) - 1.0).abs() < 0.01);
    }

    #[test]
    fn theta_zero_covariates_is_prior() {
        let (_, mut state) = toy(1, 13);
        state.covariates = Some(DMatrix::zeros(3, 2));
        state.theta = Some(DMatrix::zeros(1, 2));
        state.psi[0] = 2.5;
        let mom = theta_conditional(&state, 0, 1e-4).unwrap();
        assert!(mom.mean.abs().max() < 1e-15);
        assert!((mom.cov - DMatrix::<f64>::identity(2, 2) * 2.5).abs().max() < 1e-12);
    }

    #[test]
    fn theta_large_n_approaches_ols() {
        let mut rng = seeded(14);
        let n = 5000;
        let x = DMatrix::from_fn(n, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let eta = DMatrix::from_fn(n, 1, |i, _| 0.7 * x[(i, 0)] + rng.sample::<f64, _>(StandardNormal));
        let state = FFAState {
            mu: vec![0.0; 2],
            lambda: DMatrix::zeros(1, 2),
            eta: eta.clone(),
            psi: vec![1.0],
            sigma_sq: 1.0,
            mu_kernel: SEKernelParams::new(1.0, 1.0).unwrap(),
            loading_kernels: vec![SEKernelParams::new(1.0, 1.0).unwrap()],
            theta: Some(DMatrix::zeros(1, 1)),
            covariates: Some(x.clone()),
        };
        let mom = theta_conditional(&state, 0, 1e12).unwrap();
        let ols = x.column(0).dot(&eta.column(0)) / x.column(0).norm_squared();
        assert!((mom.mean[0] - ols).abs() < 3.0 * mom.cov[(0, 0)].sqrt());
    }

    #[test]
    fn latent_z_respects_signs() {
        let cfg = SimConfig { n: 5, m: 6, k: 1, ..SimConfig::binary() };
        let (data, truth) = crate::model::simulate_gffa_binary(&cfg, &mut seeded(15)).unwrap();
        let z = gibbs_update_latent_z(&truth, &data, &mut seeded(16)).unwrap();
        for (s, zi) in data.subjects.iter().zip(&z) {
            for (y, v) in s.values.iter().zip(zi) {
                assert!(if *y == 1.0 { *v > 0.0 } else { *v < 0.0 });
            }
        }
    }
}

/// Mean and variance of `c` for the joint shift `μ + cλₖ`, `η·ₖ − c1`,
/// `θₖ + cδ` with `δ = −n s/‖s‖²`, `s = Xᵀ1`. The shift leaves every
/// `μ + Σⱼ ηᵢⱼλⱼ` and the sum `1ᵀ(η·ₖ − Xθₖ)` unchanged, so only the priors
/// of `μ`, `η·ₖ` and `θₖ` vary along it and the target in `c` is Gaussian.
/// `None` when the model has no covariates or their column sums vanish.
pub fn mean_shift_conditional(state: &FFAState, k: usize, nu_eta: f64, mu_cov: &GpCovariance) -> Option<(f64, f64)> {
    let x = state.covariates.as_ref()?;
    let theta = state.theta.as_ref()?;
    let n = x.nrows();
    let s = DVector::from_fn(x.ncols(), |j, _| x.column(j).sum());
    let ss = s.norm_squared();
    if !(ss > 1e-12 * n as f64) {
        return None;
    }
    let delta = &s * (-(n as f64) / ss);
    let e = DVector::from_element(n, 1.0) + x * &delta;
    let th = theta.row(k).transpose();
    let xi = state.eta.column(k) - x * &th;
    let q_form = |a: &DVector<f64>, b: &DVector<f64>| a.dot(b) + a.sum() * b.sum() / nu_eta;
    let psi = state.psi[k];
    let lam = state.lambda.row(k).transpose();
    let mu = DVector::from_column_slice(&state.mu);
    let c_inv_lam = mu_cov.factor.solve(&lam);
    let a = lam.dot(&c_inv_lam) + (q_form(&e, &e) + delta.norm_squared()) / psi;
    let b = mu.dot(&c_inv_lam) + (th.dot(&delta) - q_form(&e, &xi)) / psi;
    if !(a > 0.0 && a.is_finite() && b.is_finite()) {
        return None;
    }
    Some((-b / a, 1.0 / a))
}

/// Exact draw along the shift of [`mean_shift_conditional`].
pub fn mean_shift_update<R: Rng + ?Sized>(
    state: &mut FFAState,
    k: usize,
    nu_eta: f64,
    mu_cov: &GpCovariance,
    rng: &mut R,
) {
    let Some((mean, var)) = mean_shift_conditional(state, k, nu_eta, mu_cov) else {
        return;
    };
    let z: f64 = rng.sample(StandardNormal);
    let c = mean + var.sqrt() * z;
    let x = state.covariates.as_ref().expect("checked above");
    let n = x.nrows();
    let s = DVector::from_fn(x.ncols(), |j, _| x.column(j).sum());
    let delta = &s * (-(n as f64) / s.norm_squared());
    for (m, l) in state.mu.iter_mut().zip(state.lambda.row(k).iter()) {
        *m += c * l;
    }
    state.eta.column_mut(k).add_scalar_mut(-c);
    if let Some(th) = state.theta.as_mut() {
        for (t, d) in th.row_mut(k).iter_mut().zip(delta.iter()) {
            *t += c * d;
        }
    }
}
