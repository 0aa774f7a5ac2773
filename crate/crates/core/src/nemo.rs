//! Nearly mutually orthogonal (NeMO) loadings: the conditional covariance of
//! one loading given the rest, conditional and joint prior draws, and the
//! pairwise orthogonality penalty.
//!
//! Given the other loadings `Λ₋ₖ` (rows of an `(K-1)×m` matrix), the prior of
//! `λₖ` on the grid is `N(0, Cᵛ)` with
//!
//! ```text
//! Cᵛ = C − h (ν I + H)⁻¹ hᵀ,   h = C W Λ₋ₖᵀ,   H = Λ₋ₖ W C W Λ₋ₖᵀ.
//! ```
//!
//! Equivalently `Cᵛ` is the posterior covariance of `λₖ ~ N(0, C)` after
//! observing the `K-1` weighted inner products `⟨λⱼ, λₖ⟩` as zero with noise
//! variance `ν`. Draws and densities here use that observation form, which
//! stays well conditioned as `ν → 0`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::kernels::{GpCovariance, JitterPolicy, SEKernelParams};
use crate::linalg::{cholesky_escalating, symmetrize, GaussianConditioner, LinearObservations};

/// `K` loadings evaluated on the common grid (row `k` is `λₖ`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadingSet {
    pub lambda: DMatrix<f64>,
    pub nu_lambda: f64,
}

impl LoadingSet {
    pub fn new(lambda: DMatrix<f64>, nu_lambda: f64) -> Result<Self> {
        if lambda.nrows() == 0 {
            return Err(Error::Dimension("loading set needs K >= 1".into()));
        }
        if !(nu_lambda > 0.0) {
            return Err(Error::Domain(format!("nu_lambda must be positive, got {nu_lambda}")));
        }
        Ok(LoadingSet { lambda, nu_lambda })
    }

    pub fn k(&self) -> usize {
        self.lambda.nrows()
    }

    pub fn row(&self, k: usize) -> Vec<f64> {
        self.lambda.row(k).iter().copied().collect()
    }
}

/// `Σ_{j<k} ⟨λⱼ, λₖ⟩²` under the grid quadrature.
pub fn orthogonality_penalty(lambda: &DMatrix<f64>, grid: &Grid) -> f64 {
    let k = lambda.nrows();
    let rows: Vec<Vec<f64>> = (0..k).map(|r| lambda.row(r).iter().copied().collect()).collect();
    let mut total = 0.0;
    for a in 0..k {
        for b in 0..a {
            let ip = grid.inner_unchecked(&rows[a], &rows[b]);
            total += ip * ip;
        }
    }
    total
}

/// Matrix with all rows of `lambda` except `k`.
pub fn others(lambda: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    lambda.clone().remove_row(k)
}

/// `Cᵛ` by the subtraction form, symmetrised.
pub fn nemo_conditional_cov(
    c_k: &DMatrix<f64>,
    others: &DMatrix<f64>,
    grid: &Grid,
    nu_lambda: f64,
) -> Result<DMatrix<f64>> {
    let m = grid.len();
    if c_k.nrows() != m || c_k.ncols() != m {
        return Err(Error::Dimension("kernel matrix does not match grid".into()));
    }
    if others.ncols() != m && others.nrows() > 0 {
        return Err(Error::Dimension("conditioning functions do not match grid".into()));
    }
    if !(nu_lambda > 0.0) {
        return Err(Error::Domain(format!("nu_lambda must be positive, got {nu_lambda}")));
    }
    if others.nrows() == 0 {
        return Ok(c_k.clone());
    }
    let w = DMatrix::from_diagonal(&DVector::from_column_slice(grid.weights()));
    let wl = &w * others.transpose(); // m × (K-1)
    let h = c_k * &wl; // m × (K-1)
    let mut big_h = wl.transpose() * &h; // (K-1) × (K-1)
    for i in 0..big_h.nrows() {
        big_h[(i, i)] += nu_lambda;
    }
    symmetrize(&mut big_h);
    let f = cholesky_escalating(&big_h, 0.0, 1e-10 * big_h.diagonal().max().max(1e-300))?;
    let mut out = c_k - &h * f.solve_mat(&h.transpose());
    symmetrize(&mut out);
    Ok(out)
}

/// The orthogonality penalty for `λₖ` as pseudo-observations `⟨λⱼ, λₖ⟩ = 0`
/// with noise variance `ν`.
pub fn penalty_observations(others: &DMatrix<f64>, grid: &Grid, nu_lambda: f64) -> LinearObservations {
    let m = grid.len();
    let w = grid.weights();
    let rows = (0..others.nrows())
        .map(|j| {
            let row: Vec<f64> = (0..m).map(|l| w[l] * others[(j, l)]).collect();
            (row, 0.0, nu_lambda)
        })
        .collect();
    LinearObservations::from_rows(m, rows)
}

/// Draw `λₖ | Λ₋ₖ ~ N(0, Cᵛ)`.
pub fn sample_nemo_conditional<R: Rng + ?Sized>(
    c_k: &GpCovariance,
    others: &DMatrix<f64>,
    grid: &Grid,
    nu_lambda: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(nu_lambda > 0.0) {
        return Err(Error::Domain(format!("nu_lambda must be positive, got {nu_lambda}")));
    }
    let obs = penalty_observations(others, grid, nu_lambda);
    let cond = GaussianConditioner::new(&c_k.cov, &c_k.factor, &obs)?;
    Ok(cond.sample(rng).as_slice().to_vec())
}

/// `log N(λₖ; 0, Cᵛ)` via the matrix determinant lemma:
/// `log N(λₖ; 0, C) − ‖Bᵀλₖ‖²/(2ν) + ½ log|I + H/ν|` with `B = W Λ₋ₖᵀ`.
pub fn conditional_log_density(
    lambda_k: &DVector<f64>,
    c_k: &GpCovariance,
    others: &DMatrix<f64>,
    grid: &Grid,
    nu_lambda: f64,
) -> Result<f64> {
    let base = c_k.log_density(lambda_k);
    if others.nrows() == 0 {
        return Ok(base);
    }
    let w = grid.weights();
    let m = grid.len();
    let b = DMatrix::from_fn(m, others.nrows(), |l, j| w[l] * others[(j, l)]);
    let proj = b.transpose() * lambda_k;
    let h = b.transpose() * &c_k.cov * &b;
    let mut scaled = h / nu_lambda;
    for i in 0..scaled.nrows() {
        scaled[(i, i)] += 1.0;
    }
    symmetrize(&mut scaled);
    let f = cholesky_escalating(&scaled, 0.0, 1e-10 * scaled.diagonal().max())?;
    Ok(base - proj.norm_squared() / (2.0 * nu_lambda) + 0.5 * f.log_det())
}

/// Joint prior simulation by cycling the conditionals. The first sweep draws
/// each `λₖ` given only `λ₁..λₖ₋₁`; later sweeps condition on all others.
pub fn sample_nemo_joint<R: Rng + ?Sized>(
    kernels: &[SEKernelParams],
    grid: &Grid,
    nu_lambda: f64,
    n_sweeps: usize,
    policy: &JitterPolicy,
    rng: &mut R,
) -> Result<LoadingSet> {
    if kernels.is_empty() {
        return Err(Error::Dimension("need at least one kernel".into()));
    }
    if n_sweeps == 0 {
        return Err(Error::Config("n_sweeps must be at least 1".into()));
    }
    let m = grid.len();
    let covs = kernels
        .iter()
        .map(|p| GpCovariance::new(grid, *p, policy))
        .collect::<Result<Vec<_>>>()?;
    let k_total = kernels.len();
    let mut lambda = DMatrix::zeros(k_total, m);
    for k in 0..k_total {
        let prev = lambda.rows(0, k).into_owned();
        let draw = sample_nemo_conditional(&covs[k], &prev, grid, nu_lambda, rng)?;
        lambda.row_mut(k).copy_from_slice(&draw);
    }
    if k_total > 1 {
        for _ in 1..n_sweeps {
            for k in 0..k_total {
                let rest = others(&lambda, k);
                let draw = sample_nemo_conditional(&covs[k], &rest, grid, nu_lambda, rng)?;
                lambda.row_mut(k).copy_from_slice(&draw);
            }
        }
    }
    LoadingSet::new(lambda, nu_lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::se_cov_matrix;
    use crate::rng::seeded;

    fn grid(m: usize) -> Grid {
        Grid::uniform(0.0, 1.0, m).unwrap()
    }

    fn row_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    }

    #[test]
    fn penalty_examples() {
        let g = grid(201);
        let one = vec![1.0; 201];
        assert_eq!(orthogonality_penalty(&row_matrix(&[one.clone()]), &g), 0.0);
        let p = orthogonality_penalty(&row_matrix(&[one.clone(), one]), &g);
        assert!((p - 1.0).abs() < 1e-12);
        let tau = std::f64::consts::TAU;
        let s: Vec<f64> = g.points().iter().map(|t| (tau * t).sin()).collect();
        let c: Vec<f64> = g.points().iter().map(|t| (tau * t).cos()).collect();
        assert!(orthogonality_penalty(&row_matrix(&[s, c]), &g) < 1e-7);
    }

    #[test]
    fn no_conditioning_returns_kernel() {
        let g = grid(10);
        let c = se_cov_matrix(&g, &SEKernelParams::new(1.0, 0.3).unwrap(), 1e-8);
        let out = nemo_conditional_cov(&c, &DMatrix::zeros(0, 10), &g, 1e-4).unwrap();
        assert_eq!(out, c);
    }

    #[test]
    fn huge_nu_recovers_kernel() {
        let g = grid(30);
        let c = se_cov_matrix(&g, &SEKernelParams::new(1.0, 0.1).unwrap(), 1e-8);
        let other = row_matrix(&[g.points().iter().map(|t| (3.0 * t).sin()).collect()]);
        let out = nemo_conditional_cov(&c, &other, &g, 1e12).unwrap();
        assert!((&out - &c).abs().max() < 1e-10);
    }

    #[test]
    fn conditioning_never_inflates_variance() {
        let g = grid(20);
        let c = se_cov_matrix(&g, &SEKernelParams::new(1.3, 0.2).unwrap(), 1e-8);
        let mut rng = seeded(2);
        for nu in [1e-8, 1e-4, 1.0, 100.0] {
            let o = crate::linalg::standard_normal_vec(40, &mut rng);
            let o = DMatrix::from_row_slice(2, 20, o.as_slice());
            let out = nemo_conditional_cov(&c, &o, &g, nu).unwrap();
            let diff = &c - &out;
            assert!(diff.symmetric_eigenvalues().min() >= -1e-8);
            assert!((&out - out.transpose()).abs().max() <= 1e-10);
        }
    }

    #[test]
    fn woodbury_forms_agree() {
        let g = grid(25);
        let c = se_cov_matrix(&g, &SEKernelParams::new(1.0, 0.05).unwrap(), 1e-6);
        let mut rng = seeded(9);
        let o = crate::linalg::standard_normal_vec(50, &mut rng);
        let o = DMatrix::from_row_slice(2, 25, o.as_slice());
        let w = DMatrix::from_diagonal(&DVector::from_column_slice(g.weights()));
        for nu in [1e-2, 1.0, 10.0] {
            let sub = nemo_conditional_cov(&c, &o, &g, nu).unwrap();
            let prec = c.clone().try_inverse().unwrap() + &w * o.transpose() * &o * &w / nu;
            let alt = prec.try_inverse().unwrap();
            let rel = (&sub - &alt).norm() / alt.norm();
            assert!(rel < 1e-6, "nu={nu} rel={rel}");
        }
    }

    #[test]
    fn small_nu_approaches_orthogonal_gp() {
        let g = grid(30);
        let c = se_cov_matrix(&g, &SEKernelParams::new(1.0, 0.1).unwrap(), 1e-8);
        let other = row_matrix(&[g.points().iter().map(|t| (4.0 * t).cos() + t).collect()]);
        let nu = 1e-10;
        let out = nemo_conditional_cov(&c, &other, &g, nu).unwrap();
        // exact orthogonal-GP covariance C − h H⁻¹ hᵀ
        let w = DMatrix::from_diagonal(&DVector::from_column_slice(g.weights()));
        let h = &c * &w * other.transpose();
        let hh = other.clone() * &w * &c * &w * other.transpose();
        let exact = &c - &h * hh.try_inverse().unwrap() * h.transpose();
        let rel = (&out - &exact).norm() / exact.norm();
        assert!(rel < 1e-6, "{rel}");
    }

    #[test]
    fn conditional_density_matches_dense() {
        let g = grid(8);
        let params = SEKernelParams::new(1.2, 0.3).unwrap();
        let gp = GpCovariance::new(&g, params, &JitterPolicy { relative: 1e-4, max_relative: 1e-2 }).unwrap();
        let mut rng = seeded(4);
        let o = crate::linalg::standard_normal_vec(16, &mut rng);
        let o = DMatrix::from_row_slice(2, 8, o.as_slice());
        let x = crate::linalg::standard_normal_vec(8, &mut rng);
        for nu in [0.1, 1.0, 50.0] {
            let cov = nemo_conditional_cov(&gp.cov, &o, &g, nu).unwrap();
            let dense = crate::kernels::gp_log_density(x.as_slice(), &cov).unwrap();
            let lemma = conditional_log_density(&x, &gp, &o, &g, nu).unwrap();
            assert!((dense - lemma).abs() < 1e-7, "{dense} vs {lemma}");
        }
    }

    #[test]
    fn zero_conditioning_function_is_plain_gp() {
        let g = grid(15);
        let gp = GpCovariance::new(&g, SEKernelParams::new(1.0, 0.2).unwrap(), &JitterPolicy::default()).unwrap();
        let zero = DMatrix::zeros(1, 15);
        let cov = nemo_conditional_cov(&gp.cov, &zero, &g, 1e-4).unwrap();
        assert!((&cov - &gp.cov).abs().max() < 1e-14);
    }

    #[test]
    fn tiny_nu_draws_are_orthogonal() {
        let g = grid(30);
        let gp = GpCovariance::new(&g, SEKernelParams::new(1.0, 0.1).unwrap(), &JitterPolicy::default()).unwrap();
        let gfun: Vec<f64> = g.points().iter().map(|t| (5.0 * t).sin() + 0.5).collect();
        let other = row_matrix(&[gfun.clone()]);
        let mut rng = seeded(21);
        let gnorm = gfun.iter().map(|v| v * v).sum::<f64>().sqrt();
        let good = (0..1000)
            .filter(|_| {
                let d = sample_nemo_conditional(&gp, &other, &g, 1e-8, &mut rng).unwrap();
                let dn = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                g.inner(&d, &gfun).unwrap().abs() / (dn * gnorm) < 1e-3
            })
            .count();
        assert!(good >= 990, "{good}");
    }

    #[test]
    fn large_nu_pointwise_variance_matches_kernel() {
        let g = grid(12);
        let gp = GpCovariance::new(&g, SEKernelParams::new(1.0, 0.1).unwrap(), &JitterPolicy::default()).unwrap();
        let other = row_matrix(&[g.points().iter().map(|t| (6.0 * t).sin()).collect()]);
        let mut rng = seeded(8);
        let n = 4000;
        let mut sq = vec![0.0; 12];
        for _ in 0..n {
            let d = sample_nemo_conditional(&gp, &other, &g, 100.0, &mut rng).unwrap();
            for l in 0..12 {
                sq[l] += d[l] * d[l];
            }
        }
        for l in 0..12 {
            let v = sq[l] / n as f64;
            assert!((v / gp.cov[(l, l)] - 1.0).abs() < 0.1, "point {l}: {v}");
        }
    }

    #[test]
    fn joint_single_loading_is_plain_gp_draw() {
        let g = grid(10);
        let p = SEKernelParams::new(1.0, 0.4).unwrap();
        let a = sample_nemo_joint(&[p], &g, 1e-4, 7, &JitterPolicy::default(), &mut seeded(1)).unwrap();
        let gp = GpCovariance::new(&g, p, &JitterPolicy::default()).unwrap();
        let b = gp.factor.sample(&mut seeded(1));
        assert_eq!(a.row(0), b.as_slice().to_vec());
    }

    #[test]
    fn joint_small_nu_is_nearly_orthogonal() {
        // the penalty acts on raw inner products, so the loadings must be large
        // against √ν for the normalised criterion to bite
        let g = grid(30);
        let p = SEKernelParams::new(100.0, 0.4).unwrap();
        let mut rng = seeded(33);
        let runs = 100;
        let good = (0..runs)
            .filter(|_| {
                let set = sample_nemo_joint(&[p, p], &g, 1e-4, 50, &JitterPolicy::default(), &mut rng).unwrap();
                let a = set.row(0);
                let b = set.row(1);
                let pen = orthogonality_penalty(&set.lambda, &g);
                pen < 1e-4 * g.inner(&a, &a).unwrap() * g.inner(&b, &b).unwrap()
            })
            .count();
        assert!(good >= 95, "{good}/{runs}");
    }
}
