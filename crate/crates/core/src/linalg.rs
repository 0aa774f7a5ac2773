//! Dense Gaussian helpers: jittered Cholesky factors, log-densities and
//! linear-Gaussian conditioning in observation form.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Cholesky factor of a covariance plus the diagonal jitter that had to be
/// added to obtain it.
#[derive(Debug, Clone)]
pub struct CovFactor {
    chol: Cholesky<f64, Dyn>,
    pub extra_jitter: f64,
}

impl CovFactor {
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// `L z` for a standard-normal `z`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let n = self.chol.l_dirty().nrows();
        let z = standard_normal_vec(n, rng);
        self.chol.l() * z
    }

    /// `-½ xᵀA⁻¹x - ½ log|A| - (n/2) log 2π`.
    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let n = x.len() as f64;
        let mut y = x.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut y);
        // l_dirty has garbage above the diagonal; the lower solve ignores it
        -0.5 * y.norm_squared() - 0.5 * self.log_det() - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }
}

/// Factorise `a`, adding `start`, `10·start`, … up to `max` on the diagonal
/// whenever the previous attempt fails. `start = 0` tries the bare matrix
/// first and then escalates from `max * 1e-4`.
pub fn cholesky_escalating(a: &DMatrix<f64>, start: f64, max: f64) -> Result<CovFactor> {
    if a.nrows() != a.ncols() {
        return Err(Error::Dimension(format!(
            "cholesky of non-square {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite entry in covariance".into()));
    }
    if let Some(chol) = Cholesky::new(a.clone()) {
        return Ok(CovFactor {
            chol,
            extra_jitter: 0.0,
        });
    }
    let mut jitter = if start > 0.0 { start } else { max * 1e-4 };
    while jitter <= max * (1.0 + 1e-12) {
        let mut b = a.clone();
        for i in 0..b.nrows() {
            b[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(b) {
            return Ok(CovFactor {
                chol,
                extra_jitter: jitter,
            });
        }
        jitter *= 10.0;
    }
    Err(Error::Numerical(format!(
        "cholesky failed after jitter escalation to {max:e}"
    )))
}

pub fn standard_normal_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Linear observations `rows · x + noise` of a Gaussian vector `x ~ N(0, C)`,
/// with independent noise of the given variances.
#[derive(Debug, Clone)]
pub struct LinearObservations {
    pub rows: DMatrix<f64>,
    pub values: DVector<f64>,
    pub noise_var: DVector<f64>,
}

impl LinearObservations {
    pub fn empty(m: usize) -> Self {
        LinearObservations {
            rows: DMatrix::zeros(0, m),
            values: DVector::zeros(0),
            noise_var: DVector::zeros(0),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Builder from (row, value, noise variance) triples.
    pub fn from_rows(m: usize, rows: Vec<(Vec<f64>, f64, f64)>) -> Self {
        let r = rows.len();
        let mut g = DMatrix::zeros(r, m);
        let mut y = DVector::zeros(r);
        let mut v = DVector::zeros(r);
        for (i, (row, value, var)) in rows.into_iter().enumerate() {
            for (j, x) in row.into_iter().enumerate() {
                g[(i, j)] = x;
            }
            y[i] = value;
            v[i] = var;
        }
        LinearObservations {
            rows: g,
            values: y,
            noise_var: v,
        }
    }
}

/// Prior covariance, its factor and the observation system, ready to produce
/// conditional moments or pathwise conditional draws.
pub struct GaussianConditioner<'a> {
    prior_cov: &'a DMatrix<f64>,
    prior_factor: &'a CovFactor,
    obs: &'a LinearObservations,
    cross: DMatrix<f64>,
    innov: Option<CovFactor>,
}

impl<'a> GaussianConditioner<'a> {
    pub fn new(
        prior_cov: &'a DMatrix<f64>,
        prior_factor: &'a CovFactor,
        obs: &'a LinearObservations,
    ) -> Result<Self> {
        if obs.rows.ncols() != prior_cov.nrows() {
            return Err(Error::Dimension("observation rows vs prior size".into()));
        }
        if obs.is_empty() {
            return Ok(GaussianConditioner {
                prior_cov,
                prior_factor,
                obs,
                cross: DMatrix::zeros(prior_cov.nrows(), 0),
                innov: None,
            });
        }
        // C Gᵀ  (m × r)
        let cross = prior_cov * obs.rows.transpose();
        let mut s = &obs.rows * &cross;
        for i in 0..s.nrows() {
            s[(i, i)] += obs.noise_var[i];
        }
        symmetrize(&mut s);
        let scale = (0..s.nrows()).map(|i| s[(i, i)]).fold(0.0f64, f64::max);
        let innov = cholesky_escalating(&s, 0.0, 1e-8 * scale.max(1e-300))?;
        Ok(GaussianConditioner {
            prior_cov,
            prior_factor,
            obs,
            cross,
            innov: Some(innov),
        })
    }

    pub fn mean(&self) -> DVector<f64> {
        match &self.innov {
            None => DVector::zeros(self.prior_cov.nrows()),
            Some(f) => &self.cross * f.solve(&self.obs.values),
        }
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        match &self.innov {
            None => self.prior_cov.clone(),
            Some(f) => {
                let mut c = self.prior_cov - &self.cross * f.solve_mat(&self.cross.transpose());
                symmetrize(&mut c);
                c
            }
        }
    }

    /// Draw from the conditional by perturbing a prior draw (Matheron's rule);
    /// never factorises the conditional covariance itself.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let f = self.prior_factor.sample(rng);
        match &self.innov {
            None => f,
            Some(innov) => {
                let r = self.obs.len();
                let noise = DVector::from_iterator(
                    r,
                    (0..r).map(|i| {
                        self.obs.noise_var[i].sqrt() * rng.sample::<f64, _>(StandardNormal)
                    }),
                );
                let resid = &self.obs.values - &self.obs.rows * &f - noise;
                f + &self.cross * innov.solve(&resid)
            }
        }
    }
}
