//! Post-processing of saved draws: label/sign alignment, simultaneous
//! credible bands, factor selection, effective sample size, WAIC, MISE and
//! posterior predictive statistics.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::{FFAState, SparseFunctionalDataset};
use crate::sampler::PosteriorDraws;

/// Remove the working scale: `λ* = λ√ψ`, `η* = η/√ψ`, `Θ* = Θ/√ψ`, `ψ = 1`.
pub fn rescale(state: &FFAState) -> FFAState {
    let mut s = state.clone();
    for k in 0..s.k() {
        let r = state.psi[k].sqrt();
        s.lambda.row_mut(k).scale_mut(r);
        s.eta.column_mut(k).unscale_mut(r);
        if let Some(th) = s.theta.as_mut() {
            th.row_mut(k).unscale_mut(r);
        }
        s.psi[k] = 1.0;
    }
    s
}

/// Reorder and sign-flip factors: new factor `k` is old factor `perm[k]`
/// times `signs[k]`, applied jointly to loadings, scores, coefficients,
/// expansion scales and kernels.
pub fn permute_factors(state: &FFAState, perm: &[usize], signs: &[f64]) -> FFAState {
    let k = perm.len();
    let lambda = DMatrix::from_fn(k, state.m(), |r, c| signs[r] * state.lambda[(perm[r], c)]);
    let eta = DMatrix::from_fn(state.n(), k, |r, c| signs[c] * state.eta[(r, perm[c])]);
    FFAState {
        mu: state.mu.clone(),
        lambda,
        eta,
        psi: perm.iter().map(|&p| state.psi[p]).collect(),
        sigma_sq: state.sigma_sq,
        mu_kernel: state.mu_kernel,
        loading_kernels: perm.iter().map(|&p| state.loading_kernels[p]).collect(),
        theta: state
            .theta
            .as_ref()
            .map(|t| DMatrix::from_fn(k, t.ncols(), |r, c| signs[r] * t[(perm[r], c)])),
        covariates: state.covariates.clone(),
    }
}

/// Draws after alignment to a pivot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedDraws {
    pub grid: Grid,
    /// Aligned states on the sampler's scale.
    pub raw: Vec<FFAState>,
    /// Aligned states with `ψ` absorbed (what summaries report).
    pub states: Vec<FFAState>,
    pub permutations: Vec<Vec<usize>>,
    pub signs: Vec<Vec<f64>>,
    pub pivot: usize,
    pub covariates: Option<DMatrix<f64>>,
}

impl AlignedDraws {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn k(&self) -> usize {
        self.states.first().map_or(0, |s| s.k())
    }

    /// Draws of the rescaled loading `k`.
    pub fn loading_draws(&self, k: usize) -> Vec<Vec<f64>> {
        self.states.iter().map(|s| s.lambda.row(k).iter().copied().collect()).collect()
    }

    pub fn mu_draws(&self) -> Vec<Vec<f64>> {
        self.states.iter().map(|s| s.mu.clone()).collect()
    }

    pub fn fitted_draws(&self, subject: usize) -> Vec<Vec<f64>> {
        self.raw.iter().map(|s| s.fitted(subject)).collect()
    }

    /// Posterior mean of subject `subject`'s trajectory on the grid.
    pub fn fitted_mean(&self, subject: usize) -> Vec<f64> {
        pointwise_mean(&self.fitted_draws(subject))
    }

    /// Draws of `Λ*ᵀθ*_q`, the effect of covariate `q` on the trajectory.
    pub fn theta_effect_draws(&self, q: usize) -> Vec<Vec<f64>> {
        self.states
            .iter()
            .filter_map(|s| {
                let th = s.theta.as_ref()?;
                let col = th.column(q);
                Some((s.lambda.transpose() * col).as_slice().to_vec())
            })
            .collect()
    }
}

pub fn pointwise_mean(draws: &[Vec<f64>]) -> Vec<f64> {
    let m = draws.first().map_or(0, |d| d.len());
    let n = draws.len() as f64;
    (0..m).map(|l| draws.iter().map(|d| d[l]).sum::<f64>() / n).collect()
}

/// Pivot on the highest-log-likelihood draw; match every draw's factors to
/// the pivot greedily by the largest `|⟨λ*ⱼ, λ*ₖ,pivot⟩|`, then flip signs to
/// make each matched inner product nonnegative.
pub fn align_draws(draws: &PosteriorDraws) -> Result<AlignedDraws> {
    if draws.is_empty() {
        return Err(Error::Config("alignment needs at least one saved draw".into()));
    }
    let pivot = draws
        .saved_loglik
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0;
    let grid = &draws.grid;
    let piv = rescale(&draws.states[pivot]);
    let k = piv.k();
    let mut raw = Vec::with_capacity(draws.len());
    let mut states = Vec::with_capacity(draws.len());
    let mut permutations = Vec::with_capacity(draws.len());
    let mut signs = Vec::with_capacity(draws.len());
    for s in &draws.states {
        let scaled = rescale(s);
        let mut ip = DMatrix::zeros(k, k);
        for j in 0..k {
            let a: Vec<f64> = scaled.lambda.row(j).iter().copied().collect();
            for p in 0..k {
                let b: Vec<f64> = piv.lambda.row(p).iter().copied().collect();
                ip[(j, p)] = grid.inner_unchecked(&a, &b);
            }
        }
        let mut perm = vec![usize::MAX; k];
        let mut used = vec![false; k];
        for _ in 0..k {
            let mut best = (usize::MAX, usize::MAX, -1.0);
            for j in (0..k).filter(|&j| !used[j]) {
                for p in (0..k).filter(|&p| perm[p] == usize::MAX) {
                    let v = ip[(j, p)].abs();
                    if v > best.2 {
                        best = (j, p, v);
                    }
                }
            }
            used[best.0] = true;
            perm[best.1] = best.0;
        }
        let sg: Vec<f64> = (0..k).map(|p| if ip[(perm[p], p)] < 0.0 { -1.0 } else { 1.0 }).collect();
        let aligned = permute_factors(s, &perm, &sg);
        states.push(rescale(&aligned));
        raw.push(aligned);
        permutations.push(perm);
        signs.push(sg);
    }
    if let Some(x) = &draws.covariates {
        for s in raw.iter_mut().chain(states.iter_mut()) {
            s.covariates = Some(x.clone());
        }
    }
    Ok(AlignedDraws {
        grid: grid.clone(),
        raw,
        states,
        permutations,
        signs,
        pivot,
        covariates: draws.covariates.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CredibleBand {
    pub lower: Vec<f64>,
    pub mean: Vec<f64>,
    pub upper: Vec<f64>,
    pub level: f64,
}

impl CredibleBand {
    pub fn excludes_zero(&self) -> bool {
        self.lower.iter().zip(&self.upper).any(|(l, u)| *l > 0.0 || *u < 0.0)
    }

    pub fn contains(&self, f: &[f64]) -> bool {
        f.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (l, u))| *l <= *v && *v <= *u)
    }
}

/// Pointwise mean and sample standard deviation.
fn mean_sd(draws: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let mean = pointwise_mean(draws);
    let n = draws.len() as f64;
    let sd = (0..mean.len())
        .map(|l| {
            let ss: f64 = draws.iter().map(|d| (d[l] - mean[l]).powi(2)).sum();
            (ss / (n - 1.0)).sqrt()
        })
        .collect();
    (mean, sd)
}

const DEGENERATE_SD: f64 = 1e-12;

fn check_draws(draws: &[Vec<f64>], level: f64) -> Result<usize> {
    if draws.len() < 2 {
        return Err(Error::Config("a band needs at least two draws".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("band level must lie in (0, 1), got {level}")));
    }
    let m = draws[0].len();
    if draws.iter().any(|d| d.len() != m) {
        return Err(Error::Dimension("draws differ in length".into()));
    }
    Ok(m)
}

/// Largest standardised deviation of each draw.
fn max_deviations(draws: &[Vec<f64>], mean: &[f64], sd: &[f64]) -> Vec<f64> {
    draws
        .iter()
        .map(|d| {
            d.iter()
                .zip(mean.iter().zip(sd))
                .filter(|(_, (_, s))| **s >= DEGENERATE_SD)
                .map(|(v, (m, s))| (v - m).abs() / s)
                .fold(0.0, f64::max)
        })
        .collect()
}

/// The `⌈level·N⌉`-th smallest value.
fn order_statistic(mut v: Vec<f64>, level: f64) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let idx = ((level * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
    v[idx]
}

fn band_from(draws: &[Vec<f64>], mean: Vec<f64>, sd: &[f64], q: f64, level: f64) -> CredibleBand {
    let mut lower = Vec::with_capacity(mean.len());
    let mut upper = Vec::with_capacity(mean.len());
    for l in 0..mean.len() {
        if sd[l] < DEGENERATE_SD {
            lower.push(draws.iter().map(|d| d[l]).fold(f64::INFINITY, f64::min));
            upper.push(draws.iter().map(|d| d[l]).fold(f64::NEG_INFINITY, f64::max));
        } else {
            lower.push(mean[l] - q * sd[l]);
            upper.push(mean[l] + q * sd[l]);
        }
    }
    CredibleBand { lower, mean, upper, level }
}

/// Simultaneous band `mean ± q·sd` with `q` the empirical `level` quantile of
/// each draw's maximal standardised deviation.
pub fn simultaneous_band(draws: &[Vec<f64>], level: f64) -> Result<CredibleBand> {
    check_draws(draws, level)?;
    let (mean, sd) = mean_sd(draws);
    let q = order_statistic(max_deviations(draws, &mean, &sd), level);
    Ok(band_from(draws, mean, &sd, q, level))
}

/// Bands for several functions sharing one multiplier: the quantile of the
/// maximal standardised deviation over all functions jointly.
pub fn simultaneous_bands_pooled(sets: &[Vec<Vec<f64>>], level: f64) -> Result<Vec<CredibleBand>> {
    if sets.is_empty() {
        return Ok(vec![]);
    }
    let n = sets[0].len();
    if sets.iter().any(|s| s.len() != n) {
        return Err(Error::Dimension("function sets differ in draw count".into()));
    }
    let mut stats = Vec::with_capacity(sets.len());
    let mut joint = vec![0.0f64; n];
    for s in sets {
        check_draws(s, level)?;
        let (mean, sd) = mean_sd(s);
        for (j, v) in max_deviations(s, &mean, &sd).into_iter().enumerate() {
            joint[j] = joint[j].max(v);
        }
        stats.push((mean, sd));
    }
    let q = order_statistic(joint, level);
    Ok(sets
        .iter()
        .zip(stats)
        .map(|(s, (mean, sd))| band_from(s, mean, &sd, q, level))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BandMode {
    #[default]
    PerFactor,
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSelection {
    pub k_selected: usize,
    pub keep: Vec<bool>,
    pub bands: Vec<CredibleBand>,
}

/// Keep factor `k` iff the simultaneous band of `λ*ₖ` excludes zero at some
/// grid point.
pub fn select_num_factors(aligned: &AlignedDraws, level: f64, mode: BandMode) -> Result<FactorSelection> {
    let sets: Vec<Vec<Vec<f64>>> = (0..aligned.k()).map(|k| aligned.loading_draws(k)).collect();
    let bands = match mode {
        BandMode::PerFactor => sets
            .iter()
            .map(|s| simultaneous_band(s, level))
            .collect::<Result<Vec<_>>>()?,
        BandMode::Pooled => simultaneous_bands_pooled(&sets, level)?,
    };
    let keep: Vec<bool> = bands.iter().map(|b| b.excludes_zero()).collect();
    Ok(FactorSelection { k_selected: keep.iter().filter(|&&k| k).count(), keep, bands })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ess {
    pub ess: f64,
    /// Constant series: autocorrelation undefined, `ess = N` by convention.
    pub degenerate: bool,
}

/// Effective sample size with Geyer's initial positive sequence truncation.
pub fn effective_sample_size(series: &[f64]) -> Result<Ess> {
    let n = series.len();
    if n < 10 {
        return Err(Error::Config(format!("ESS needs at least 10 values, got {n}")));
    }
    let nf = n as f64;
    let mean = series.iter().sum::<f64>() / nf;
    let c: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let gamma0 = c.iter().map(|v| v * v).sum::<f64>() / nf;
    if !(gamma0 > 0.0) {
        return Ok(Ess { ess: nf, degenerate: true });
    }
    let rho = |t: usize| c[..n - t].iter().zip(&c[t..]).map(|(a, b)| a * b).sum::<f64>() / nf / gamma0;
    let mut sum = 0.0;
    let mut m = 0;
    while 2 * m + 1 < n {
        let pair = rho(2 * m) + rho(2 * m + 1);
        if pair <= 0.0 {
            break;
        }
        sum += pair;
        m += 1;
    }
    let tau = (2.0 * sum - 1.0).max(1.0 / nf);
    Ok(Ess { ess: (nf / tau).clamp(1.0, nf), degenerate: false })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waic {
    pub waic: f64,
    pub lppd: f64,
    pub p_waic: f64,
    /// Per-observation contributions `−2(lppdᵢ − pᵢ)`; they sum to `waic`.
    pub pointwise: Vec<f64>,
}

/// WAIC from a draws × observations log-likelihood matrix.
pub fn waic(loglik: &[Vec<f64>]) -> Result<Waic> {
    let s = loglik.len();
    if s < 2 {
        return Err(Error::Config("WAIC needs at least two draws".into()));
    }
    let p = loglik[0].len();
    if loglik.iter().any(|r| r.len() != p) {
        return Err(Error::Dimension("pointwise log-likelihood rows differ in length".into()));
    }
    let sf = s as f64;
    let mut pointwise = Vec::with_capacity(p);
    let (mut lppd, mut pw) = (0.0, 0.0);
    for j in 0..p {
        let col: Vec<f64> = loglik.iter().map(|r| r[j]).collect();
        let mx = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lme = mx + (col.iter().map(|v| (v - mx).exp()).sum::<f64>() / sf).ln();
        let mean = col.iter().sum::<f64>() / sf;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (sf - 1.0);
        lppd += lme;
        pw += var;
        pointwise.push(-2.0 * (lme - var));
    }
    Ok(Waic { waic: -2.0 * (lppd - pw), lppd, p_waic: pw, pointwise })
}

/// Difference `a − b` of two WAICs on the same observations and its standard
/// error `√P · sd(pointwise differences)`.
pub fn waic_difference(a: &Waic, b: &Waic) -> Result<(f64, f64)> {
    let p = a.pointwise.len();
    if p != b.pointwise.len() || p < 2 {
        return Err(Error::Dimension("WAIC comparison needs matching observations (at least two)".into()));
    }
    let d: Vec<f64> = a.pointwise.iter().zip(&b.pointwise).map(|(x, y)| x - y).collect();
    let pf = p as f64;
    let mean = d.iter().sum::<f64>() / pf;
    let sd = (d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (pf - 1.0)).sqrt();
    Ok((a.waic - b.waic, pf.sqrt() * sd))
}

/// `Σ wₗ (estimateₗ − truthₗ)²`.
pub fn mise(estimate: &[f64], truth: &[f64], grid: &Grid) -> Result<f64> {
    if estimate.len() != truth.len() || truth.len() != grid.len() {
        return Err(Error::Dimension("estimate, truth and grid must share a length".into()));
    }
    let diff: Vec<f64> = estimate.iter().zip(truth).map(|(a, b)| a - b).collect();
    Ok(grid.inner_unchecked(&diff, &diff))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictiveStatistic {
    /// `‖yᵢ‖₂` per subject.
    Magnitude,
    /// Cross-sectional mean at each grid point (NaN where nobody is observed).
    PointwiseMean,
    /// `k`-th largest eigenvalue (0-based) of the pairwise-complete covariance.
    CovarianceEigenvalue(usize),
}

fn compute_statistic(data: &SparseFunctionalDataset, values: &[Vec<f64>], stat: PredictiveStatistic) -> Vec<f64> {
    let m = data.m();
    match stat {
        PredictiveStatistic::Magnitude => values.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect(),
        PredictiveStatistic::PointwiseMean => {
            let mut sum = vec![0.0; m];
            let mut cnt = vec![0.0; m];
            for (s, v) in data.subjects.iter().zip(values) {
                for (&l, x) in s.map.indices().iter().zip(v) {
                    sum[l] += x;
                    cnt[l] += 1.0;
                }
            }
            sum.iter().zip(&cnt).map(|(s, c)| if *c > 0.0 { s / c } else { f64::NAN }).collect()
        }
        PredictiveStatistic::CovarianceEigenvalue(k) => {
            let mut full = vec![vec![None; m]; data.n()];
            for (i, (s, v)) in data.subjects.iter().zip(values).enumerate() {
                for (&l, x) in s.map.indices().iter().zip(v) {
                    full[i][l] = Some(*x);
                }
            }
            let mut cov = DMatrix::zeros(m, m);
            for a in 0..m {
                for b in 0..=a {
                    let pairs: Vec<(f64, f64)> = full
                        .iter()
                        .filter_map(|r| Some((r[a]?, r[b]?)))
                        .collect();
                    if pairs.len() < 2 {
                        continue;
                    }
                    let np = pairs.len() as f64;
                    let ma = pairs.iter().map(|p| p.0).sum::<f64>() / np;
                    let mb = pairs.iter().map(|p| p.1).sum::<f64>() / np;
                    let c = pairs.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum::<f64>() / (np - 1.0);
                    cov[(a, b)] = c;
                    cov[(b, a)] = c;
                }
            }
            let mut ev: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
            ev.sort_by(|x, y| y.total_cmp(x));
            vec![ev.get(k).copied().unwrap_or(f64::NAN)]
        }
    }
}

/// For each state, simulate a replicate dataset on the observed index maps
/// and compute `stat`; also return the statistic of the observed data.
pub fn posterior_predictive<R: Rng + ?Sized>(
    states: &[FFAState],
    data: &SparseFunctionalDataset,
    stat: PredictiveStatistic,
    rng: &mut R,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    data.require_kind(crate::model::DataKind::Continuous)?;
    if let PredictiveStatistic::CovarianceEigenvalue(_) = stat {
        if data.n() < 2 {
            return Err(Error::Config("covariance statistic needs at least two subjects".into()));
        }
    }
    let observed: Vec<Vec<f64>> = data.subjects.iter().map(|s| s.values.clone()).collect();
    let obs_stat = compute_statistic(data, &observed, stat);
    let mut reps = Vec::with_capacity(states.len());
    for st in states {
        st.check_shape(data)?;
        if !(st.sigma_sq >= 0.0) {
            return Err(Error::Domain("sigma_sq must be non-negative".into()));
        }
        let sd = st.sigma_sq.sqrt();
        let values: Vec<Vec<f64>> = data
            .subjects
            .iter()
            .enumerate()
            .map(|(i, s)| {
                st.fitted_at(i, &s.map)
                    .into_iter()
                    .map(|f| f + sd * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        reps.push(compute_statistic(data, &values, stat));
    }
    Ok((reps, obs_stat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn identical_draws_give_zero_width_band() {
        let d = vec![vec![1.0, 2.0, 3.0]; 10];
        let b = simultaneous_band(&d, 0.95).unwrap();
        assert_eq!(b.lower, vec![1.0, 2.0, 3.0]);
        assert_eq!(b.upper, vec![1.0, 2.0, 3.0]);
        assert!(simultaneous_band(&d[..1], 0.95).is_err());
    }

    #[test]
    fn band_is_minimal_covering_multiple() {
        let mut rng = seeded(1);
        let draws: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..8).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let b = simultaneous_band(&draws, 0.95).unwrap();
        let inside = draws.iter().filter(|d| b.contains(d)).count();
        assert!(inside as f64 >= 0.95 * 200.0);
        // shrinking the multiplier slightly drops coverage below the level
        let (mean, sd) = mean_sd(&draws);
        let q = (b.upper[0] - mean[0]) / sd[0];
        let smaller = band_from(&draws, mean, &sd, q * (1.0 - 1e-9), 0.95);
        let inside = draws.iter().filter(|d| smaller.contains(d)).count();
        assert!((inside as f64) < 0.95 * 200.0);
    }

    #[test]
    fn max_gaussian_quantile() {
        let mut rng = seeded(2);
        let draws: Vec<Vec<f64>> = (0..10_000)
            .map(|_| (0..20).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let b = simultaneous_band(&draws, 0.95).unwrap();
        let (mean, sd) = mean_sd(&draws);
        let q = (b.upper[3] - mean[3]) / sd[3];
        // P(max|Z| ≤ q) = (2Φ(q) − 1)^20 = 0.95
        let target = 0.95f64.powf(1.0 / 20.0);
        let (mut lo, mut hi) = (2.0, 4.0);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if 2.0 * crate::model::normal_cdf(mid) - 1.0 < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((q - lo).abs() < 0.1, "{q} vs {lo}");
    }

    #[test]
    fn higher_level_band_contains_lower() {
        let mut rng = seeded(3);
        let draws: Vec<Vec<f64>> = (0..300)
            .map(|_| (0..6).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let a = simultaneous_band(&draws, 0.95).unwrap();
        let b = simultaneous_band(&draws, 0.99).unwrap();
        for l in 0..6 {
            assert!(b.lower[l] <= a.lower[l] && a.upper[l] <= b.upper[l]);
        }
    }

    #[test]
    fn ess_examples() {
        let mut rng = seeded(4);
        let iid: Vec<f64> = (0..10_000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let e = effective_sample_size(&iid).unwrap().ess;
        assert!((8000.0..=12000.0).contains(&e), "{e}");
        let mut ar = vec![0.0; 10_000];
        for t in 1..10_000 {
            ar[t] = 0.9 * ar[t - 1] + rng.sample::<f64, _>(StandardNormal);
        }
        let e = effective_sample_size(&ar).unwrap().ess;
        let want = 10_000.0 * 0.1 / 1.9;
        assert!(e > want / 1.5 && e < want * 1.5, "{e}");
        let short = [3.0, 1.0, 4.0, 1.5, 5.0, 9.0, 2.0, 6.0, 5.5, 3.5];
        let e = effective_sample_size(&short).unwrap().ess;
        assert!((1.0..=10.0).contains(&e));
        let c = effective_sample_size(&[2.0; 20]).unwrap();
        assert!(c.degenerate && c.ess == 20.0);
        assert!(effective_sample_size(&[1.0; 5]).is_err());
    }

    #[test]
    fn waic_examples() {
        let w = waic(&vec![vec![-1.2]; 5]).unwrap();
        assert!((w.lppd + 1.2).abs() < 1e-14);
        assert_eq!(w.p_waic, 0.0);
        assert!((w.waic - 2.4).abs() < 1e-14);
        let w2 = waic(&vec![vec![-1.2, -0.7]; 5]).unwrap();
        assert!((w2.waic - (2.4 + 1.4)).abs() < 1e-13);
        assert!(waic(&[vec![-1.0]]).is_err());
    }

    #[test]
    fn waic_difference_hand_oracle() {
        let mut rng = seeded(5);
        let a: Vec<Vec<f64>> = (0..50).map(|_| (0..10).map(|_| -1.0 - rng.random::<f64>()).collect()).collect();
        let b: Vec<Vec<f64>> = (0..50).map(|_| (0..10).map(|_| -1.2 - rng.random::<f64>()).collect()).collect();
        let wa = waic(&a).unwrap();
        let wb = waic(&b).unwrap();
        let (diff, se) = waic_difference(&wa, &wb).unwrap();
        // hand computation, point by point
        let mut d = Vec::new();
        for j in 0..10 {
            let contrib = |m: &Vec<Vec<f64>>| {
                let col: Vec<f64> = m.iter().map(|r| r[j]).collect();
                let lppd = (col.iter().map(|v| v.exp()).sum::<f64>() / 50.0).ln();
                let mean = col.iter().sum::<f64>() / 50.0;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 49.0;
                -2.0 * (lppd - var)
            };
            d.push(contrib(&a) - contrib(&b));
        }
        let mean = d.iter().sum::<f64>() / 10.0;
        let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0).sqrt();
        assert!((diff - d.iter().sum::<f64>()).abs() < 1e-10);
        assert!((se - 10f64.sqrt() * sd).abs() < 1e-10);
    }

    #[test]
    fn waic_order_invariance_and_jensen() {
        let mut rng = seeded(6);
        let mut ll: Vec<Vec<f64>> = (0..40).map(|_| (0..7).map(|_| -2.0 * rng.random::<f64>()).collect()).collect();
        let a = waic(&ll).unwrap();
        ll.reverse();
        let b = waic(&ll).unwrap();
        assert!((a.waic - b.waic).abs() < 1e-12);
        let mean_ll: f64 = ll.iter().flatten().sum::<f64>() / 40.0;
        assert!(a.lppd >= mean_ll);
    }

    #[test]
    fn mise_examples() {
        let g = Grid::uniform(0.0, 1.0, 11).unwrap();
        let f: Vec<f64> = g.points().iter().map(|t| t.sin()).collect();
        assert_eq!(mise(&f, &f, &g).unwrap(), 0.0);
        let shifted: Vec<f64> = f.iter().map(|v| v + 0.3).collect();
        assert!((mise(&shifted, &f, &g).unwrap() - 0.09).abs() < 1e-14);
        assert!(mise(&f[..3], &f, &g).is_err());
        // refinement oracle: ∫(t² − t)² dt = 1/30
        let g = Grid::uniform(0.0, 1.0, 2001).unwrap();
        let e: Vec<f64> = g.points().iter().map(|t| t * t).collect();
        let tr: Vec<f64> = g.points().to_vec();
        assert!((mise(&e, &tr, &g).unwrap() - 1.0 / 30.0).abs() < 1e-6);
    }
}
