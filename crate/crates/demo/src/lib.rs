//! Browser demo for `nemo-core`. Each operation is a plain function returning
//! JSON so it can be tested natively; the `#[wasm_bindgen]` wrappers only
//! forward arguments and turn errors into strings.

use nalgebra::DMatrix;
use nemo_core::analysis::{align_draws, select_num_factors, simultaneous_band, BandMode};
use nemo_core::kernels::{JitterPolicy, SEKernelParams};
use nemo_core::model::{simulate_ffa, SimConfig};
use nemo_core::nemo::{sample_nemo_conditional, sample_nemo_joint};
use nemo_core::rng::stream;
use nemo_core::sampler::{Chain, ModelKind};
use nemo_core::{ChainConfig, Grid, PriorConfig};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const GRID_POINTS: usize = 40;

#[derive(Debug, Serialize)]
pub struct PriorPair {
    pub grid: Vec<f64>,
    pub lambda_1: Vec<f64>,
    pub lambda_2: Vec<f64>,
    /// `⟨λ₁, λ₂⟩ / (‖λ₁‖ ‖λ₂‖)`.
    pub cosine: f64,
}

#[derive(Debug, Serialize)]
pub struct CurvePoint {
    pub log10_nu: f64,
    pub median_abs_cosine: f64,
}

#[derive(Debug, Serialize)]
pub struct Band {
    pub lower: Vec<f64>,
    pub mean: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct KeptLoading {
    pub band: Band,
    /// The true loading closest to this one, sign-matched, if any.
    pub truth: Option<Vec<f64>>,
}

#[derive(Debug, Serialize)]
pub struct FitSummary {
    pub grid: Vec<f64>,
    pub mu_truth: Vec<f64>,
    pub mu_band: Band,
    pub k_fitted: usize,
    pub k_selected: usize,
    pub loadings: Vec<KeptLoading>,
}

fn cosine(grid: &Grid, f: &[f64], g: &[f64]) -> nemo_core::Result<f64> {
    let denom = grid.norm(f) * grid.norm(g);
    Ok(if denom > 0.0 { grid.inner(f, g)? / denom } else { 0.0 })
}

fn demo_grid() -> nemo_core::Result<Grid> {
    Grid::uniform(0.0, 1.0, GRID_POINTS)
}

fn check_log10_nu(v: f64) -> nemo_core::Result<f64> {
    if !(-8.0..=4.0).contains(&v) {
        return Err(nemo_core::Error::Config(format!("log10 nu must lie in [-8, 4], got {v}")));
    }
    Ok(10f64.powf(v))
}

/// One prior draw of `λ₁ ~ GP(0, C)` and `λ₂ | λ₁` under the orthogonality
/// penalty with strength `ν = 10^log10_nu`.
pub fn prior_pair(log10_nu: f64, len_sq: f64, seed: u64) -> nemo_core::Result<PriorPair> {
    let nu = check_log10_nu(log10_nu)?;
    let grid = demo_grid()?;
    let kernel = SEKernelParams::new(1.0, len_sq)?;
    let policy = JitterPolicy::default();
    let cov = nemo_core::kernels::GpCovariance::new(&grid, kernel, &policy)?;
    let mut rng = stream(seed, 0);
    let empty = DMatrix::zeros(0, grid.len());
    let lambda_1 = sample_nemo_conditional(&cov, &empty, &grid, nu, &mut rng)?;
    let first = DMatrix::from_row_slice(1, grid.len(), &lambda_1);
    let lambda_2 = sample_nemo_conditional(&cov, &first, &grid, nu, &mut rng)?;
    Ok(PriorPair {
        cosine: cosine(&grid, &lambda_1, &lambda_2)?,
        grid: grid.points().to_vec(),
        lambda_1,
        lambda_2,
    })
}

/// Median `|cos|` between two jointly drawn loadings for each `ν` on an even
/// log grid from `10^lo` to `10^hi`.
pub fn orthogonality_curve(lo: f64, hi: f64, steps: usize, draws: usize, seed: u64) -> nemo_core::Result<Vec<CurvePoint>> {
    check_log10_nu(lo)?;
    check_log10_nu(hi)?;
    if steps < 2 || draws == 0 || hi <= lo {
        return Err(nemo_core::Error::Config("need steps >= 2, draws >= 1 and hi > lo".into()));
    }
    let grid = demo_grid()?;
    let kernels = vec![SEKernelParams::new(1.0, 0.4)?; 2];
    let policy = JitterPolicy::default();
    (0..steps)
        .map(|s| {
            let log10_nu = lo + (hi - lo) * s as f64 / (steps - 1) as f64;
            let nu = 10f64.powf(log10_nu);
            let mut rng = stream(seed, s as u64);
            let mut vals = (0..draws)
                .map(|_| {
                    let set = sample_nemo_joint(&kernels, &grid, nu, 5, &policy, &mut rng)?;
                    Ok(cosine(&grid, &set.row(0), &set.row(1))?.abs())
                })
                .collect::<nemo_core::Result<Vec<f64>>>()?;
            vals.sort_by(f64::total_cmp);
            let mid = vals.len() / 2;
            let median = if vals.len() % 2 == 1 { vals[mid] } else { 0.5 * (vals[mid - 1] + vals[mid]) };
            Ok(CurvePoint { log10_nu, median_abs_cosine: median })
        })
        .collect()
}

fn band_of(draws: &[Vec<f64>]) -> nemo_core::Result<Band> {
    let b = simultaneous_band(draws, 0.95)?;
    Ok(Band { lower: b.lower, mean: b.mean, upper: b.upper })
}

/// Simulate a small continuous dataset with `k_true` factors, fit it with
/// `k_fit` factors and report the mean band and the kept loadings.
pub fn fit_demo(
    n: usize,
    k_true: usize,
    k_fit: usize,
    log10_nu: f64,
    n_iter: usize,
    seed: u64,
) -> nemo_core::Result<FitSummary> {
    let nu = check_log10_nu(log10_nu)?;
    if !(1..=200).contains(&n) || !(1..=4).contains(&k_true) || !(1..=5).contains(&k_fit) {
        return Err(nemo_core::Error::Config("need 1 <= n <= 200, 1 <= k_true <= 4, 1 <= k_fit <= 5".into()));
    }
    if !(50..=5000).contains(&n_iter) {
        return Err(nemo_core::Error::Config("n_iter must lie in [50, 5000]".into()));
    }
    let sim = SimConfig { n, m: 25, k: k_true, sigma_sq: 0.25, ..Default::default() };
    let mut rng = stream(seed, 1);
    let (data, truth) = simulate_ffa(&sim, &mut rng)?;
    let grid = data.grid.clone();
    let prior = PriorConfig { nu_lambda: nu, nu_eta: nu, k_max: k_fit, ..Default::default() };
    let config = ChainConfig {
        n_iter,
        burn_in: n_iter / 2,
        thin: 1,
        seed: nemo_core::rng::mix_seed(seed, 2),
        record_pointwise: false,
        ..Default::default()
    };
    let draws = Chain::new(ModelKind::Ffa, data, None, prior, config, k_fit)?.run()?;
    let aligned = align_draws(&draws)?;
    let selection = select_num_factors(&aligned, 0.95, BandMode::PerFactor)?;

    let truths: Vec<Vec<f64>> = (0..truth.k()).map(|k| truth.lambda.row(k).iter().copied().collect()).collect();
    let mut used = vec![false; truths.len()];
    let mut loadings = Vec::new();
    for (k, keep) in selection.keep.iter().enumerate() {
        if !keep {
            continue;
        }
        let band = &selection.bands[k];
        let mut best: Option<(usize, f64)> = None;
        for (j, t) in truths.iter().enumerate() {
            if used[j] {
                continue;
            }
            let c = grid.inner(&band.mean, t)?;
            if best.is_none_or(|(_, b)| c.abs() > b.abs()) {
                best = Some((j, c));
            }
        }
        let truth = best.map(|(j, c)| {
            used[j] = true;
            let s = if c < 0.0 { -1.0 } else { 1.0 };
            truths[j].iter().map(|v| s * v).collect()
        });
        loadings.push(KeptLoading {
            band: Band { lower: band.lower.clone(), mean: band.mean.clone(), upper: band.upper.clone() },
            truth,
        });
    }
    Ok(FitSummary {
        grid: grid.points().to_vec(),
        mu_truth: truth.mu.clone(),
        mu_band: band_of(&aligned.mu_draws())?,
        k_fitted: k_fit,
        k_selected: selection.k_selected,
        loadings,
    })
}

fn to_js<T: Serialize>(r: nemo_core::Result<T>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = priorPair)]
pub fn prior_pair_js(log10_nu: f64, len_sq: f64, seed: u32) -> Result<String, JsError> {
    to_js(prior_pair(log10_nu, len_sq, seed as u64))
}

#[wasm_bindgen(js_name = orthogonalityCurve)]
pub fn orthogonality_curve_js(lo: f64, hi: f64, steps: u32, draws: u32, seed: u32) -> Result<String, JsError> {
    to_js(orthogonality_curve(lo, hi, steps as usize, draws as usize, seed as u64))
}

#[wasm_bindgen(js_name = fitDemo)]
pub fn fit_demo_js(n: u32, k_true: u32, k_fit: u32, log10_nu: f64, n_iter: u32, seed: u32) -> Result<String, JsError> {
    to_js(fit_demo(n as usize, k_true as usize, k_fit as usize, log10_nu, n_iter as usize, seed as u64))
}
