//! Replicated simulation studies: generate, fit, post-process and score each
//! replicate, then aggregate. Replicates run on a bounded rayon pool; replicate
//! `r` draws everything from the master seed XOR `r`, so results do not
//! depend on scheduling.

use nalgebra::DMatrix;
use nemo_core::analysis::{align_draws, pointwise_mean, select_num_factors, effective_sample_size, mise, AlignedDraws, BandMode};
use nemo_core::kernels::{sample_gp, JitterPolicy};
use nemo_core::model::{normal_cdf, sample_eta_column, simulate_ffa, simulate_gffa_binary, simulate_latent_regression, sparsify, observe_complete, SimConfig};
use nemo_core::rng::{mix_seed, stream};
use nemo_core::sampler::{run_ffa_chain, run_gffa_chain, run_regression_chain, ChainConfig, PosteriorDraws};
use nemo_core::{DataKind, FFAState, Grid, PriorConfig, SparseFunctionalDataset};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

use crate::config::{RunConfig, Scenario};
use crate::error::{CliError, CliResult};
use crate::io::{fmt_f64, write_dataset_to, write_text};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySpec {
    pub scenario: Scenario,
    pub replicates: usize,
    pub sparsity_levels: Vec<f64>,
    pub generator: SimConfig,
    pub prior: PriorConfig,
    pub chain: ChainConfig,
    /// Factors fitted per replicate.
    pub k_fit: usize,
    pub band_level: f64,
    pub band_mode: BandMode,
    pub nu_values: Vec<f64>,
    pub master_seed: u64,
    pub traces: bool,
}

impl StudySpec {
    /// Desk-scale defaults for `scenario`: 50 subjects on 30 grid points.
    pub fn desk(scenario: Scenario) -> Self {
        let base = match scenario {
            Scenario::GffaBinary => SimConfig::binary(),
            Scenario::Regression => SimConfig::regression(),
            Scenario::NuSensitivity => SimConfig { t_max: std::f64::consts::PI, ..SimConfig::default() },
            Scenario::Ffa => SimConfig::default(),
        };
        let generator = SimConfig { n: 50, m: 30, ..base };
        let prior = PriorConfig::default();
        StudySpec {
            scenario,
            replicates: 20,
            sparsity_levels: vec![0.25, 0.5, 0.75],
            k_fit: if scenario == Scenario::Regression { generator.k } else { prior.k_max },
            generator,
            prior,
            chain: ChainConfig::default(),
            band_level: 0.95,
            band_mode: BandMode::PerFactor,
            nu_values: vec![100.0, 1.0, 0.01, 1e-4, 1e-6, 1e-8],
            master_seed: 1,
            traces: false,
        }
    }

    /// Study settings from a run configuration. The generator keeps the
    /// scenario's kernel defaults; `n`, `m`, `sigma_sq`, `nu_*` and the
    /// number of covariates come from `cfg.simulate`.
    pub fn from_config(cfg: &RunConfig) -> Self {
        let mut s = Self::desk(cfg.study.scenario);
        let g = &cfg.simulate;
        s.generator.n = g.n;
        s.generator.m = g.m;
        s.generator.sigma_sq = g.sigma_sq;
        s.generator.nu_lambda = g.nu_lambda;
        s.generator.nu_eta = g.nu_eta;
        s.generator.n_covariates = g.n_covariates;
        if cfg.study.scenario != Scenario::Regression {
            s.generator.k = g.k;
        }
        s.replicates = cfg.study.replicates;
        s.sparsity_levels = cfg.study.sparsity_levels.clone();
        s.nu_values = cfg.study.nu_values.clone();
        s.prior = cfg.prior;
        s.chain = cfg.chain.clone();
        s.k_fit = if s.scenario == Scenario::Regression { s.generator.k } else { cfg.prior.k_max };
        s.band_level = cfg.summary.band_level;
        s.band_mode = cfg.summary.band_mode;
        s.master_seed = cfg.chain.seed;
        s.traces = cfg.study.traces;
        s
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.replicates == 0 {
            return Err(CliError::Usage("replicate count must be at least 1".into()));
        }
        if self.sparsity_levels.is_empty() || self.sparsity_levels.iter().any(|s| !(0.0..1.0).contains(s)) {
            return Err(CliError::Usage("sparsity levels must be a nonempty subset of [0, 1)".into()));
        }
        if self.k_fit == 0 {
            return Err(CliError::Usage("k_fit must be at least 1".into()));
        }
        self.generator.validate()?;
        self.prior.validate()?;
        self.chain.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub replicate: usize,
    pub sparsity: f64,
    pub quantity: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub sparsity: f64,
    pub quantity: String,
    pub count: usize,
    pub mean: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub replicate: usize,
    pub sparsity: f64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub rows: Vec<ReplicateRow>,
    pub summary: Vec<SummaryRow>,
    pub failures: Vec<Failure>,
}

impl StudyReport {
    /// Summary row for `quantity` at `sparsity`.
    pub fn get(&self, sparsity: f64, quantity: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.sparsity == sparsity && r.quantity == quantity)
    }

    /// Replicate-level values of `quantity` at `sparsity`.
    pub fn values(&self, sparsity: f64, quantity: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.sparsity == sparsity && r.quantity == quantity)
            .map(|r| r.value)
            .collect()
    }
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Aggregate replicate rows per (sparsity, quantity), in first-seen order.
pub fn aggregate(rows: &[ReplicateRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(f64, String)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|(s, q)| *s == r.sparsity && *q == r.quantity) {
            keys.push((r.sparsity, r.quantity.clone()));
        }
    }
    keys.into_iter()
        .map(|(s, q)| {
            let mut v: Vec<f64> = rows
                .iter()
                .filter(|r| r.sparsity == s && r.quantity == q && r.value.is_finite())
                .map(|r| r.value)
                .collect();
            v.sort_by(f64::total_cmp);
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            SummaryRow {
                sparsity: s,
                quantity: q,
                count: v.len(),
                mean,
                q25: quantile(&v, 0.25),
                median: quantile(&v, 0.5),
                q75: quantile(&v, 0.75),
            }
        })
        .collect()
}

/// Greedy match of each truth loading to the estimated loading with the
/// largest `|⟨·,·⟩|`; returns `(estimate index, sign)` per truth row.
pub fn match_loadings(estimates: &[Vec<f64>], truth: &DMatrix<f64>, grid: &Grid) -> Vec<Option<(usize, f64)>> {
    let mut used = vec![false; estimates.len()];
    let mut pairs: Vec<(f64, usize, usize, f64)> = Vec::new();
    for k in 0..truth.nrows() {
        let t: Vec<f64> = truth.row(k).iter().copied().collect();
        for (j, e) in estimates.iter().enumerate() {
            let ip = grid.inner(e, &t).unwrap_or(0.0);
            pairs.push((ip.abs(), k, j, if ip < 0.0 { -1.0 } else { 1.0 }));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![None; truth.nrows()];
    for (_, k, j, s) in pairs {
        if out[k].is_none() && !used[j] {
            out[k] = Some((j, s));
            used[j] = true;
        }
    }
    out
}

fn mean_loadings(aligned: &AlignedDraws) -> Vec<Vec<f64>> {
    (0..aligned.k()).map(|k| pointwise_mean(&aligned.loading_draws(k))).collect()
}

fn fit(spec: &StudySpec, data: &SparseFunctionalDataset, x: Option<&DMatrix<f64>>, seed: u64) -> CliResult<PosteriorDraws> {
    let chain = ChainConfig { seed, ..spec.chain.clone() };
    let prior = PriorConfig { k_max: spec.k_fit, ..spec.prior };
    Ok(match (spec.scenario, x) {
        (Scenario::GffaBinary, _) => run_gffa_chain(data, &prior, &chain, spec.k_fit)?,
        (Scenario::Regression, Some(x)) => run_regression_chain(data, x, &prior, &chain, spec.k_fit)?,
        _ => run_ffa_chain(data, &prior, &chain, spec.k_fit)?,
    })
}

fn score(
    spec: &StudySpec,
    draws: &PosteriorDraws,
    truth: &FFAState,
    grid: &Grid,
) -> CliResult<Vec<(String, f64)>> {
    let aligned = align_draws(draws)?;
    let sel = select_num_factors(&aligned, spec.band_level, spec.band_mode)?;
    let mut out = vec![("k_selected".to_string(), sel.k_selected as f64)];
    out.push(("mise_mu".into(), mise(&pointwise_mean(&aligned.mu_draws()), &truth.mu, grid)?));
    let est = mean_loadings(&aligned);
    let matched = match_loadings(&est, &truth.lambda, grid);
    for (k, m) in matched.iter().enumerate() {
        let truth_k: Vec<f64> = truth.lambda.row(k).iter().copied().collect();
        let v = match m {
            Some((j, s)) => mise(&est[*j].iter().map(|v| s * v).collect::<Vec<_>>(), &truth_k, grid)?,
            None => f64::NAN,
        };
        out.push((format!("mise_lambda_{}", k + 1), v));
    }
    let n = truth.n();
    let mut f_sum = 0.0;
    let mut p_sum = 0.0;
    for i in 0..n {
        let draws_i = aligned.fitted_draws(i);
        let f_true = truth.fitted(i);
        f_sum += mise(&pointwise_mean(&draws_i), &f_true, grid)?;
        if spec.scenario == Scenario::GffaBinary {
            let probs: Vec<Vec<f64>> = draws_i.iter().map(|d| d.iter().map(|v| normal_cdf(*v)).collect()).collect();
            let p_true: Vec<f64> = f_true.iter().map(|v| normal_cdf(*v)).collect();
            p_sum += mise(&pointwise_mean(&probs), &p_true, grid)?;
        }
    }
    out.push(("mise_f".into(), f_sum / n as f64));
    if spec.scenario == Scenario::GffaBinary {
        out.push(("mise_prob".into(), p_sum / n as f64));
    }
    if let (Scenario::Regression, Some(theta)) = (spec.scenario, &truth.theta) {
        for (k, m) in matched.iter().enumerate() {
            for q in 0..theta.ncols() {
                let hit = match m {
                    Some((j, s)) => {
                        let mut v: Vec<f64> = aligned
                            .states
                            .iter()
                            .filter_map(|st| st.theta.as_ref().map(|t| s * t[(*j, q)]))
                            .collect();
                        v.sort_by(f64::total_cmp);
                        let lo = quantile(&v, 0.025);
                        let hi = quantile(&v, 0.975);
                        out.push((format!("theta_{}_{}_width", k + 1, q + 1), hi - lo));
                        (lo <= theta[(k, q)] && theta[(k, q)] <= hi) as u8 as f64
                    }
                    None => f64::NAN,
                };
                out.push((format!("theta_{}_{}_covered", k + 1, q + 1), hit));
            }
        }
    }
    Ok(out)
}

fn write_trace(dir: &Path, r: usize, sparsity: f64, draws: &PosteriorDraws) -> CliResult<()> {
    let tdir = dir.join("traces");
    fs::create_dir_all(&tdir).map_err(|e| CliError::data(tdir.display(), e))?;
    let k = draws.k();
    let mut s = String::from("draw,loglik,sigma_sq");
    for j in 0..k {
        s.push_str(&format!(",lambda_{}_norm", j + 1));
    }
    s.push('\n');
    for (d, st) in draws.states.iter().enumerate() {
        s.push_str(&format!("{d},{},{}", fmt_f64(draws.saved_loglik[d]), fmt_f64(st.sigma_sq)));
        for j in 0..k {
            let norm = st.lambda.row(j).norm() * st.psi[j].sqrt();
            s.push_str(&format!(",{}", fmt_f64(norm)));
        }
        s.push('\n');
    }
    write_text(&tdir.join(format!("replicate_{r}_sparsity_{sparsity}.csv")), &s)
}

type ReplicateOutcome = (Vec<ReplicateRow>, Vec<Failure>);

fn run_replicate(spec: &StudySpec, r: usize, trace_dir: Option<&Path>) -> ReplicateOutcome {
    let seed = spec.master_seed ^ r as u64;
    let full_cfg = SimConfig { sparsity: 0.0, ..spec.generator.clone() };
    let mut gen = stream(seed, 0);
    let generated = match spec.scenario {
        Scenario::GffaBinary => simulate_gffa_binary(&full_cfg, &mut gen),
        Scenario::Regression => simulate_latent_regression(&full_cfg, &mut gen),
        _ => simulate_ffa(&full_cfg, &mut gen),
    };
    let fail = |s: f64, e: &dyn std::fmt::Display| Failure { replicate: r, sparsity: s, message: e.to_string() };
    let (full, truth) = match generated {
        Ok(v) => v,
        Err(e) => return (vec![], spec.sparsity_levels.iter().map(|&s| fail(s, &e)).collect()),
    };
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (li, &level) in spec.sparsity_levels.iter().enumerate() {
        // same deletion stream at every level, so the observed sets are nested
        let outcome = sparsify(&full, level, &mut stream(seed, 1))
            .map_err(CliError::from)
            .and_then(|data| fit(spec, &data, truth.covariates.as_ref(), mix_seed(seed, 2 + li as u64)))
            .and_then(|draws| {
                if let Some(dir) = trace_dir {
                    write_trace(dir, r, level, &draws)?;
                }
                score(spec, &draws, &truth, &full.grid)
            });
        match outcome {
            Ok(scores) => rows.extend(scores.into_iter().map(|(quantity, value)| ReplicateRow {
                replicate: r,
                sparsity: level,
                quantity,
                value,
            })),
            Err(e) => failures.push(fail(level, &e)),
        }
    }
    (rows, failures)
}

fn pool(parallelism: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

/// Run every replicate and aggregate. `parallelism` 0 uses all cores. When
/// `out` is given, `replicates.csv`, `study_summary.csv` and `failures.csv`
/// are written there.
pub fn run_study(spec: &StudySpec, parallelism: usize, out: Option<&Path>) -> CliResult<StudyReport> {
    spec.validate()?;
    if spec.scenario == Scenario::NuSensitivity {
        return Err(CliError::Usage("use run_nu_sensitivity for the nu-sensitivity scenario".into()));
    }
    let trace_dir = if spec.traces { out } else { None };
    let outcomes: Vec<ReplicateOutcome> =
        pool(parallelism)?.install(|| (0..spec.replicates).into_par_iter().map(|r| run_replicate(spec, r, trace_dir)).collect());
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (r, f) in outcomes {
        rows.extend(r);
        failures.extend(f);
    }
    let report = StudyReport { summary: aggregate(&rows), rows, failures };
    if let Some(dir) = out {
        write_study(dir, &report)?;
    }
    Ok(report)
}

pub fn write_study(dir: &Path, report: &StudyReport) -> CliResult<()> {
    let mut s = String::from("replicate,sparsity,quantity,value\n");
    for r in &report.rows {
        s.push_str(&format!("{},{},{},{}\n", r.replicate, fmt_f64(r.sparsity), r.quantity, fmt_f64(r.value)));
    }
    write_text(&dir.join("replicates.csv"), &s)?;
    let mut s = String::from("sparsity,quantity,count,mean,q25,median,q75\n");
    for r in &report.summary {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            fmt_f64(r.sparsity),
            r.quantity,
            r.count,
            fmt_f64(r.mean),
            fmt_f64(r.q25),
            fmt_f64(r.median),
            fmt_f64(r.q75)
        ));
    }
    write_text(&dir.join("study_summary.csv"), &s)?;
    let mut s = String::from("replicate,sparsity,message\n");
    for f in &report.failures {
        s.push_str(&format!("{},{},\"{}\"\n", f.replicate, fmt_f64(f.sparsity), f.message.replace('"', "'")));
    }
    write_text(&dir.join("failures.csv"), &s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuRow {
    pub nu_lambda: f64,
    /// 1-based index of the true loading.
    pub factor: usize,
    pub ess: f64,
    pub mean_norm: f64,
    pub sd_norm: f64,
    pub true_norm: f64,
    pub data_sha256: String,
}

/// The fixed sensitivity dataset: `λ₁ = sin t`, `λ₂ = ½ sin 2t` on the
/// generator's domain, GP mean, factors from the sum-relaxed prior.
pub fn nu_dataset(spec: &StudySpec) -> CliResult<(SparseFunctionalDataset, FFAState)> {
    let g = &spec.generator;
    let grid = Grid::uniform(g.t_min, g.t_max, g.m)?;
    let mut rng = stream(spec.master_seed, 0);
    let mu = sample_gp(&grid, &g.mu_kernel, &JitterPolicy::default(), &mut rng)?;
    let t = grid.points();
    let lambda = DMatrix::from_fn(2, g.m, |k, l| if k == 0 { t[l].sin() } else { 0.5 * (2.0 * t[l]).sin() });
    let mut eta = DMatrix::zeros(g.n, 2);
    for k in 0..2 {
        eta.column_mut(k).copy_from_slice(&sample_eta_column(g.n, g.nu_eta, 1.0, &mut rng));
    }
    let truth = FFAState {
        mu,
        lambda,
        eta,
        psi: vec![1.0; 2],
        sigma_sq: g.sigma_sq,
        mu_kernel: g.mu_kernel,
        loading_kernels: vec![g.loading_kernel; 2],
        theta: None,
        covariates: None,
    };
    let full = observe_complete(&grid, &truth, DataKind::Continuous, &mut rng)?;
    Ok((sparsify(&full, g.sparsity, &mut rng)?, truth))
}

fn data_hash(data: &SparseFunctionalDataset) -> CliResult<String> {
    let mut buf = Vec::new();
    write_dataset_to(data, &mut buf)?;
    Ok(hex::encode(Sha256::digest(&buf)))
}

/// ESS of `‖λₖ‖₂` for the two true loadings at each penalty. Every penalty
/// regenerates the dataset from the master seed and runs the chain from the
/// same seed; only `ν_λ` differs.
pub fn run_nu_sensitivity(spec: &StudySpec, parallelism: usize, out: Option<&Path>) -> CliResult<Vec<NuRow>> {
    spec.validate()?;
    let per_nu = |&nu: &f64| -> CliResult<Vec<NuRow>> {
        let (data, truth) = nu_dataset(spec)?;
        let hash = data_hash(&data)?;
        let prior = PriorConfig { nu_lambda: nu, k_max: spec.k_fit, ..spec.prior };
        let chain = ChainConfig { seed: spec.master_seed, ..spec.chain.clone() };
        let draws = run_ffa_chain(&data, &prior, &chain, spec.k_fit)?;
        let aligned = align_draws(&draws)?;
        let matched = match_loadings(&mean_loadings(&aligned), &truth.lambda, &data.grid);
        let mut rows = Vec::new();
        for (k, m) in matched.iter().enumerate() {
            let true_norm = truth.lambda.row(k).norm();
            let (j, _) = m.ok_or_else(|| CliError::Usage("k_fit must be at least 2".into()))?;
            let norms: Vec<f64> = aligned.loading_draws(j).iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
            let mean = norms.iter().sum::<f64>() / norms.len() as f64;
            let sd = (norms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (norms.len() as f64 - 1.0).max(1.0)).sqrt();
            rows.push(NuRow {
                nu_lambda: nu,
                factor: k + 1,
                ess: effective_sample_size(&norms)?.ess,
                mean_norm: mean,
                sd_norm: sd,
                true_norm,
                data_sha256: hash.clone(),
            });
        }
        Ok(rows)
    };
    let results: Vec<CliResult<Vec<NuRow>>> = pool(parallelism)?.install(|| spec.nu_values.par_iter().map(per_nu).collect());
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    if let Some(dir) = out {
        let mut s = String::from("nu_lambda,factor,ess,mean_norm,sd_norm,true_norm,data_sha256\n");
        for r in &rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                fmt_f64(r.nu_lambda),
                r.factor,
                fmt_f64(r.ess),
                fmt_f64(r.mean_norm),
                fmt_f64(r.sd_norm),
                fmt_f64(r.true_norm),
                r.data_sha256
            ));
        }
        write_text(&dir.join("ess_by_nu.csv"), &s)?;
    }
    Ok(rows)
}
