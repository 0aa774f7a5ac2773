//! Post-processing of a fitted run into CSV summaries.

use nemo_core::analysis::{
    align_draws, effective_sample_size, select_num_factors, simultaneous_band, waic, AlignedDraws,
};
use nemo_core::model::normal_cdf;
use nemo_core::sampler::{ModelKind, PosteriorDraws};
use nemo_core::SparseFunctionalDataset;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::config::SummaryConfig;
use crate::error::CliResult;
use crate::io::{fmt_f64, write_band, write_json, write_text};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub k_fitted: usize,
    pub k_selected: usize,
    pub keep: Vec<bool>,
    pub pivot: usize,
    pub files: Vec<String>,
}

fn euclid(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn file_safe(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn series_csv(header: &str, values: &[f64]) -> String {
    let mut s = format!("{header},value\n");
    for (i, v) in values.iter().enumerate() {
        s.push_str(&format!("{i},{}\n", fmt_f64(*v)));
    }
    s
}

/// Align, select and write every summary file into `out`. With no kept
/// factor only the mean band, ESS and WAIC tables are written (plus
/// `K_selected` and `summary.json`).
pub fn write_summaries(
    draws: &PosteriorDraws,
    data: &SparseFunctionalDataset,
    cfg: &SummaryConfig,
    out: &Path,
) -> CliResult<SummaryReport> {
    let aligned = align_draws(draws)?;
    let sel = select_num_factors(&aligned, cfg.band_level, cfg.band_mode)?;
    let t = draws.grid.points();
    let mut files = Vec::new();
    let emit = |name: String, files: &mut Vec<String>| {
        files.push(name.clone());
        out.join(name)
    };

    let mu_band = simultaneous_band(&aligned.mu_draws(), cfg.band_level)?;
    write_band(&emit("mu_band.csv".into(), &mut files), t, &mu_band)?;

    let kept: Vec<usize> = (0..aligned.k()).filter(|&k| sel.keep[k]).collect();
    write_text(&emit("ess.csv".into(), &mut files), &ess_table(draws, &aligned, &kept)?)?;

    let mut w = String::from("waic,lppd,p_waic\n");
    if draws.pointwise.len() >= 2 {
        let r = waic(&draws.pointwise)?;
        w.push_str(&format!("{},{},{}\n", fmt_f64(r.waic), fmt_f64(r.lppd), fmt_f64(r.p_waic)));
    }
    write_text(&emit("waic.csv".into(), &mut files), &w)?;

    if !kept.is_empty() {
        for (j, &k) in kept.iter().enumerate() {
            write_band(&emit(format!("loading_{}_band.csv", j + 1), &mut files), t, &sel.bands[k])?;
        }
        for (i, s) in data.subjects.iter().enumerate() {
            let mut f = aligned.fitted_draws(i);
            if draws.model == ModelKind::Binary {
                f.iter_mut().flatten().for_each(|v| *v = normal_cdf(*v));
            }
            let b = simultaneous_band(&f, cfg.band_level)?;
            write_band(&emit(format!("fitted_subject_{}.csv", file_safe(&s.id)), &mut files), t, &b)?;
        }
        if let Some(x) = &aligned.covariates {
            let mut s = String::from("covariate,t,lower,mean,upper\n");
            for q in 0..x.ncols() {
                let b = simultaneous_band(&aligned.theta_effect_draws(q), cfg.band_level)?;
                for l in 0..t.len() {
                    s.push_str(&format!(
                        "{},{},{},{},{}\n",
                        q + 1,
                        fmt_f64(t[l]),
                        fmt_f64(b.lower[l]),
                        fmt_f64(b.mean[l]),
                        fmt_f64(b.upper[l])
                    ));
                }
            }
            write_text(&emit("theta_effects.csv".into(), &mut files), &s)?;
        }
        write_text(&emit("trace_loglik.csv".into(), &mut files), &series_csv("iteration", &draws.loglik_trace))?;
        let sig: Vec<f64> = draws.states.iter().map(|s| s.sigma_sq).collect();
        write_text(&emit("trace_sigma_sq.csv".into(), &mut files), &series_csv("draw", &sig))?;
        for (j, &k) in kept.iter().enumerate() {
            let norms: Vec<f64> = aligned.loading_draws(k).iter().map(|v| euclid(v)).collect();
            write_text(&emit(format!("trace_lambda_{}_norm.csv", j + 1), &mut files), &series_csv("draw", &norms))?;
        }
    }

    write_text(&emit("K_selected".into(), &mut files), &format!("{}\n", sel.k_selected))?;
    let report = SummaryReport { k_fitted: aligned.k(), k_selected: sel.k_selected, keep: sel.keep, pivot: aligned.pivot, files };
    write_json(&out.join("summary.json"), &report)?;
    Ok(report)
}

fn ess_table(draws: &PosteriorDraws, aligned: &AlignedDraws, kept: &[usize]) -> CliResult<String> {
    let mut rows: Vec<(String, Vec<f64>)> = vec![
        ("loglik".into(), draws.saved_loglik.clone()),
        ("mu_norm".into(), aligned.mu_draws().iter().map(|v| euclid(v)).collect()),
    ];
    if draws.model != ModelKind::Binary {
        rows.push(("sigma_sq".into(), draws.states.iter().map(|s| s.sigma_sq).collect()));
    }
    for (j, &k) in kept.iter().enumerate() {
        rows.push((format!("lambda_{}_norm", j + 1), aligned.loading_draws(k).iter().map(|v| euclid(v)).collect()));
    }
    let mut s = String::from("parameter,draws,ess\n");
    for (name, series) in rows {
        let ess = if series.len() >= 10 { fmt_f64(effective_sample_size(&series)?.ess) } else { "NA".into() };
        s.push_str(&format!("{name},{},{ess}\n", series.len()));
    }
    Ok(s)
}
