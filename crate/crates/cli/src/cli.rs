//! Argument parsing and subcommand dispatch.

use clap::{Args, Parser, Subcommand};
use nemo_core::analysis::{align_draws, select_num_factors};
use nemo_core::model::{simulate_ffa, simulate_gffa_binary, simulate_latent_regression};
use nemo_core::rng::seeded;
use nemo_core::sampler::{run_ffa_chain, run_gffa_chain, run_regression_chain, ModelKind, PosteriorDraws};
use nemo_core::{DataKind, SparseFunctionalDataset};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{RunConfig, Scenario};
use crate::error::{CliError, CliResult};
use crate::io::*;
use crate::simstudy::{run_nu_sensitivity, run_study, StudySpec};
use crate::summary::write_summaries;

/// Output root used when `--out` is absent; each subcommand writes to
/// `$NEMO_FFA_OUT/<subcommand>`.
pub const OUT_ENV: &str = "NEMO_FFA_OUT";

#[derive(Parser, Debug)]
#[command(name = "nemo-ffa", version, about = "Functional factor analysis with NeMO Gaussian-process loadings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// JSON run configuration (see `init`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    nu_lambda: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print (or write) the default configuration.
    Init {
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a dataset and its ground truth.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Generator: ffa, binary or regression (default: config `model`).
        #[arg(long)]
        model: Option<String>,
    },
    /// Fit the continuous model.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Fit the binary probit model.
    FitBinary {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Fit the latent-factor regression model.
    FitRegression {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        covariates: PathBuf,
    },
    /// Align, select and write summary CSVs for a fitted run.
    Summarize {
        #[command(flatten)]
        common: Common,
        /// Directory written by a fit command.
        #[arg(long)]
        run: PathBuf,
    },
    /// Fit with `k_max` factors, select, and refit with the selected number.
    SelectK {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "continuous")]
        kind: String,
        #[arg(long)]
        covariates: Option<PathBuf>,
    },
    /// Replicated simulation study.
    Study {
        #[command(flatten)]
        common: Common,
        /// ffa, gffa-binary, regression or nu-sensitivity (default: config).
        #[arg(long)]
        scenario: Option<String>,
        /// Full-scale profile: 100 replicates, 10,000 iterations, 5,000 burn-in.
        #[arg(long)]
        full: bool,
        /// Worker threads (default: config, 0 = all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
}

/// Parse `argv`, run, and return the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.chain.seed = s;
    }
    if let Some(v) = common.iters {
        cfg.chain.n_iter = v;
    }
    if let Some(v) = common.burn_in {
        cfg.chain.burn_in = v;
    }
    if let Some(v) = common.thin {
        cfg.chain.thin = v;
    }
    if let Some(v) = common.k_max {
        cfg.prior.k_max = v;
    }
    if let Some(v) = common.nu_lambda {
        cfg.prior.nu_lambda = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common, sub: &str) -> CliResult<PathBuf> {
    let dir = match (&common.out, std::env::var_os(OUT_ENV)) {
        (Some(p), _) => p.clone(),
        (None, Some(root)) => PathBuf::from(root).join(sub),
        (None, None) => return Err(CliError::Usage(format!("no output directory: pass --out or set {OUT_ENV}"))),
    };
    fs::create_dir_all(&dir).map_err(|e| CliError::data(dir.display(), e))?;
    Ok(dir)
}

/// Continuous reader that refuses files whose values are all 0/1.
fn read_continuous(path: &Path) -> CliResult<SparseFunctionalDataset> {
    let data = read_dataset(path, DataKind::Continuous)?;
    if data.subjects.iter().flat_map(|s| &s.values).all(|v| *v == 0.0 || *v == 1.0) {
        return Err(CliError::Data(format!(
            "{}: wrong data kind: every value is 0 or 1, which is binary data; use fit-binary",
            path.display()
        )));
    }
    Ok(data)
}

fn parse_model(s: &str) -> CliResult<ModelKind> {
    match s {
        "ffa" | "continuous" => Ok(ModelKind::Ffa),
        "binary" => Ok(ModelKind::Binary),
        "regression" => Ok(ModelKind::Regression),
        other => Err(CliError::Usage(format!("unknown model '{other}' (ffa, binary, regression)"))),
    }
}

fn finish_fit(dir: &Path, command: &str, cfg: &RunConfig, data: &SparseFunctionalDataset, draws: &PosteriorDraws) -> CliResult<()> {
    write_dataset(data, &dir.join("data.csv"))?;
    if let Some(x) = &draws.covariates {
        write_covariates(data, x, &dir.join("covariates.csv"))?;
    }
    write_draws(dir, draws)?;
    write_manifest(dir, command, cfg, cfg.chain.seed)
}

fn fit_model(
    model: ModelKind,
    cfg: &RunConfig,
    data: &SparseFunctionalDataset,
    x: Option<&nalgebra::DMatrix<f64>>,
    k: usize,
) -> CliResult<PosteriorDraws> {
    Ok(match model {
        ModelKind::Ffa => run_ffa_chain(data, &cfg.prior, &cfg.chain, k)?,
        ModelKind::Binary => run_gffa_chain(data, &cfg.prior, &cfg.chain, k)?,
        ModelKind::Regression => {
            let x = x.ok_or_else(|| CliError::Usage("regression needs --covariates".into()))?;
            run_regression_chain(data, x, &cfg.prior, &cfg.chain, k)?
        }
    })
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Init { out } => {
            let text = RunConfig::default().to_json();
            match out {
                Some(p) => write_text(&p, &text),
                None => {
                    println!("{text}");
                    Ok(())
                }
            }
        }
        Command::Simulate { common, model } => {
            let mut cfg = load_config(&common)?;
            if let Some(m) = model {
                cfg.model = parse_model(&m)?;
            }
            let dir = out_dir(&common, "simulate")?;
            let mut rng = seeded(cfg.chain.seed);
            let (data, truth) = match cfg.model {
                ModelKind::Ffa => simulate_ffa(&cfg.simulate, &mut rng)?,
                ModelKind::Binary => simulate_gffa_binary(&cfg.simulate, &mut rng)?,
                ModelKind::Regression => simulate_latent_regression(&cfg.simulate, &mut rng)?,
            };
            write_dataset(&data, &dir.join("data.csv"))?;
            if let Some(x) = &truth.covariates {
                write_covariates(&data, x, &dir.join("covariates.csv"))?;
            }
            write_json(&dir.join("truth.json"), &truth)?;
            write_manifest(&dir, "simulate", &cfg, cfg.chain.seed)
        }
        Command::Fit { common, data } => {
            let cfg = load_config(&common)?;
            let d = read_continuous(&data)?;
            let dir = out_dir(&common, "fit")?;
            let draws = fit_model(ModelKind::Ffa, &cfg, &d, None, cfg.prior.k_max)?;
            finish_fit(&dir, "fit", &cfg, &d, &draws)
        }
        Command::FitBinary { common, data } => {
            let cfg = load_config(&common)?;
            let d = read_dataset(&data, DataKind::Binary)?;
            let dir = out_dir(&common, "fit-binary")?;
            let draws = fit_model(ModelKind::Binary, &cfg, &d, None, cfg.prior.k_max)?;
            finish_fit(&dir, "fit-binary", &cfg, &d, &draws)
        }
        Command::FitRegression { common, data, covariates } => {
            let cfg = load_config(&common)?;
            let d = read_continuous(&data)?;
            let x = read_covariates(&covariates, &d)?;
            let dir = out_dir(&common, "fit-regression")?;
            let draws = fit_model(ModelKind::Regression, &cfg, &d, Some(&x), cfg.prior.k_max)?;
            finish_fit(&dir, "fit-regression", &cfg, &d, &draws)
        }
        Command::Summarize { common, run } => {
            let run_cfg = run.join("config.json");
            let common = Common { config: common.config.clone().or(Some(run_cfg)), ..common };
            let cfg = load_config(&common)?;
            let draws = read_draws(&run)?;
            let kind = if draws.model == ModelKind::Binary { DataKind::Binary } else { DataKind::Continuous };
            let data = read_dataset(&run.join("data.csv"), kind)?;
            let dir = match &common.out {
                Some(_) => out_dir(&common, "summarize")?,
                None => run.clone(),
            };
            let report = write_summaries(&draws, &data, &cfg.summary, &dir)?;
            println!("K_selected = {}", report.k_selected);
            Ok(())
        }
        Command::SelectK { common, data, kind, covariates } => {
            let cfg = load_config(&common)?;
            let model = match (parse_model(&kind)?, &covariates) {
                (ModelKind::Ffa, Some(_)) => ModelKind::Regression,
                (m, _) => m,
            };
            let d = match model {
                ModelKind::Binary => read_dataset(&data, DataKind::Binary)?,
                _ => read_continuous(&data)?,
            };
            let x = match &covariates {
                Some(p) => Some(read_covariates(p, &d)?),
                None => None,
            };
            let dir = out_dir(&common, "select-k")?;
            let over = fit_model(model, &cfg, &d, x.as_ref(), cfg.prior.k_max)?;
            let aligned = align_draws(&over)?;
            let sel = select_num_factors(&aligned, cfg.summary.band_level, cfg.summary.band_mode)?;
            write_json(&dir.join("selection.json"), &sel)?;
            write_text(&dir.join("K_selected"), &format!("{}\n", sel.k_selected))?;
            println!("K_selected = {}", sel.k_selected);
            if sel.k_selected > 0 {
                let refit_dir = dir.join("refit");
                fs::create_dir_all(&refit_dir).map_err(|e| CliError::data(refit_dir.display(), e))?;
                let mut refit_cfg = cfg.clone();
                refit_cfg.prior.k_max = sel.k_selected;
                let refit = fit_model(model, &refit_cfg, &d, x.as_ref(), sel.k_selected)?;
                finish_fit(&refit_dir, "select-k", &refit_cfg, &d, &refit)?;
            }
            write_manifest(&dir, "select-k", &cfg, cfg.chain.seed)
        }
        Command::Study { common, scenario, full, threads } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = scenario {
                cfg.study.scenario = serde_json::from_value(serde_json::Value::String(s.clone()))
                    .map_err(|_| CliError::Usage(format!("unknown scenario '{s}'")))?;
            }
            if full {
                cfg.study.replicates = 100;
                cfg.chain.n_iter = 10_000;
                cfg.chain.burn_in = 5_000;
            }
            cfg.validate()?;
            let dir = out_dir(&common, "study")?;
            let spec = StudySpec::from_config(&cfg);
            let threads = threads.unwrap_or(cfg.study.threads);
            write_json(&dir.join("study_spec.json"), &spec)?;
            if spec.scenario == Scenario::NuSensitivity {
                run_nu_sensitivity(&spec, threads, Some(&dir))?;
            } else {
                let report = run_study(&spec, threads, Some(&dir))?;
                if !report.failures.is_empty() {
                    eprintln!("{} replicate fits failed; see failures.csv", report.failures.len());
                }
            }
            write_manifest(&dir, "study", &cfg, cfg.chain.seed)
        }
    }
}
