//! File formats: long-format dataset CSV, covariate CSV, band CSV, truth
//! JSON, the columnar draw store and the run manifest.

use nalgebra::DMatrix;
use nemo_core::analysis::CredibleBand;
use nemo_core::sampler::{AcceptanceRecord, ChainConfig, ModelKind, PosteriorDraws};
use nemo_core::{DataKind, FFAState, Grid, SEKernelParams, SparseFunctionalDataset};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn parse_f64(field: &str, line: usize, what: &str) -> CliResult<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| CliError::Data(format!("line {line}: {what} '{field}' is not a number")))?;
    if !v.is_finite() {
        return Err(CliError::Data(format!("line {line}: {what} must be finite")));
    }
    Ok(v)
}

fn open(path: &Path) -> CliResult<fs::File> {
    fs::File::open(path).map_err(|e| CliError::data(path.display(), e))
}

fn create(path: &Path) -> CliResult<fs::File> {
    fs::File::create(path).map_err(|e| CliError::data(path.display(), e))
}

/// Parse `subject_id,t,value` rows. Subjects keep the order in which they
/// first appear; each subject's rows are sorted by `t`.
pub fn parse_dataset<R: Read>(reader: R, kind: DataKind) -> CliResult<SparseFunctionalDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| CliError::data("header", e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["subject_id", "t", "value"] {
        return Err(CliError::Data(format!("line 1: expected header subject_id,t,value, got {}", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(f64, f64, usize)>> = HashMap::new();
    for (r, rec) in rdr.records().enumerate() {
        let line = r + 2;
        let rec = rec.map_err(|e| CliError::data(format!("line {line}"), e))?;
        if rec.len() != 3 {
            return Err(CliError::Data(format!("line {line}: expected 3 fields, got {}", rec.len())));
        }
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(CliError::Data(format!("line {line}: empty subject_id")));
        }
        let t = parse_f64(&rec[1], line, "t")?;
        let v = parse_f64(&rec[2], line, "value")?;
        if kind == DataKind::Binary && v != 0.0 && v != 1.0 {
            return Err(CliError::Data(format!("line {line}: binary value must be 0 or 1, got {v}")));
        }
        rows.entry(id.clone())
            .or_insert_with(|| {
                order.push(id);
                Vec::new()
            })
            .push((t, v, line));
    }
    if order.is_empty() {
        return Err(CliError::Data("dataset has no rows".into()));
    }
    let mut times = Vec::with_capacity(order.len());
    let mut values = Vec::with_capacity(order.len());
    for id in &order {
        let mut r = rows.remove(id).expect("every id has rows");
        r.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));
        for w in r.windows(2) {
            if (w[1].0 - w[0].0).abs() <= 1e-9 {
                let line = w[0].2.max(w[1].2);
                return Err(CliError::Data(format!("line {line}: duplicate time {} for subject {id}", w[1].0)));
            }
        }
        times.push(r.iter().map(|x| x.0).collect());
        values.push(r.iter().map(|x| x.1).collect());
    }
    Ok(SparseFunctionalDataset::from_observations(order, times, values, kind)?)
}

pub fn read_dataset(path: &Path, kind: DataKind) -> CliResult<SparseFunctionalDataset> {
    parse_dataset(open(path)?, kind).map_err(|e| match e {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_dataset_to<W: Write>(data: &SparseFunctionalDataset, w: W) -> CliResult<()> {
    let mut wr = csv::Writer::from_writer(w);
    let err = |e: csv::Error| CliError::data("writing dataset", e);
    wr.write_record(["subject_id", "t", "value"]).map_err(err)?;
    let pts = data.grid.points();
    for s in &data.subjects {
        for (&l, v) in s.map.indices().iter().zip(&s.values) {
            wr.write_record([s.id.as_str(), &fmt_f64(pts[l]), &fmt_f64(*v)]).map_err(err)?;
        }
    }
    wr.flush()?;
    Ok(())
}

pub fn write_dataset(data: &SparseFunctionalDataset, path: &Path) -> CliResult<()> {
    write_dataset_to(data, create(path)?)
}

/// Covariates as `subject_id,x1,...,xq`, reordered to the dataset's subjects.
pub fn read_covariates(path: &Path, data: &SparseFunctionalDataset) -> CliResult<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(open(path)?);
    let headers = rdr.headers().map_err(|e| CliError::data(path.display(), e))?.clone();
    if headers.len() < 2 || &headers[0] != "subject_id" {
        return Err(CliError::Data(format!("{}: line 1: expected header subject_id,x1,...", path.display())));
    }
    let q = headers.len() - 1;
    let mut by_id: HashMap<String, Vec<f64>> = HashMap::new();
    for (r, rec) in rdr.records().enumerate() {
        let line = r + 2;
        let rec = rec.map_err(|e| CliError::data(format!("{} line {line}", path.display()), e))?;
        let xs = (1..=q).map(|j| parse_f64(&rec[j], line, "covariate")).collect::<CliResult<Vec<_>>>()?;
        if by_id.insert(rec[0].to_string(), xs).is_some() {
            return Err(CliError::Data(format!("{}: line {line}: duplicate subject {}", path.display(), &rec[0])));
        }
    }
    let mut x = DMatrix::zeros(data.n(), q);
    for (i, s) in data.subjects.iter().enumerate() {
        let row = by_id
            .get(&s.id)
            .ok_or_else(|| CliError::Data(format!("{}: no covariates for subject {}", path.display(), s.id)))?;
        for j in 0..q {
            x[(i, j)] = row[j];
        }
    }
    Ok(x)
}

pub fn write_covariates(data: &SparseFunctionalDataset, x: &DMatrix<f64>, path: &Path) -> CliResult<()> {
    let mut wr = csv::Writer::from_writer(create(path)?);
    let err = |e: csv::Error| CliError::data(path.display(), e);
    let mut header = vec!["subject_id".to_string()];
    header.extend((1..=x.ncols()).map(|j| format!("x{j}")));
    wr.write_record(&header).map_err(err)?;
    for (i, s) in data.subjects.iter().enumerate() {
        let mut row = vec![s.id.clone()];
        row.extend((0..x.ncols()).map(|j| fmt_f64(x[(i, j)])));
        wr.write_record(&row).map_err(err)?;
    }
    wr.flush()?;
    Ok(())
}

/// `t,lower,mean,upper`.
pub fn write_band(path: &Path, t: &[f64], band: &CredibleBand) -> CliResult<()> {
    let mut out = String::from("t,lower,mean,upper\n");
    for l in 0..t.len() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            fmt_f64(t[l]),
            fmt_f64(band.lower[l]),
            fmt_f64(band.mean[l]),
            fmt_f64(band.upper[l])
        ));
    }
    write_text(path, &out)
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::data(path.display(), e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("value serialises");
    write_text(path, &text)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::data(path.display(), e))?;
    serde_json::from_str(&text).map_err(|e| CliError::data(path.display(), e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
}

/// Writes `config.json` and `manifest.json` into `dir`.
pub fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig, seed: u64) -> CliResult<()> {
    write_text(&dir.join("config.json"), &cfg.to_json())?;
    let m = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        seed,
        config_sha256: cfg.hash(),
    };
    write_json(&dir.join("manifest.json"), &m)
}

const DRAWS_FORMAT: &str = "nemo-draws";
const DRAWS_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Column {
    name: String,
    /// Offset and length in `f64` values.
    offset: usize,
    len: usize,
}

/// JSON index of `draws.bin`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct DrawIndex {
    format: String,
    version: u32,
    model: ModelKind,
    grid: Grid,
    config: ChainConfig,
    acceptance: Vec<AcceptanceRecord>,
    covariates: Option<DMatrix<f64>>,
    draws: usize,
    k: usize,
    n: usize,
    m: usize,
    q: usize,
    observations: usize,
    columns: Vec<Column>,
}

/// Columnar little-endian `f64` store: `draws.bin` plus `draws.json`.
pub fn write_draws(dir: &Path, d: &PosteriorDraws) -> CliResult<()> {
    let (k, m) = (d.k(), d.grid.len());
    let n = d.states.first().map_or(0, |s| s.n());
    let q = d.states.first().and_then(|s| s.theta.as_ref()).map_or(0, |t| t.ncols());
    let mut cols: Vec<(&str, Vec<f64>)> = vec![
        ("mu", d.states.iter().flat_map(|s| s.mu.iter().copied()).collect()),
        ("lambda", d.states.iter().flat_map(|s| row_major(&s.lambda)).collect()),
        ("eta", d.states.iter().flat_map(|s| row_major(&s.eta)).collect()),
        ("psi", d.states.iter().flat_map(|s| s.psi.iter().copied()).collect()),
        ("sigma_sq", d.states.iter().map(|s| s.sigma_sq).collect()),
        ("mu_tau_sq", d.states.iter().map(|s| s.mu_kernel.tau_sq).collect()),
        ("mu_len_sq", d.states.iter().map(|s| s.mu_kernel.len_sq).collect()),
        ("loading_tau_sq", d.states.iter().flat_map(|s| s.loading_kernels.iter().map(|p| p.tau_sq)).collect()),
        ("loading_len_sq", d.states.iter().flat_map(|s| s.loading_kernels.iter().map(|p| p.len_sq)).collect()),
        ("loglik_trace", d.loglik_trace.clone()),
        ("saved_loglik", d.saved_loglik.clone()),
        ("pointwise", d.pointwise.iter().flatten().copied().collect()),
    ];
    if q > 0 {
        cols.push(("theta", d.states.iter().flat_map(|s| row_major(s.theta.as_ref().expect("theta"))).collect()));
    }
    let mut bytes = Vec::new();
    let mut columns = Vec::new();
    let mut offset = 0;
    for (name, v) in &cols {
        for x in v {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        columns.push(Column { name: (*name).into(), offset, len: v.len() });
        offset += v.len();
    }
    let index = DrawIndex {
        format: DRAWS_FORMAT.into(),
        version: DRAWS_VERSION,
        model: d.model,
        grid: d.grid.clone(),
        config: d.config.clone(),
        acceptance: d.acceptance.clone(),
        covariates: d.covariates.clone(),
        draws: d.states.len(),
        k,
        n,
        m,
        q,
        observations: d.pointwise.first().map_or(0, |r| r.len()),
        columns,
    };
    fs::write(dir.join("draws.bin"), bytes).map_err(|e| CliError::data(dir.join("draws.bin").display(), e))?;
    write_json(&dir.join("draws.json"), &index)
}

fn row_major(a: &DMatrix<f64>) -> Vec<f64> {
    (0..a.nrows()).flat_map(|r| (0..a.ncols()).map(move |c| a[(r, c)])).collect()
}

pub fn read_draws(dir: &Path) -> CliResult<PosteriorDraws> {
    let index: DrawIndex = read_json(&dir.join("draws.json"))?;
    if index.format != DRAWS_FORMAT || index.version != DRAWS_VERSION {
        return Err(CliError::Data(format!("unsupported draw store {} v{}", index.format, index.version)));
    }
    let path = dir.join("draws.bin");
    let bytes = fs::read(&path).map_err(|e| CliError::data(path.display(), e))?;
    let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let col = |name: &str, expect: usize| -> CliResult<&[f64]> {
        let c = index
            .columns
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| CliError::Data(format!("draw store lacks column {name}")))?;
        if c.len != expect || c.offset + c.len > values.len() {
            return Err(CliError::Data(format!("draw store column {name} is corrupt")));
        }
        Ok(&values[c.offset..c.offset + c.len])
    };
    let (s, k, n, m, q) = (index.draws, index.k, index.n, index.m, index.q);
    let mu = col("mu", s * m)?;
    let lambda = col("lambda", s * k * m)?;
    let eta = col("eta", s * n * k)?;
    let psi = col("psi", s * k)?;
    let sigma = col("sigma_sq", s)?;
    let mu_tau = col("mu_tau_sq", s)?;
    let mu_len = col("mu_len_sq", s)?;
    let l_tau = col("loading_tau_sq", s * k)?;
    let l_len = col("loading_len_sq", s * k)?;
    let theta = if q > 0 { Some(col("theta", s * k * q)?) } else { None };
    let n_trace = index.columns.iter().find(|c| c.name == "loglik_trace").map_or(0, |c| c.len);
    let loglik_trace = col("loglik_trace", n_trace)?.to_vec();
    let saved_loglik = col("saved_loglik", s)?.to_vec();
    let p = index.observations;
    let pw = col("pointwise", if p == 0 { 0 } else { s * p })?;
    let states = (0..s)
        .map(|d| FFAState {
            mu: mu[d * m..(d + 1) * m].to_vec(),
            lambda: DMatrix::from_row_slice(k, m, &lambda[d * k * m..(d + 1) * k * m]),
            eta: DMatrix::from_row_slice(n, k, &eta[d * n * k..(d + 1) * n * k]),
            psi: psi[d * k..(d + 1) * k].to_vec(),
            sigma_sq: sigma[d],
            mu_kernel: SEKernelParams { tau_sq: mu_tau[d], len_sq: mu_len[d] },
            loading_kernels: (0..k)
                .map(|j| SEKernelParams { tau_sq: l_tau[d * k + j], len_sq: l_len[d * k + j] })
                .collect(),
            theta: theta.map(|t| DMatrix::from_row_slice(k, q, &t[d * k * q..(d + 1) * k * q])),
            covariates: None,
        })
        .collect();
    let pointwise = if p == 0 { Vec::new() } else { pw.chunks(p).map(|c| c.to_vec()).collect() };
    Ok(PosteriorDraws {
        model: index.model,
        grid: index.grid,
        config: index.config,
        states,
        acceptance: index.acceptance,
        loglik_trace,
        saved_loglik,
        pointwise,
        covariates: index.covariates,
    })
}
