//! The single JSON run configuration. Every section has explicit defaults,
//! `init` writes them all out, and unknown keys are rejected at every level.

use nemo_core::analysis::BandMode;
use nemo_core::model::SimConfig;
use nemo_core::sampler::{ChainConfig, ModelKind};
use nemo_core::PriorConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Ffa,
    GffaBinary,
    Regression,
    NuSensitivity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SummaryConfig {
    /// Level of the simultaneous bands used for reporting and selection.
    pub band_level: f64,
    pub band_mode: BandMode,
}

impl Default for SummaryConfig {
    fn default() -> Self {
        SummaryConfig { band_level: 0.95, band_mode: BandMode::PerFactor }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    pub scenario: Scenario,
    pub replicates: usize,
    pub sparsity_levels: Vec<f64>,
    /// Penalties swept by the `nu-sensitivity` scenario.
    pub nu_values: Vec<f64>,
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
    /// Write per-replicate trace CSVs.
    pub traces: bool,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            scenario: Scenario::Ffa,
            replicates: 20,
            sparsity_levels: vec![0.25, 0.5, 0.75],
            nu_values: vec![100.0, 1.0, 0.01, 1e-4, 1e-6, 1e-8],
            threads: 0,
            traces: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Generator used by `simulate`.
    pub model: ModelKind,
    pub simulate: SimConfig,
    /// `prior.k_max` is the number of factors fitted.
    pub prior: PriorConfig,
    pub chain: ChainConfig,
    pub summary: SummaryConfig,
    pub study: StudyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelKind::Ffa,
            simulate: SimConfig::default(),
            prior: PriorConfig::default(),
            chain: ChainConfig::default(),
            summary: SummaryConfig::default(),
            study: StudyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> CliResult<()> {
        self.simulate.validate()?;
        self.prior.validate()?;
        self.chain.validate()?;
        if !(self.summary.band_level > 0.0 && self.summary.band_level < 1.0) {
            return Err(CliError::Usage("summary.band_level must lie in (0, 1)".into()));
        }
        if self.study.replicates == 0 {
            return Err(CliError::Usage("study.replicates must be at least 1".into()));
        }
        if self.study.sparsity_levels.iter().any(|s| !(0.0..1.0).contains(s)) {
            return Err(CliError::Usage("study.sparsity_levels must lie in [0, 1)".into()));
        }
        if self.study.nu_values.iter().any(|v| !(*v > 0.0)) {
            return Err(CliError::Usage("study.nu_values must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::data(path.display(), e))?;
        Self::from_json(&text)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serialises")))
    }
}
