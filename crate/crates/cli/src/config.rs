//! Run configuration: one JSON document per invocation.

use std::path::{Path, PathBuf};

use ldpm_core::panel::{load_dataset, ChronoSplit, LaggedOutcome, PanelDataset};
use ldpm_core::pipeline::{ComparisonConfig, LdpmConfig};
use ldpm_core::synth::SimConfig;
use serde::Deserialize;

use crate::CliError;

fn default_alpha() -> f64 {
    0.1
}

fn default_symmetry_inputs() -> usize {
    1000
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Output directory; `--out` takes precedence.
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Root seed; `--seed` takes precedence.
    #[serde(default)]
    pub seed: u64,
    /// Simulation settings for `simulate` (its `seed` is replaced by the root seed).
    #[serde(default)]
    pub sim: Option<SimConfig>,
    /// Dataset directory for `fit`, `conformal` and `diagnose`, relative to the config file.
    #[serde(default)]
    pub data: Option<PathBuf>,
    /// Covariate columns that hold lagged outcomes. When absent, the
    /// `lagged_outcomes` of a `truth.json` next to the data are used.
    #[serde(default)]
    pub lagged_outcomes: Option<Vec<LaggedOutcome>>,
    #[serde(default)]
    pub split: Option<ChronoSplit>,
    #[serde(default)]
    pub ldpm: LdpmConfig,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Grid for `evaluate` (its `seed` is replaced by the root seed).
    #[serde(default)]
    pub comparison: Option<ComparisonConfig>,
    /// Random inputs checked by the symmetry diagnostic.
    #[serde(default = "default_symmetry_inputs")]
    pub symmetry_inputs: usize,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config { path: path.to_path_buf(), message: e.to_string() })?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config { path: path.to_path_buf(), message: e.to_string() })?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(d) = &cfg.data {
            if d.is_relative() {
                cfg.data = Some(base.join(d));
            }
        }
        if let Some(o) = &cfg.out {
            if o.is_relative() {
                cfg.out = Some(base.join(o));
            }
        }
        Ok(cfg)
    }

    pub fn require_data(&self) -> Result<&Path, CliError> {
        self.data.as_deref().ok_or_else(|| CliError::Usage("config needs a \"data\" directory".into()))
    }

    /// Loads the dataset and attaches its outcome lags.
    pub fn dataset(&self) -> Result<PanelDataset, CliError> {
        let dir = self.require_data()?;
        let ds = load_dataset(dir)?;
        let lags = match &self.lagged_outcomes {
            Some(l) => l.clone(),
            None => truth_lags(&dir.join("truth.json"))?,
        };
        Ok(ds.with_lagged_outcomes(lags)?)
    }

    pub fn require_split(&self) -> Result<&ChronoSplit, CliError> {
        self.split.as_ref().ok_or_else(|| CliError::Usage("config needs a \"split\" section".into()))
    }
}

#[derive(Deserialize)]
struct TruthLags {
    #[serde(default)]
    lagged_outcomes: Vec<LaggedOutcome>,
}

fn truth_lags(path: &Path) -> Result<Vec<LaggedOutcome>, CliError> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Ok(Vec::new());
    };
    let t: TruthLags = serde_json::from_str(&text)
        .map_err(|e| CliError::Config { path: path.to_path_buf(), message: e.to_string() })?;
    Ok(t.lagged_outcomes)
}
