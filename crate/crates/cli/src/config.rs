//! The experiment document: one TOML file per run. Relative paths resolve
//! against the directory holding the config file.

use std::path::{Path, PathBuf};

use ccnn_core::bootstrap::{ChainMode, ReplicateBudget};
use ccnn_core::metrics::ConsistencyConfig;
use ccnn_core::{SyntheticSpec, TrainerConfig};
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data: Option<DataSection>,
    #[serde(default)]
    pub patch: Option<PatchSection>,
    #[serde(default)]
    pub kernel: Option<KernelSection>,
    #[serde(default)]
    pub trainer: Option<TrainerConfig>,
    #[serde(default)]
    pub bootstrap: Option<BootstrapSection>,
    #[serde(default)]
    pub extract: Option<ExtractSection>,
    #[serde(default)]
    pub perturb: Option<PerturbSection>,
    #[serde(default)]
    pub consistency: Option<ConsistencySection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train: DataSource,
    #[serde(default)]
    pub test: Option<DataSource>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "format", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    Idx {
        images: PathBuf,
        labels: PathBuf,
        /// Keep only the first `limit` samples.
        #[serde(default)]
        limit: Option<usize>,
    },
    Features {
        path: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
    },
    Synthetic {
        size: usize,
        spec: SyntheticSpec,
    },
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSection {
    pub size: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    pub gamma: f64,
    pub anchors: usize,
    pub seed: u64,
    /// Draw anchors from this dataset instead of the training set.
    #[serde(default)]
    pub secondary: Option<DataSource>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapSection {
    pub replicates: usize,
    pub alpha: f64,
    #[serde(default)]
    pub chain: ChainMode,
    #[serde(default)]
    pub budget: Option<ReplicateBudget>,
    pub seed: u64,
    /// Independent reruns with derived seeds, feeding the standard errors
    /// of the summary.
    #[serde(default = "one")]
    pub repetitions: usize,
    #[serde(default = "yes")]
    pub histograms: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum NetworkSource {
    Ccnw(PathBuf),
    Manifest(PathBuf),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractSection {
    pub network: NetworkSource,
    pub data: DataSource,
    #[serde(default = "default_features_name")]
    pub output: String,
}

fn default_features_name() -> String {
    "features.ccnf".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbSection {
    pub network: NetworkSource,
    pub calibration: DataSource,
    pub sigma: f64,
    /// Target is `1/d2 + slack` unless `target_accuracy` is set.
    #[serde(default = "default_slack")]
    pub slack: f64,
    #[serde(default)]
    pub target_accuracy: Option<f64>,
    pub seed: u64,
}

fn default_slack() -> f64 {
    0.05
}

#[derive(Debug, Clone, Deserialize)]
pub struct ConsistencySection {
    #[serde(flatten)]
    pub harness: ConsistencyConfig,
    /// Harness seeds to run; defaults to the single `seed`.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    /// Read and parse `path`. Missing `seed` fields are reported with their
    /// own error kind.
    pub fn load(path: &Path) -> Result<(Self, PathBuf), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::missing_input("config", format!("{}: {e}", path.display())))?;
        let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| {
            let msg = e.to_string();
            let kind = if msg.contains("missing field `seed`") { "missing-seed" } else { "invalid-config" };
            CliError::usage("config", kind, msg.trim_end().to_string())
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    pub fn require<'a, T>(section: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
        section.as_ref().ok_or_else(|| CliError::usage("config", "invalid-config", format!("missing [{name}] section")))
    }
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Fail with `missing-input` unless every path exists.
pub fn require_files(stage: &'static str, paths: &[PathBuf]) -> Result<(), CliError> {
    for p in paths {
        if !p.is_file() {
            return Err(CliError::missing_input(stage, format!("{} does not exist", p.display())));
        }
    }
    Ok(())
}
