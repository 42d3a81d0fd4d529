//! Evaluation metrics for bootstrap prediction cubes and a Monte-Carlo
//! harness comparing the bootstrap distribution of a fitted prediction with
//! its true sampling distribution.
//!
//! The log-likelihood score is `(1/B) sum_b sum_i ln pp[b, i, y_i]` with
//! probabilities clamped below at `1e-12`: it sums over test samples and
//! averages over replicates, so larger is better and the maximum is 0.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{self, BootstrapConfig, BootstrapError, ChainMode, IntervalTable, PredictionCube};
use crate::data_io::{self, DataError, Sample, SyntheticSpec};
use crate::model::CcnnParams;
use crate::patching::{self, PatchConfig, PatchError, PatchMatrix, PatchedDataset};
use crate::seeding;
use crate::trainer::{self, TrainError, TrainerConfig};

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("need at least 2 runs for a standard error, got {0}")]
    InsufficientRuns(usize),
    #[error("invalid consistency config: {0}")]
    InvalidConfig(String),
    #[error("empirical CDF needs finite, non-empty input")]
    BadSample,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Bootstrap(#[from] BootstrapError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl MetricsError {
    pub fn kind(&self) -> &'static str {
        match self {
            MetricsError::SizeMismatch(_) => "size-mismatch",
            MetricsError::InsufficientRuns(_) => "insufficient-runs",
            MetricsError::InvalidConfig(_) => "invalid-config",
            MetricsError::BadSample => "bad-sample",
            MetricsError::Data(e) => e.kind(),
            MetricsError::Patch(e) => e.kind(),
            MetricsError::Train(e) => e.kind(),
            MetricsError::Bootstrap(e) => e.kind(),
            MetricsError::Csv(_) | MetricsError::Io(_) => "io",
        }
    }
}

pub fn avg_log_likelihood(cube: &PredictionCube, labels: &[usize]) -> Result<f64, MetricsError> {
    if labels.len() != cube.samples() {
        return Err(MetricsError::SizeMismatch(format!("{} labels for {} test samples", labels.len(), cube.samples())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= cube.classes()) {
        return Err(MetricsError::SizeMismatch(format!("label {y} out of range for {} classes", cube.classes())));
    }
    let total: f64 = (0..cube.replicates())
        .map(|b| labels.iter().enumerate().map(|(i, &y)| cube.get(b, i, y).max(PROB_FLOOR).ln()).sum::<f64>())
        .sum();
    Ok(total / cube.replicates() as f64)
}

/// Mean of `upper - lower` over all `(sample, class)` cells.
pub fn avg_interval_length(table: &IntervalTable) -> f64 {
    let cells = (table.samples() * table.classes()).max(1);
    table.widths().sum::<f64>() / cells as f64
}

/// Sample standard deviation over `sqrt(count)`.
pub fn standard_error(values: &[f64]) -> Result<f64, MetricsError> {
    let n = values.len();
    if n < 2 {
        return Err(MetricsError::InsufficientRuns(n));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((var / n as f64).sqrt())
}

/// Metrics over one or more repetitions of a bootstrap run. Standard errors
/// are `None` for a single repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvalSummary {
    pub avg_log_likelihood: f64,
    pub avg_interval_length: f64,
    pub se_log_likelihood: Option<f64>,
    pub se_interval_length: Option<f64>,
    pub repetitions: usize,
}

impl EvalSummary {
    pub fn single(cube: &PredictionCube, table: &IntervalTable, labels: &[usize]) -> Result<Self, MetricsError> {
        Self::from_runs(&[avg_log_likelihood(cube, labels)?], &[avg_interval_length(table)])
    }

    /// Means and standard errors of per-repetition values.
    pub fn from_runs(log_likelihoods: &[f64], interval_lengths: &[f64]) -> Result<Self, MetricsError> {
        let n = log_likelihoods.len();
        if n == 0 || interval_lengths.len() != n {
            return Err(MetricsError::SizeMismatch(format!(
                "{n} log-likelihoods and {} interval lengths",
                interval_lengths.len()
            )));
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let se = |v: &[f64]| if n >= 2 { standard_error(v).ok() } else { None };
        Ok(EvalSummary {
            avg_log_likelihood: mean(log_likelihoods),
            avg_interval_length: mean(interval_lengths),
            se_log_likelihood: se(log_likelihoods),
            se_interval_length: se(interval_lengths),
            repetitions: n,
        })
    }
}

/// Right-continuous empirical CDF.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalCdf {
    sorted: Vec<f64>,
}

impl EmpiricalCdf {
    pub fn new(mut values: Vec<f64>) -> Result<Self, MetricsError> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(MetricsError::BadSample);
        }
        values.sort_unstable_by(f64::total_cmp);
        Ok(EmpiricalCdf { sorted: values })
    }

    pub fn sorted_values(&self) -> &[f64] {
        &self.sorted
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// Fraction of values `<= z`.
    pub fn eval(&self, z: f64) -> f64 {
        self.sorted.partition_point(|&v| v <= z) as f64 / self.sorted.len() as f64
    }

    /// `sup_z |F(z) - G(z)|`, attained at a jump of either CDF.
    pub fn ks_distance(&self, other: &EmpiricalCdf) -> f64 {
        let (a, b) = (&self.sorted, &other.sorted);
        let (na, nb) = (a.len() as f64, b.len() as f64);
        let (mut i, mut j) = (0, 0);
        let mut best: f64 = 0.0;
        while i < a.len() && j < b.len() {
            let z = a[i].min(b[j]);
            while i < a.len() && a[i] <= z {
                i += 1;
            }
            while j < b.len() && b[j] <= z {
                j += 1;
            }
            best = best.max((i as f64 / na - j as f64 / nb).abs());
        }
        best
    }
}

pub fn ks_distance(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    Ok(EmpiricalCdf::new(a.to_vec())?.ks_distance(&EmpiricalCdf::new(b.to_vec())?))
}

/// Binary logit `f_1(x) - f_0(x)`, the prediction tracked by the harness.
pub fn logit(params: &CcnnParams, probe: &PatchMatrix) -> Result<f64, MetricsError> {
    let s = params.score(probe).map_err(TrainError::from)?;
    if s.len() != 2 {
        return Err(MetricsError::InvalidConfig(format!("harness needs 2 classes, model has {}", s.len())));
    }
    Ok(s[1] - s[0])
}

fn default_reference_factor() -> usize {
    50
}

fn default_chain() -> ChainMode {
    ChainMode::ParallelFromBase
}

/// Monte-Carlo comparison of `H_n` (law of `f_n(x) - f_ref(x)` over fresh
/// datasets) with `H_Bn` (law of `f_b(x) - f_n(x)` over bootstrap refits of
/// one dataset).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ConsistencyConfig {
    pub spec: SyntheticSpec,
    pub n_grid: Vec<usize>,
    pub mc_reps: usize,
    pub bootstraps: usize,
    pub trainer: TrainerConfig,
    /// Trainer of the large reference fit; defaults to `trainer`.
    #[serde(default)]
    pub reference_trainer: Option<TrainerConfig>,
    pub probe: Vec<f64>,
    /// Reference fit uses `reference_factor * max(n_grid)` samples.
    #[serde(default = "default_reference_factor")]
    pub reference_factor: usize,
    #[serde(default = "default_chain")]
    pub chain: ChainMode,
    pub seed: u64,
}

impl ConsistencyConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        let bad = |m: String| Err(MetricsError::InvalidConfig(m));
        if self.mc_reps < 50 {
            return bad(format!("mcReps must be at least 50, got {}", self.mc_reps));
        }
        if self.bootstraps < 100 {
            return bad(format!("B must be at least 100, got {}", self.bootstraps));
        }
        if self.n_grid.is_empty() || self.n_grid.contains(&0) {
            return bad("nGrid must hold positive sample sizes".into());
        }
        if self.reference_factor < 50 {
            return bad(format!("reference factor must be at least 50, got {}", self.reference_factor));
        }
        if self.probe.len() != self.spec.input_dim {
            return bad(format!("probe has {} values, spec input_dim is {}", self.probe.len(), self.spec.input_dim));
        }
        self.spec.validate()?;
        self.trainer.validate()?;
        if let Some(t) = &self.reference_trainer {
            t.validate()?;
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        ConsistencyConfig { seed, ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ConsistencyRow {
    pub n: usize,
    pub ks_distance: f64,
    pub seed: u64,
}

/// Per-`n` draws behind one row.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyDetail {
    pub n: usize,
    /// `f_n(x) - f_ref(x)` over independent datasets.
    pub sampling: Vec<f64>,
    /// `f_b(x) - f_n(x)` over bootstrap refits of one dataset.
    pub bootstrap: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub rows: Vec<ConsistencyRow>,
    pub details: Vec<ConsistencyDetail>,
    /// `f_ref(x)`.
    pub reference_value: f64,
}

// Sub-stream tags for derived seeds.
const STREAM_REFERENCE: u64 = 1;
const STREAM_MC: u64 = 2;
const STREAM_BOOT_DATA: u64 = 3;
const STREAM_BOOT: u64 = 4;
const STREAM_TRAIN: u64 = 5;

fn synthetic_patches(spec: &SyntheticSpec, n: usize, seed: u64) -> Result<PatchedDataset, MetricsError> {
    let data = data_io::generate_synthetic(&spec.with_seed(seed), n)?;
    Ok(PatchedDataset::from_dataset(&data, &PatchConfig::new(1, 1)?)?)
}

/// Run the harness for every `n` in the grid. All fits after the reference
/// start from the reference solution, which only shortens optimization since
/// the objective is convex.
pub fn consistency_check(cfg: &ConsistencyConfig) -> Result<ConsistencyReport, MetricsError> {
    cfg.validate()?;
    let probe_sample = Sample::vector(cfg.probe.clone(), 0);
    let probe = patching::extract_patches(&probe_sample, &PatchConfig::new(1, 1)?)?;
    let n_max = *cfg.n_grid.iter().max().expect("validated non-empty");

    let ref_seed = seeding::derive_seed(cfg.seed, STREAM_REFERENCE);
    let ref_data = synthetic_patches(&cfg.spec, cfg.reference_factor * n_max, ref_seed)?;
    let ref_trainer =
        cfg.reference_trainer.as_ref().unwrap_or(&cfg.trainer).with_seed(seeding::derive_seed(ref_seed, STREAM_TRAIN));
    let reference = trainer::fit(&ref_data, &ref_trainer, None)?.params;
    let f_ref = logit(&reference, &probe)?;

    let mut rows = Vec::with_capacity(cfg.n_grid.len());
    let mut details = Vec::with_capacity(cfg.n_grid.len());
    for (g, &n) in cfg.n_grid.iter().enumerate() {
        let grid_seed = seeding::derive_seed(cfg.seed, 1000 + g as u64);

        let mc_seed = seeding::derive_seed(grid_seed, STREAM_MC);
        let sampling = (0..cfg.mc_reps)
            .into_par_iter()
            .map(|r| {
                let seed = seeding::derive_seed(mc_seed, r as u64);
                let data = synthetic_patches(&cfg.spec, n, seed)?;
                let tc = cfg.trainer.with_seed(seeding::derive_seed(seed, STREAM_TRAIN));
                let fitted = trainer::fit(&data, &tc, Some(&reference))?.params;
                Ok(logit(&fitted, &probe)? - f_ref)
            })
            .collect::<Result<Vec<f64>, MetricsError>>()?;

        let data = synthetic_patches(&cfg.spec, n, seeding::derive_seed(grid_seed, STREAM_BOOT_DATA))?;
        let boot_seed = seeding::derive_seed(grid_seed, STREAM_BOOT);
        let tc = cfg.trainer.with_seed(seeding::derive_seed(boot_seed, STREAM_TRAIN));
        let base = trainer::fit(&data, &tc, Some(&reference))?.params;
        let f_n = logit(&base, &probe)?;
        let bcfg = BootstrapConfig {
            replicates: cfg.bootstraps,
            alpha: 0.05,
            chain: cfg.chain,
            trainer: tc,
            budget: None,
            seed: boot_seed,
        };
        let bootstrap = bootstrap::map_replicates(&data, &bcfg, &base, |_, p| logit(p, &probe).map(|v| v - f_n))?
            .into_iter()
            .collect::<Result<Vec<f64>, MetricsError>>()?;

        let ks = ks_distance(&sampling, &bootstrap)?;
        rows.push(ConsistencyRow { n, ks_distance: ks, seed: cfg.seed });
        details.push(ConsistencyDetail { n, sampling, bootstrap });
    }
    Ok(ConsistencyReport { rows, details, reference_value: f_ref })
}

/// CSV with header `n,ksDistance,seed`.
pub fn write_consistency_csv<W: Write>(rows: &[ConsistencyRow], writer: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
