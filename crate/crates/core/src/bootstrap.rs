//! Warm-start bootstrap of a CCNN and percentile prediction intervals.
//!
//! A base model `A_0` is fit on the full training set from zero. Replicate
//! `b` resamples `n` training points with replacement and refits starting
//! from `A_{b-1}` ([`ChainMode::WarmChain`]) or from `A_0`
//! ([`ChainMode::ParallelFromBase`]). Because the objective is convex the
//! optimum does not depend on the starting point, so warm starts only cut
//! the number of iterations. Each replicate's softmax probabilities on the
//! test set fill one slice of the [`PredictionCube`].
//!
//! # Percentiles
//!
//! For `B` sorted values `x_0 <= ... <= x_{B-1}` the `p`-quantile is
//! `x_j + (h - j) (x_{j+1} - x_j)` with `h = (B - 1) p`, `j = floor(h)`
//! (linear interpolation between order statistics). The `1 - alpha`
//! interval is `[Q(alpha/2), Q(1 - alpha/2)]`.
//!
//! # CCNP layout
//!
//! `"CCNP" | u32 B | u32 n' | u32 d2 | B*n'*d2 f64`, little-endian, indexed
//! `[b][i][k]`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{dim_u32, put_f64_le, put_u32_le, Cursor};
use crate::data_io;
use crate::model::CcnnParams;
use crate::patching::PatchedDataset;
use crate::seeding;
use crate::trainer::{self, FitResult, TrainError, TrainerConfig};

const CUBE_MAGIC: &[u8; 4] = b"CCNP";

#[derive(Debug, thiserror::Error)]
pub enum BootstrapError {
    #[error("invalid bootstrap config: {0}")]
    InvalidConfig(String),
    #[error("alpha must lie in (0, 1), got {0}")]
    BadAlpha(f64),
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("base fit failed: {0}")]
    Base(#[source] TrainError),
    #[error("bootstrap replicate {index} failed: {source}")]
    Replicate { index: usize, source: TrainError },
    #[error("bad cube file: {0}")]
    BadFile(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl BootstrapError {
    pub fn kind(&self) -> &'static str {
        match self {
            BootstrapError::InvalidConfig(_) => "invalid-config",
            BootstrapError::BadAlpha(_) => "bad-alpha",
            BootstrapError::SizeMismatch(_) => "size-mismatch",
            BootstrapError::Base(e) | BootstrapError::Replicate { source: e, .. } => e.kind(),
            BootstrapError::BadFile(_) => "bad-header",
            BootstrapError::Io(_) | BootstrapError::Csv(_) => "io",
        }
    }

    /// Index of the failing replicate, if any.
    pub fn replicate(&self) -> Option<usize> {
        match self {
            BootstrapError::Replicate { index, .. } => Some(*index),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChainMode {
    #[default]
    WarmChain,
    ParallelFromBase,
}

/// Training budget of each replicate refit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReplicateBudget {
    Epochs(usize),
    /// Mini-batch steps.
    Steps(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub alpha: f64,
    #[serde(default)]
    pub chain: ChainMode,
    /// Trainer of the base fit; replicates reuse it with `budget` applied.
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub budget: Option<ReplicateBudget>,
    pub seed: u64,
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<(), BootstrapError> {
        if self.replicates < 2 {
            return Err(BootstrapError::InvalidConfig(format!("need at least 2 replicates, got {}", self.replicates)));
        }
        check_alpha(self.alpha)?;
        self.trainer.validate().map_err(BootstrapError::Base)
    }

    fn replicate_trainer(&self, n: usize, b: usize) -> TrainerConfig {
        let mut cfg = self.trainer.with_seed(seeding::derive_seed(self.seed, 2 * b as u64 + 1));
        match self.budget {
            None => {}
            Some(ReplicateBudget::Epochs(e)) => {
                cfg.epochs = e;
                cfg.max_steps = None;
            }
            Some(ReplicateBudget::Steps(s)) => {
                let per_epoch = n.div_ceil(cfg.batch_size.min(n).max(1));
                cfg.epochs = s.div_ceil(per_epoch.max(1));
                cfg.max_steps = Some(s);
            }
        }
        cfg
    }

    fn resample_seed(&self, b: usize) -> u64 {
        seeding::derive_seed(self.seed, 2 * b as u64)
    }
}

fn check_alpha(alpha: f64) -> Result<(), BootstrapError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(BootstrapError::BadAlpha(alpha))
    }
}

/// Base fit `A_0` on the full training set from zero.
pub fn fit_base(train: &PatchedDataset, cfg: &BootstrapConfig) -> Result<FitResult, BootstrapError> {
    cfg.validate()?;
    trainer::fit(train, &cfg.trainer, None).map_err(BootstrapError::Base)
}

/// Run the `B` replicate refits starting from `base` and apply `visit` to
/// each fitted model; results are ordered by replicate index.
pub fn map_replicates<T, F>(
    train: &PatchedDataset,
    cfg: &BootstrapConfig,
    base: &CcnnParams,
    visit: F,
) -> Result<Vec<T>, BootstrapError>
where
    T: Send,
    F: Fn(usize, &CcnnParams) -> T + Sync,
{
    cfg.validate()?;
    let n = train.len();
    let refit = |b: usize, init: &CcnnParams| -> Result<CcnnParams, BootstrapError> {
        let wrap = |source| BootstrapError::Replicate { index: b, source };
        let idx = data_io::resample_indices(n, n, cfg.resample_seed(b))
            .map_err(|e| BootstrapError::SizeMismatch(e.to_string()))?;
        let sample = train.select(&idx);
        Ok(trainer::fit(&sample, &cfg.replicate_trainer(n, b), Some(init)).map_err(wrap)?.params)
    };
    match cfg.chain {
        ChainMode::WarmChain => {
            let mut out = Vec::with_capacity(cfg.replicates);
            let mut prev = base.clone();
            for b in 0..cfg.replicates {
                let params = refit(b, &prev)?;
                out.push(visit(b, &params));
                prev = params;
            }
            Ok(out)
        }
        ChainMode::ParallelFromBase => {
            (0..cfg.replicates).into_par_iter().map(|b| refit(b, base).map(|p| visit(b, &p))).collect()
        }
    }
}

/// Probabilities `pp[b][i][k]` of replicate `b` on test sample `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionCube {
    replicates: usize,
    samples: usize,
    classes: usize,
    values: Vec<f64>,
}

impl PredictionCube {
    pub fn new(replicates: usize, samples: usize, classes: usize, values: Vec<f64>) -> Result<Self, BootstrapError> {
        if values.len() != replicates * samples * classes {
            return Err(BootstrapError::SizeMismatch(format!(
                "{} values for a {replicates}x{samples}x{classes} cube",
                values.len()
            )));
        }
        Ok(PredictionCube { replicates, samples, classes, values })
    }

    pub fn replicates(&self) -> usize {
        self.replicates
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, b: usize, i: usize, k: usize) -> f64 {
        self.values[(b * self.samples + i) * self.classes + k]
    }

    /// Probability vector of replicate `b` on sample `i`.
    pub fn slice(&self, b: usize, i: usize) -> &[f64] {
        let start = (b * self.samples + i) * self.classes;
        &self.values[start..start + self.classes]
    }

    /// All replicates' probabilities for `(i, k)`.
    pub fn column(&self, i: usize, k: usize) -> Vec<f64> {
        (0..self.replicates).map(|b| self.get(b, i, k)).collect()
    }

    /// Across-replicate mean probability vector of sample `i`.
    pub fn mean_probs(&self, i: usize) -> Vec<f64> {
        (0..self.classes).map(|k| self.column(i, k).iter().sum::<f64>() / self.replicates as f64).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.values.len());
        out.extend_from_slice(CUBE_MAGIC);
        for v in [self.replicates, self.samples, self.classes] {
            put_u32_le(&mut out, dim_u32(v));
        }
        for &v in &self.values {
            put_f64_le(&mut out, v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BootstrapError> {
        let trunc = |_| BootstrapError::BadFile("truncated cube file".into());
        let mut cur = Cursor::new(bytes);
        if cur.take(4).map_err(trunc)? != CUBE_MAGIC {
            return Err(BootstrapError::BadFile("expected magic CCNP".into()));
        }
        let b = cur.u32_le().map_err(trunc)? as usize;
        let n = cur.u32_le().map_err(trunc)? as usize;
        let d = cur.u32_le().map_err(trunc)? as usize;
        let values = cur.f64_vec_le(b * n * d).map_err(trunc)?;
        if cur.remaining() != 0 {
            return Err(BootstrapError::BadFile("trailing bytes".into()));
        }
        PredictionCube::new(b, n, d, values)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), BootstrapError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, BootstrapError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapRun {
    pub cube: PredictionCube,
    pub base: FitResult,
    /// SHA-256 of each replicate's parameters, by replicate index.
    pub digests: Vec<String>,
}

/// Full warm-start bootstrap: base fit, `B` refits, predictions on `test`.
pub fn run_bootstrap(
    train: &PatchedDataset,
    test: &PatchedDataset,
    cfg: &BootstrapConfig,
) -> Result<BootstrapRun, BootstrapError> {
    if test.is_empty() || train.is_empty() {
        return Err(BootstrapError::SizeMismatch("train and test sets must be non-empty".into()));
    }
    if (train.dim(), train.patch_count(), train.num_classes()) != (test.dim(), test.patch_count(), test.num_classes()) {
        return Err(BootstrapError::SizeMismatch(format!(
            "train is (q={}, P={}, d2={}), test is (q={}, P={}, d2={})",
            train.dim(),
            train.patch_count(),
            train.num_classes(),
            test.dim(),
            test.patch_count(),
            test.num_classes()
        )));
    }
    let base = fit_base(train, cfg)?;
    let slices = map_replicates(train, cfg, &base.params, |_, params| {
        let probs: Vec<f64> =
            test.patches().iter().flat_map(|z| params.predict_proba(z).expect("test shape checked above")).collect();
        (probs, params.digest())
    })?;
    let mut values = Vec::with_capacity(cfg.replicates * test.len() * test.num_classes());
    let mut digests = Vec::with_capacity(cfg.replicates);
    for (probs, digest) in slices {
        values.extend(probs);
        digests.push(digest);
    }
    let cube = PredictionCube::new(cfg.replicates, test.len(), test.num_classes(), values)?;
    Ok(BootstrapRun { cube, base, digests })
}

/// Linear-interpolation quantile of ascending `sorted` values.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let j = h.floor() as usize;
    if j + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[j] + (h - j as f64) * (sorted[j + 1] - sorted[j])
}

/// Percentile bounds per `(sample, class)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalTable {
    samples: usize,
    classes: usize,
    alpha: f64,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl IntervalTable {
    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Nominal coverage `1 - alpha`.
    pub fn level(&self) -> f64 {
        1.0 - self.alpha
    }

    pub fn lower(&self, i: usize, k: usize) -> f64 {
        self.lower[i * self.classes + k]
    }

    pub fn upper(&self, i: usize, k: usize) -> f64 {
        self.upper[i * self.classes + k]
    }

    pub fn width(&self, i: usize, k: usize) -> f64 {
        self.upper(i, k) - self.lower(i, k)
    }

    pub fn widths(&self) -> impl Iterator<Item = f64> + '_ {
        self.upper.iter().zip(&self.lower).map(|(u, l)| u - l)
    }
}

pub fn intervals(cube: &PredictionCube, alpha: f64) -> Result<IntervalTable, BootstrapError> {
    check_alpha(alpha)?;
    if cube.replicates < 2 {
        return Err(BootstrapError::InvalidConfig(format!("need at least 2 replicates, got {}", cube.replicates)));
    }
    let mut lower = Vec::with_capacity(cube.samples * cube.classes);
    let mut upper = Vec::with_capacity(cube.samples * cube.classes);
    for i in 0..cube.samples {
        for k in 0..cube.classes {
            let mut col = cube.column(i, k);
            col.sort_unstable_by(f64::total_cmp);
            lower.push(quantile_sorted(&col, alpha / 2.0));
            upper.push(quantile_sorted(&col, 1.0 - alpha / 2.0));
        }
    }
    Ok(IntervalTable { samples: cube.samples, classes: cube.classes, alpha, lower, upper })
}

/// Per-sample summary of an interval table.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleReport {
    pub sample_index: usize,
    pub true_label: usize,
    /// Argmax of the across-replicate mean probability.
    pub predicted_class: usize,
    pub true_class_interval: (f64, f64),
    pub widths: Vec<f64>,
}

pub fn interval_report(
    cube: &PredictionCube,
    table: &IntervalTable,
    labels: &[usize],
) -> Result<Vec<SampleReport>, BootstrapError> {
    if labels.len() != table.samples || cube.samples != table.samples || cube.classes != table.classes {
        return Err(BootstrapError::SizeMismatch(format!(
            "{} labels, cube with {} samples, table with {} samples",
            labels.len(),
            cube.samples,
            table.samples
        )));
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            if y >= table.classes {
                return Err(BootstrapError::SizeMismatch(format!(
                    "label {y} out of range for {} classes",
                    table.classes
                )));
            }
            let mean = cube.mean_probs(i);
            let predicted_class = mean
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &p)| if p > best.1 { (k, p) } else { best })
                .0;
            Ok(SampleReport {
                sample_index: i,
                true_label: y,
                predicted_class,
                true_class_interval: (table.lower(i, y), table.upper(i, y)),
                widths: (0..table.classes).map(|k| table.width(i, k)).collect(),
            })
        })
        .collect()
}

/// One row of the interval CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct IntervalRow {
    pub sample_index: usize,
    pub true_label: usize,
    pub predicted_class: usize,
    pub class: usize,
    pub lower: f64,
    pub upper: f64,
    pub width: f64,
}

/// Interval CSV: a `# alpha=...,level=...` comment line, then one row per
/// `(sample, class)`.
pub fn write_interval_csv<W: Write>(
    report: &[SampleReport],
    table: &IntervalTable,
    mut writer: W,
) -> Result<(), BootstrapError> {
    writeln!(writer, "# alpha={},level={}", table.alpha, table.level())?;
    let mut w = csv::Writer::from_writer(writer);
    for r in report {
        for k in 0..table.classes {
            w.serialize(IntervalRow {
                sample_index: r.sample_index,
                true_label: r.true_label,
                predicted_class: r.predicted_class,
                class: k,
                lower: table.lower(r.sample_index, k),
                upper: table.upper(r.sample_index, k),
                width: r.widths[k],
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Parse an interval CSV, returning the recorded alpha and the rows.
pub fn read_interval_csv<R: Read>(mut reader: R) -> Result<(Option<f64>, Vec<IntervalRow>), BootstrapError> {
    let mut text = String::new();
    reader.read_to_string(&mut text)?;
    let alpha = text
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("# "))
        .and_then(|l| l.split(',').find_map(|kv| kv.strip_prefix("alpha=")).and_then(|v| v.parse().ok()));
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let rows = r.deserialize().collect::<Result<Vec<IntervalRow>, _>>()?;
    Ok((alpha, rows))
}

/// The `B` probabilities of every class for test sample `i`, one row per
/// replicate: `bootstrap,class_0,...`.
pub fn write_histogram_csv<W: Write>(cube: &PredictionCube, i: usize, writer: W) -> Result<(), BootstrapError> {
    if i >= cube.samples {
        return Err(BootstrapError::SizeMismatch(format!("sample {i} out of range for {} samples", cube.samples)));
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["bootstrap".to_string()];
    header.extend((0..cube.classes).map(|k| format!("class_{k}")));
    w.write_record(&header)?;
    for b in 0..cube.replicates {
        let mut rec = vec![b.to_string()];
        rec.extend(cube.slice(b, i).iter().map(|p| p.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
