//! Mini-batch training of the convex CCNN objective.
//!
//! Two formulations are supported:
//!
//! * [`Regularization::Constrained`]: minimize the mean cross-entropy subject to
//!   `||A||_* <= C`, by projected SGD (`A <- proj(A - eta g)`).
//! * [`Regularization::Penalized`]: minimize the mean cross-entropy plus
//!   `lambda ||A||_{*mu}`; the smoothed norm is differentiable so plain SGD
//!   on the sum is used.
//!
//! Each epoch walks a seed-shuffled permutation of the data in consecutive
//! batches; `batch_size >= n` gives deterministic full-batch gradient descent.
//! The step size decays geometrically per epoch by `step_decay`.

use std::io::Write;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{self, CcnnParams, ModelError};
use crate::patching::PatchedDataset;
use crate::seeding;
use crate::spectral::{self, SpectralError};

/// Abort when the objective grows past this multiple of its starting value.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid trainer config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("objective diverged at epoch {epoch} (value {objective})")]
    NonFiniteObjective { epoch: usize, objective: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl TrainError {
    pub fn kind(&self) -> &'static str {
        match self {
            TrainError::InvalidConfig(_) => "invalid-config",
            TrainError::ShapeMismatch(_) => "shape-mismatch",
            TrainError::NonFiniteObjective { .. } => "non-finite-objective",
            TrainError::Model(e) => e.kind(),
            TrainError::Spectral(e) => e.kind(),
            TrainError::Csv(_) => "io",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Regularization {
    /// `||A||_* <= radius`.
    Constrained { radius: f64 },
    /// `+ lambda * ||A||_{*mu}`.
    Penalized { lambda: f64, mu: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    #[serde(flatten)]
    pub regularization: Regularization,
    pub step_size: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default = "default_decay")]
    pub step_decay: f64,
    /// Stop after this many mini-batch steps, even mid-epoch.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

fn default_decay() -> f64 {
    1.0
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        match self.regularization {
            Regularization::Constrained { radius } if !(radius > 0.0 && radius.is_finite()) => {
                return bad(format!("radius must be positive, got {radius}"))
            }
            Regularization::Penalized { lambda, mu } if !(lambda >= 0.0 && lambda.is_finite() && mu > 0.0) => {
                return bad(format!("need lambda >= 0 and mu > 0, got lambda={lambda}, mu={mu}"))
            }
            _ => {}
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad(format!("step size must be positive, got {}", self.step_size));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.step_decay > 0.0 && self.step_decay <= 1.0) {
            return bad(format!("step decay must lie in (0, 1], got {}", self.step_decay));
        }
        Ok(())
    }

    pub fn with_epochs(&self, epochs: usize) -> Self {
        TrainerConfig { epochs, ..self.clone() }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        TrainerConfig { seed, ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub objective: f64,
    #[serde(rename = "nuclearNorm")]
    pub nuclear_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: CcnnParams,
    pub final_objective: f64,
    /// Entry 0 is the initial point, entry `e` the state after epoch `e`.
    pub trace: Vec<EpochRecord>,
    /// Mini-batch steps taken.
    pub iterations: usize,
}

impl FitResult {
    pub fn objective_trace(&self) -> Vec<f64> {
        self.trace.iter().map(|r| r.objective).collect()
    }
}

fn check_shape(data: &PatchedDataset, params: &CcnnParams) -> Result<(), TrainError> {
    if data.is_empty() {
        return Err(TrainError::ShapeMismatch("empty training set".into()));
    }
    if params.dim() != data.dim()
        || params.patch_count() != data.patch_count()
        || params.num_classes() != data.num_classes()
    {
        return Err(TrainError::ShapeMismatch(format!(
            "parameters are (q={}, P={}, d2={}), data is (q={}, P={}, d2={})",
            params.dim(),
            params.patch_count(),
            params.num_classes(),
            data.dim(),
            data.patch_count(),
            data.num_classes()
        )));
    }
    Ok(())
}

/// Mean cross-entropy over the whole dataset. Per-sample losses are reduced
/// in index order, so the value does not depend on thread scheduling.
pub fn data_term(data: &PatchedDataset, params: &CcnnParams) -> Result<f64, TrainError> {
    check_shape(data, params)?;
    let losses = data
        .patches()
        .par_iter()
        .zip(data.labels().par_iter())
        .map(|(z, &y)| model::log_loss(&params.score(z)?, y))
        .collect::<Result<Vec<f64>, ModelError>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn penalty(cfg: &TrainerConfig, params: &CcnnParams) -> Result<f64, TrainError> {
    Ok(match cfg.regularization {
        Regularization::Constrained { .. } => 0.0,
        Regularization::Penalized { lambda, mu } => lambda * spectral::smoothed_nuclear_norm(params.matrix(), mu)?,
    })
}

/// The quantity [`fit`] minimizes: mean cross-entropy, plus
/// `lambda ||A||_{*mu}` in penalized mode.
pub fn objective(data: &PatchedDataset, cfg: &TrainerConfig, params: &CcnnParams) -> Result<f64, TrainError> {
    Ok(data_term(data, params)? + penalty(cfg, params)?)
}

/// Upper bound on the Lipschitz constant of the objective's gradient:
/// the softmax Hessian is bounded by `I/2`, giving `mean ||z||^2 / 2`, plus
/// `lambda / mu` for the smoothed penalty.
pub fn smoothness_bound(data: &PatchedDataset, cfg: &TrainerConfig) -> f64 {
    let mean_sq = data.patches().iter().map(|z| z.as_slice().iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
        / data.len().max(1) as f64;
    let reg = match cfg.regularization {
        Regularization::Constrained { .. } => 0.0,
        Regularization::Penalized { lambda, mu } => lambda / mu,
    };
    0.5 * mean_sq + reg
}

fn record(
    epoch: usize,
    data: &PatchedDataset,
    cfg: &TrainerConfig,
    params: &CcnnParams,
) -> Result<EpochRecord, TrainError> {
    Ok(EpochRecord {
        epoch,
        objective: objective(data, cfg, params)?,
        nuclear_norm: spectral::nuclear_norm(params.matrix())?,
    })
}

/// Fit from `init` (zeros if absent).
pub fn fit(data: &PatchedDataset, cfg: &TrainerConfig, init: Option<&CcnnParams>) -> Result<FitResult, TrainError> {
    cfg.validate()?;
    let mut params = match init {
        Some(p) => p.clone(),
        None => CcnnParams::zeros(data.dim(), data.patch_count(), data.num_classes()),
    };
    check_shape(data, &params)?;

    let first = record(0, data, cfg, &params)?;
    if !first.objective.is_finite() {
        return Err(TrainError::NonFiniteObjective { epoch: 0, objective: first.objective });
    }
    let limit = DIVERGENCE_FACTOR * first.objective.max(1e-6);
    let mut trace = vec![first];

    let n = data.len();
    let batch_size = cfg.batch_size.min(n);
    let full_batch = batch_size == n;
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);
    let (patch_count, num_classes) = (params.patch_count(), params.num_classes());
    let mut order: Vec<usize> = (0..n).collect();
    let mut steps = 0usize;

    for epoch in 1..=cfg.epochs {
        if steps >= max_steps {
            break;
        }
        let eta = cfg.step_size * cfg.step_decay.powi(epoch as i32 - 1);
        if !full_batch {
            order.shuffle(&mut seeding::rng(seeding::derive_seed(cfg.seed, epoch as u64)));
        }
        for chunk in order.chunks(batch_size) {
            if steps >= max_steps {
                break;
            }
            let batch: Vec<_> = chunk.iter().map(|&i| (&data.patches()[i], data.labels()[i])).collect();
            let (_, mut grad) = model::batch_loss_and_gradient(&params, &batch)?;
            let current = params.into_matrix();
            let next = match cfg.regularization {
                Regularization::Penalized { lambda, mu } => {
                    if lambda > 0.0 {
                        grad += spectral::smoothed_nuclear_norm_grad(&current, mu)? * lambda;
                    }
                    current - grad * eta
                }
                Regularization::Constrained { radius } => {
                    spectral::project_nuclear_ball(&(current - grad * eta), radius)?
                }
            };
            params = CcnnParams::from_matrix(next, patch_count, num_classes).map_err(|e| match e {
                ModelError::NonFinite => TrainError::NonFiniteObjective { epoch, objective: f64::NAN },
                other => other.into(),
            })?;
            steps += 1;
        }
        let rec = record(epoch, data, cfg, &params)?;
        if !rec.objective.is_finite() || rec.objective > limit {
            return Err(TrainError::NonFiniteObjective { epoch, objective: rec.objective });
        }
        trace.push(rec);
    }

    let final_objective = trace.last().map(|r| r.objective).unwrap_or(f64::NAN);
    Ok(FitResult { params, final_objective, trace, iterations: steps })
}

/// Outcome of fitting the same problem from two starting points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmColdReport {
    pub cold_objective: f64,
    pub warm_objective: f64,
    pub objective_gap: f64,
    pub parameter_distance: f64,
}

/// Random starting point with i.i.d. `N(0, 1 / (q P))` entries.
pub fn random_init(dim: usize, patch_count: usize, num_classes: usize, seed: u64) -> CcnnParams {
    let mut rng = seeding::rng(seed);
    let scale = 1.0 / ((dim * patch_count) as f64).sqrt();
    let m = DMatrix::from_fn(dim, patch_count * num_classes, |_, _| rng.sample::<f64, _>(StandardNormal) * scale);
    CcnnParams::from_matrix(m, patch_count, num_classes).expect("finite random init")
}

/// Fit once from zero and once from a random point; a convex objective should
/// reach the same optimal value from both.
pub fn warm_vs_cold_check(data: &PatchedDataset, cfg: &TrainerConfig) -> Result<WarmColdReport, TrainError> {
    let cold = fit(data, cfg, None)?;
    let init =
        random_init(data.dim(), data.patch_count(), data.num_classes(), seeding::derive_seed(cfg.seed, 0xC0FFEE));
    let warm = fit(data, cfg, Some(&init))?;
    Ok(WarmColdReport {
        cold_objective: cold.final_objective,
        warm_objective: warm.final_objective,
        objective_gap: (cold.final_objective - warm.final_objective).abs(),
        parameter_distance: (cold.params.matrix() - warm.params.matrix()).norm(),
    })
}

/// CSV with header `epoch,objective,nuclearNorm`.
pub fn write_trace_csv<W: Write>(trace: &[EpochRecord], writer: W) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_writer(writer);
    for r in trace {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
