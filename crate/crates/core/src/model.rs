//! The linear CCNN score `f_k(x) = sum_p <A_p^(k), z_p(x)>`, softmax
//! probabilities, cross-entropy and its exact gradient.
//!
//! The coefficient matrix has shape `q x (P * d2)`: class blocks
//! `[A^(0) | A^(1) | ...]`, each block holding one `q`-vector per patch. The
//! nuclear norm is taken over the whole matrix. Column `k * P + p` is
//! `A_p^(k)`; since the storage is column-major, block `k` is the contiguous
//! slice `[k*P*q, (k+1)*P*q)` and lines up entry for entry with a
//! [`PatchMatrix`] buffer.
//!
//! # CCNA layout
//!
//! `"CCNA" | u32 version=1 | u32 q | u32 P | u32 d2 | q*(P*d2) f64`, all
//! little-endian, values row-major.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::binio::{dim_u32, put_f64_le, put_u32_le, Cursor};
use crate::patching::PatchMatrix;

const PARAMS_MAGIC: &[u8; 4] = b"CCNA";
const PARAMS_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {label} out of range for {num_classes} classes")]
    BadLabel { label: usize, num_classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite parameters")]
    NonFinite,
    #[error("bad parameter file: {0}")]
    BadFile(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl ModelError {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelError::ShapeMismatch(_) => "shape-mismatch",
            ModelError::BadLabel { .. } => "bad-label",
            ModelError::EmptyBatch => "empty-batch",
            ModelError::NonFinite => "non-finite",
            ModelError::BadFile(_) => "bad-header",
            ModelError::Io(_) => "io",
        }
    }
}

/// Trainable coefficients of a CCNN.
#[derive(Debug, Clone, PartialEq)]
pub struct CcnnParams {
    weights: DMatrix<f64>,
    patch_count: usize,
    num_classes: usize,
}

impl CcnnParams {
    pub fn zeros(dim: usize, patch_count: usize, num_classes: usize) -> Self {
        CcnnParams { weights: DMatrix::zeros(dim, patch_count * num_classes), patch_count, num_classes }
    }

    pub fn from_matrix(weights: DMatrix<f64>, patch_count: usize, num_classes: usize) -> Result<Self, ModelError> {
        if weights.ncols() != patch_count * num_classes || patch_count == 0 || num_classes == 0 {
            return Err(ModelError::ShapeMismatch(format!(
                "{} columns cannot hold {patch_count} patches x {num_classes} classes",
                weights.ncols()
            )));
        }
        if !weights.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        Ok(CcnnParams { weights, patch_count, num_classes })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.weights
    }

    /// Feature dimension `q`.
    pub fn dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn patch_count(&self) -> usize {
        self.patch_count
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn same_shape(&self, other: &CcnnParams) -> bool {
        self.weights.shape() == other.weights.shape()
            && self.patch_count == other.patch_count
            && self.num_classes == other.num_classes
    }

    fn block(&self, class: usize) -> &[f64] {
        let len = self.patch_count * self.dim();
        &self.weights.as_slice()[class * len..(class + 1) * len]
    }

    fn check_patches(&self, patches: &PatchMatrix) -> Result<(), ModelError> {
        if patches.dim() != self.dim() || patches.rows() != self.patch_count {
            return Err(ModelError::ShapeMismatch(format!(
                "patches are {}x{}, parameters expect {}x{}",
                patches.rows(),
                patches.dim(),
                self.patch_count,
                self.dim()
            )));
        }
        Ok(())
    }

    /// Per-class logits for one sample.
    pub fn score(&self, patches: &PatchMatrix) -> Result<Vec<f64>, ModelError> {
        self.check_patches(patches)?;
        Ok(self.score_unchecked(patches))
    }

    fn score_unchecked(&self, patches: &PatchMatrix) -> Vec<f64> {
        let z = patches.as_slice();
        (0..self.num_classes).map(|k| dot(self.block(k), z)).collect()
    }

    pub fn predict_proba(&self, patches: &PatchMatrix) -> Result<Vec<f64>, ModelError> {
        Ok(softmax_probs(&self.score(patches)?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (q, cols) = self.weights.shape();
        let mut out = Vec::with_capacity(20 + 8 * q * cols);
        out.extend_from_slice(PARAMS_MAGIC);
        for v in [PARAMS_VERSION, dim_u32(q), dim_u32(self.patch_count), dim_u32(self.num_classes)] {
            put_u32_le(&mut out, v);
        }
        for r in 0..q {
            for c in 0..cols {
                put_f64_le(&mut out, self.weights[(r, c)]);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let trunc = |_| ModelError::BadFile("truncated parameter file".into());
        let mut cur = Cursor::new(bytes);
        if cur.take(4).map_err(trunc)? != PARAMS_MAGIC {
            return Err(ModelError::BadFile("expected magic CCNA".into()));
        }
        let version = cur.u32_le().map_err(trunc)?;
        if version != PARAMS_VERSION {
            return Err(ModelError::BadFile(format!("unsupported version {version}")));
        }
        let q = cur.u32_le().map_err(trunc)? as usize;
        let p = cur.u32_le().map_err(trunc)? as usize;
        let d2 = cur.u32_le().map_err(trunc)? as usize;
        let values = cur.f64_vec_le(q * p * d2).map_err(trunc)?;
        if cur.remaining() != 0 {
            return Err(ModelError::BadFile("trailing bytes".into()));
        }
        CcnnParams::from_matrix(DMatrix::from_row_slice(q, p * d2, &values), p, d2)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Hex SHA-256 of the CCNA encoding.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(scores: &[f64]) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + scores.iter().map(|&s| (s - max).exp()).sum::<f64>().ln()
}

/// Softmax with max-subtraction.
pub fn softmax_probs(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-log softmax(scores)[label]`.
pub fn log_loss(scores: &[f64], label: usize) -> Result<f64, ModelError> {
    if label >= scores.len() {
        return Err(ModelError::BadLabel { label, num_classes: scores.len() });
    }
    Ok((log_sum_exp(scores) - scores[label]).max(0.0))
}

/// Mean cross-entropy over a batch and its gradient with respect to the
/// coefficients.
pub fn batch_loss_and_gradient(
    params: &CcnnParams,
    batch: &[(&PatchMatrix, usize)],
) -> Result<(f64, DMatrix<f64>), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut grad = DMatrix::zeros(params.dim(), params.patch_count * params.num_classes);
    let block_len = params.patch_count * params.dim();
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for &(patches, label) in batch {
        params.check_patches(patches)?;
        if label >= params.num_classes {
            return Err(ModelError::BadLabel { label, num_classes: params.num_classes });
        }
        let scores = params.score_unchecked(patches);
        loss += log_sum_exp(&scores) - scores[label];
        let probs = softmax_probs(&scores);
        let z = patches.as_slice();
        let g = grad.as_mut_slice();
        for (k, p) in probs.iter().enumerate() {
            let coeff = (p - if k == label { 1.0 } else { 0.0 }) * scale;
            if coeff != 0.0 {
                for (gi, zi) in g[k * block_len..(k + 1) * block_len].iter_mut().zip(z) {
                    *gi += coeff * zi;
                }
            }
        }
    }
    Ok((loss * scale, grad))
}

/// Gradient of the mean cross-entropy over `batch`.
pub fn data_gradient(params: &CcnnParams, batch: &[(&PatchMatrix, usize)]) -> Result<DMatrix<f64>, ModelError> {
    Ok(batch_loss_and_gradient(params, batch)?.1)
}

/// Mean cross-entropy over `batch`.
pub fn mean_log_loss(params: &CcnnParams, batch: &[(&PatchMatrix, usize)]) -> Result<f64, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut total = 0.0;
    for &(patches, label) in batch {
        total += log_loss(&params.score(patches)?, label)?;
    }
    Ok(total / batch.len() as f64)
}
