//! Patch extraction: each sample becomes a `P x q` matrix whose rows are the
//! vectorized `l2 x l2 x d` windows at stride `s`.
//!
//! Windows are enumerated row-major over the grid of top-left corners, and
//! each window is flattened row-major over `(row, col, channel)`. The order is
//! arbitrary but frozen: model coefficients are indexed by it, so warm starts
//! only make sense if it never changes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::{Dataset, Sample};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PatchError {
    #[error("patch size and stride must be positive (size={size}, stride={stride})")]
    InvalidConfig { size: usize, stride: usize },
    #[error("patch size {size} exceeds image side {side}")]
    PatchTooLarge { size: usize, side: usize },
    #[error("stride {stride} does not tile side {side} with patch size {size}")]
    MisalignedStride { side: usize, size: usize, stride: usize },
    #[error("patch matrices disagree in shape: {0}")]
    ShapeMismatch(String),
}

impl PatchError {
    pub fn kind(&self) -> &'static str {
        match self {
            PatchError::InvalidConfig { .. } => "invalid-config",
            PatchError::PatchTooLarge { .. } => "patch-too-large",
            PatchError::MisalignedStride { .. } => "misaligned-stride",
            PatchError::ShapeMismatch(_) => "shape-mismatch",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub size: usize,
    pub stride: usize,
}

impl PatchConfig {
    pub fn new(size: usize, stride: usize) -> Result<Self, PatchError> {
        if size == 0 || stride == 0 {
            return Err(PatchError::InvalidConfig { size, stride });
        }
        Ok(PatchConfig { size, stride })
    }

    /// Number of window positions along one side of length `side`.
    pub fn positions(&self, side: usize) -> Result<usize, PatchError> {
        if self.size == 0 || self.stride == 0 {
            return Err(PatchError::InvalidConfig { size: self.size, stride: self.stride });
        }
        if self.size > side {
            return Err(PatchError::PatchTooLarge { size: self.size, side });
        }
        let span = side - self.size;
        if !span.is_multiple_of(self.stride) {
            return Err(PatchError::MisalignedStride { side, size: self.size, stride: self.stride });
        }
        Ok(span / self.stride + 1)
    }

    pub fn patch_dim(&self, channels: usize) -> usize {
        self.size * self.size * channels
    }
}

/// `P = ((l1 - l2) / s + 1)^2` for a square `l1 x l1` image.
pub fn patch_count(side: usize, cfg: &PatchConfig) -> Result<usize, PatchError> {
    let k = cfg.positions(side)?;
    Ok(k * k)
}

/// `rows x dim` row-major matrix of vectorized patches of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMatrix {
    data: Vec<f64>,
    rows: usize,
    dim: usize,
    pub source_index: usize,
}

impl PatchMatrix {
    pub fn from_rows(data: Vec<f64>, rows: usize, dim: usize, source_index: usize) -> Result<Self, PatchError> {
        if data.len() != rows * dim {
            return Err(PatchError::ShapeMismatch(format!("{} values for {rows} rows of dimension {dim}", data.len())));
        }
        Ok(PatchMatrix { data, rows, dim, source_index })
    }

    /// Number of patches `P`.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Patch dimension `q`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, p: usize) -> &[f64] {
        &self.data[p * self.dim..(p + 1) * self.dim]
    }

    /// All patches concatenated, patch-major.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }
}

pub fn extract_patches(sample: &Sample, cfg: &PatchConfig) -> Result<PatchMatrix, PatchError> {
    extract_patches_indexed(sample, cfg, 0)
}

fn extract_patches_indexed(sample: &Sample, cfg: &PatchConfig, source_index: usize) -> Result<PatchMatrix, PatchError> {
    let grid_rows = cfg.positions(sample.height)?;
    let grid_cols = cfg.positions(sample.width)?;
    let dim = cfg.patch_dim(sample.channels);
    let rows = grid_rows * grid_cols;
    let row_len = cfg.size * sample.channels;
    let mut data = Vec::with_capacity(rows * dim);
    for gr in 0..grid_rows {
        for gc in 0..grid_cols {
            let (top, left) = (gr * cfg.stride, gc * cfg.stride);
            for r in top..top + cfg.size {
                let start = (r * sample.width + left) * sample.channels;
                data.extend_from_slice(&sample.pixels[start..start + row_len]);
            }
        }
    }
    Ok(PatchMatrix { data, rows, dim, source_index })
}

/// A dataset converted to patch matrices, the input of the trainer.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchedDataset {
    patches: Vec<PatchMatrix>,
    labels: Vec<usize>,
    num_classes: usize,
    patch_count: usize,
    dim: usize,
}

impl PatchedDataset {
    pub fn from_dataset(data: &Dataset, cfg: &PatchConfig) -> Result<Self, PatchError> {
        let patches = data
            .samples()
            .par_iter()
            .enumerate()
            .map(|(i, s)| extract_patches_indexed(s, cfg, i))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(patches, data.labels(), data.num_classes())
    }

    pub fn new(patches: Vec<PatchMatrix>, labels: Vec<usize>, num_classes: usize) -> Result<Self, PatchError> {
        let first = patches.first().ok_or_else(|| PatchError::ShapeMismatch("no samples".into()))?;
        let (patch_count, dim) = (first.rows, first.dim);
        if labels.len() != patches.len() {
            return Err(PatchError::ShapeMismatch(format!("{} labels for {} samples", labels.len(), patches.len())));
        }
        if let Some(bad) = patches.iter().position(|m| m.rows != patch_count || m.dim != dim) {
            return Err(PatchError::ShapeMismatch(format!("sample {bad} differs from {patch_count}x{dim}")));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(PatchError::ShapeMismatch(format!("label {l} out of range for {num_classes} classes")));
        }
        Ok(PatchedDataset { patches, labels, num_classes, patch_count, dim })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patches(&self) -> &[PatchMatrix] {
        &self.patches
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn patch_count(&self) -> usize {
        self.patch_count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn select(&self, indices: &[usize]) -> PatchedDataset {
        PatchedDataset {
            patches: indices.iter().map(|&i| self.patches[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            patch_count: self.patch_count,
            dim: self.dim,
        }
    }
}
