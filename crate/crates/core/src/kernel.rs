//! Non-linear CCNN through kernel features.
//!
//! Instead of factorizing the full `nP x nP` patch kernel matrix, we draw `m`
//! anchor patches, eigendecompose their Gram matrix `K_mm = U diag(l) U^T` and
//! map a patch `z` to
//!
//! ```text
//! phi(z) = diag(l)^(-1/2) U^T [k(z, a_1), ..., k(z, a_m)]
//! ```
//!
//! keeping only eigenvalues above `1e-10 * max(l)`. Inner products of features
//! reproduce the kernel exactly on the anchors. When a secondary dataset is
//! given the anchors come from it, so the features do not depend on the
//! training samples.
//!
//! # CCNK layout
//!
//! `"CCNK" | u32 version=1 | u32 m | u32 m' | u32 dim | f64 gamma |
//! m*dim f64 anchors | m'*m f64 transform`, little-endian, row-major.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::binio::{dim_u32, put_f64_le, put_u32_le, Cursor};
use crate::data_io::Dataset;
use crate::patching::{PatchConfig, PatchError, PatchMatrix, PatchedDataset};
use crate::seeding;

const KERNEL_MAGIC: &[u8; 4] = b"CCNK";
const KERNEL_VERSION: u32 = 1;
/// Relative eigenvalue cutoff of the anchor Gram matrix.
pub const EIGEN_CUTOFF: f64 = 1e-10;

#[derive(Debug, thiserror::Error)]
pub enum KernelError {
    #[error("requested {requested} anchors but only {available} patches are available")]
    InsufficientAnchors { requested: usize, available: usize },
    #[error("anchor Gram matrix has no eigenvalue above the cutoff")]
    RankDeficient,
    #[error("invalid kernel config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error("bad kernel file: {0}")]
    BadFile(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl KernelError {
    pub fn kind(&self) -> &'static str {
        match self {
            KernelError::InsufficientAnchors { .. } => "insufficient-anchors",
            KernelError::RankDeficient => "rank-deficient",
            KernelError::InvalidConfig(_) => "invalid-config",
            KernelError::ShapeMismatch(_) => "shape-mismatch",
            KernelError::Patch(e) => e.kind(),
            KernelError::BadFile(_) => "bad-header",
            KernelError::Io(_) => "io",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelKind {
    /// `k(u, v) = exp(-gamma ||u - v||^2)`.
    Rbf { gamma: f64 },
}

#[derive(Debug, Clone)]
pub struct KernelConfig {
    pub kind: KernelKind,
    pub anchor_count: usize,
    /// Unlabeled data from the same distribution; anchors are drawn from its
    /// patches when present.
    pub secondary: Option<Dataset>,
}

impl KernelConfig {
    pub fn rbf(gamma: f64, anchor_count: usize) -> Self {
        KernelConfig { kind: KernelKind::Rbf { gamma }, anchor_count, secondary: None }
    }

    pub fn with_secondary(mut self, data: Dataset) -> Self {
        self.secondary = Some(data);
        self
    }

    fn gamma(&self) -> f64 {
        match self.kind {
            KernelKind::Rbf { gamma } => gamma,
        }
    }
}

#[inline]
pub fn rbf(u: &[f64], v: &[f64], gamma: f64) -> f64 {
    let sq: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
    (-gamma * sq).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelFeatureMap {
    gamma: f64,
    /// `m x dim`, one anchor per row.
    anchors: DMatrix<f64>,
    /// `m' x m`.
    transform: DMatrix<f64>,
}

impl KernelFeatureMap {
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn anchor_count(&self) -> usize {
        self.anchors.nrows()
    }

    /// Retained feature dimension `m'`.
    pub fn feature_dim(&self) -> usize {
        self.transform.nrows()
    }

    pub fn patch_dim(&self) -> usize {
        self.anchors.ncols()
    }

    pub fn anchor(&self, i: usize) -> Vec<f64> {
        self.anchors.row(i).iter().copied().collect()
    }

    pub fn transform(&self) -> &DMatrix<f64> {
        &self.transform
    }

    /// Feature vector of a single patch.
    pub fn feature(&self, z: &[f64]) -> Result<Vec<f64>, KernelError> {
        if z.len() != self.patch_dim() {
            return Err(KernelError::ShapeMismatch(format!(
                "patch of length {}, anchors have {}",
                z.len(),
                self.patch_dim()
            )));
        }
        Ok(self.feature_unchecked(z))
    }

    fn feature_unchecked(&self, z: &[f64]) -> Vec<f64> {
        let kvec = DVector::from_iterator(
            self.anchor_count(),
            (0..self.anchor_count()).map(|i| {
                let a = self.anchors.row(i);
                let sq: f64 = a.iter().zip(z).map(|(x, y)| (x - y) * (x - y)).sum();
                (-self.gamma * sq).exp()
            }),
        );
        (&self.transform * kvec).iter().copied().collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (m, dim) = self.anchors.shape();
        let m_prime = self.transform.nrows();
        let mut out = Vec::new();
        out.extend_from_slice(KERNEL_MAGIC);
        for v in [KERNEL_VERSION, dim_u32(m), dim_u32(m_prime), dim_u32(dim)] {
            put_u32_le(&mut out, v);
        }
        put_f64_le(&mut out, self.gamma);
        for r in 0..m {
            for c in 0..dim {
                put_f64_le(&mut out, self.anchors[(r, c)]);
            }
        }
        for r in 0..m_prime {
            for c in 0..m {
                put_f64_le(&mut out, self.transform[(r, c)]);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, KernelError> {
        let trunc = |_| KernelError::BadFile("truncated kernel file".into());
        let mut cur = Cursor::new(bytes);
        if cur.take(4).map_err(trunc)? != KERNEL_MAGIC {
            return Err(KernelError::BadFile("expected magic CCNK".into()));
        }
        let version = cur.u32_le().map_err(trunc)?;
        if version != KERNEL_VERSION {
            return Err(KernelError::BadFile(format!("unsupported version {version}")));
        }
        let m = cur.u32_le().map_err(trunc)? as usize;
        let m_prime = cur.u32_le().map_err(trunc)? as usize;
        let dim = cur.u32_le().map_err(trunc)? as usize;
        let gamma = cur.f64_le().map_err(trunc)?;
        let anchors = cur.f64_vec_le(m * dim).map_err(trunc)?;
        let transform = cur.f64_vec_le(m_prime * m).map_err(trunc)?;
        if cur.remaining() != 0 {
            return Err(KernelError::BadFile("trailing bytes".into()));
        }
        Ok(KernelFeatureMap {
            gamma,
            anchors: DMatrix::from_row_slice(m, dim, &anchors),
            transform: DMatrix::from_row_slice(m_prime, m, &transform),
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), KernelError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, KernelError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Build the Nystrom feature map from `m` anchors drawn without replacement
/// from the patches of `source` (or of the secondary dataset, patched with
/// `patch_cfg`).
pub fn build_feature_map(
    source: &PatchedDataset,
    patch_cfg: &PatchConfig,
    cfg: &KernelConfig,
    seed: u64,
) -> Result<KernelFeatureMap, KernelError> {
    let gamma = cfg.gamma();
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(KernelError::InvalidConfig(format!("gamma must be positive, got {gamma}")));
    }
    if cfg.anchor_count == 0 {
        return Err(KernelError::InvalidConfig("anchor count must be positive".into()));
    }
    let secondary;
    let pool = match &cfg.secondary {
        Some(ds) => {
            secondary = PatchedDataset::from_dataset(ds, patch_cfg)?;
            if secondary.dim() != source.dim() {
                return Err(KernelError::ShapeMismatch(format!(
                    "secondary patches have dimension {}, training patches {}",
                    secondary.dim(),
                    source.dim()
                )));
            }
            &secondary
        }
        None => source,
    };
    let per_sample = pool.patch_count();
    let available = pool.len() * per_sample;
    let m = cfg.anchor_count;
    if m > available {
        return Err(KernelError::InsufficientAnchors { requested: m, available });
    }
    let mut rng = seeding::rng(seed);
    let mut picks = rand::seq::index::sample(&mut rng, available, m).into_vec();
    picks.sort_unstable();
    let dim = pool.dim();
    let mut anchors = DMatrix::zeros(m, dim);
    for (r, &flat) in picks.iter().enumerate() {
        let row = pool.patches()[flat / per_sample].row(flat % per_sample);
        for (c, &v) in row.iter().enumerate() {
            anchors[(r, c)] = v;
        }
    }
    from_anchors(anchors, gamma)
}

/// Feature map for an explicit set of anchors (`m x dim`, one per row).
pub fn from_anchors(anchors: DMatrix<f64>, gamma: f64) -> Result<KernelFeatureMap, KernelError> {
    let m = anchors.nrows();
    let gram = DMatrix::from_fn(m, m, |i, j| {
        let (a, b) = (anchors.row(i), anchors.row(j));
        let sq: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
        (-gamma * sq).exp()
    });
    let eig = SymmetricEigen::new(gram);
    let max_eig = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max_eig.is_nan() || max_eig <= 0.0 {
        return Err(KernelError::RankDeficient);
    }
    let cutoff = EIGEN_CUTOFF * max_eig;
    let mut keep: Vec<usize> = (0..m).filter(|&i| eig.eigenvalues[i] > cutoff).collect();
    if keep.is_empty() {
        return Err(KernelError::RankDeficient);
    }
    keep.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let transform = DMatrix::from_fn(keep.len(), m, |r, c| {
        let idx = keep[r];
        eig.eigenvectors[(c, idx)] / eig.eigenvalues[idx].sqrt()
    });
    Ok(KernelFeatureMap { gamma, anchors, transform })
}

/// Replace every patch row by its feature vector.
pub fn featurize(map: &KernelFeatureMap, patches: &PatchMatrix) -> Result<PatchMatrix, KernelError> {
    if patches.dim() != map.patch_dim() {
        return Err(KernelError::ShapeMismatch(format!(
            "patch dimension {} does not match anchor dimension {}",
            patches.dim(),
            map.patch_dim()
        )));
    }
    let mut out = Vec::with_capacity(patches.rows() * map.feature_dim());
    for row in patches.iter_rows() {
        out.extend(map.feature_unchecked(row));
    }
    Ok(PatchMatrix::from_rows(out, patches.rows(), map.feature_dim(), patches.source_index)?)
}

pub fn featurize_dataset(map: &KernelFeatureMap, data: &PatchedDataset) -> Result<PatchedDataset, KernelError> {
    let patches = data.patches().par_iter().map(|p| featurize(map, p)).collect::<Result<Vec<_>, _>>()?;
    Ok(PatchedDataset::new(patches, data.labels().to_vec(), data.num_classes())?)
}
