//! Nuclear norm, its smoothed (Huberized) version, and Euclidean projection
//! onto the nuclear-norm ball.
//!
//! The smoothed norm `sup_{||Z||_2 <= 1} tr(A^T Z) - mu/2 ||Z||_F^2` decouples
//! over singular values: with `A = U diag(s) V^T` the maximizer is
//! `Z = U diag(min(s/mu, 1)) V^T`, giving `sum_i h_mu(s_i)` where
//! `h_mu(s) = s^2 / (2 mu)` for `s <= mu` and `s - mu/2` otherwise. The same
//! `Z` is the gradient.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Relative cutoff below which singular values are treated as zero when
/// projecting.
pub const DEFAULT_SVD_TOLERANCE: f64 = 1e-12;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SpectralError {
    #[error("matrix has non-finite entries")]
    NonFiniteInput,
    #[error("smoothing parameter mu must be positive, got {0}")]
    NonpositiveMu(f64),
    #[error("nuclear-ball radius must be positive, got {0}")]
    NonpositiveRadius(f64),
    #[error("svd tolerance must lie in (0, 1e-3], got {0}")]
    InvalidTolerance(f64),
    #[error("singular value decomposition did not converge")]
    SvdFailed,
}

impl SpectralError {
    pub fn kind(&self) -> &'static str {
        match self {
            SpectralError::NonFiniteInput => "non-finite-input",
            SpectralError::NonpositiveMu(_) => "nonpositive-mu",
            SpectralError::NonpositiveRadius(_) => "nonpositive-radius",
            SpectralError::InvalidTolerance(_) => "invalid-tolerance",
            SpectralError::SvdFailed => "svd-failed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralConfig {
    pub mu: f64,
    pub svd_tolerance: f64,
}

impl SpectralConfig {
    pub fn new(mu: f64, svd_tolerance: f64) -> Result<Self, SpectralError> {
        let cfg = SpectralConfig { mu, svd_tolerance };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SpectralError> {
        check_mu(self.mu)?;
        if !(self.svd_tolerance > 0.0 && self.svd_tolerance <= 1e-3) {
            return Err(SpectralError::InvalidTolerance(self.svd_tolerance));
        }
        Ok(())
    }
}

impl Default for SpectralConfig {
    fn default() -> Self {
        SpectralConfig { mu: 0.1, svd_tolerance: DEFAULT_SVD_TOLERANCE }
    }
}

fn check_finite(a: &DMatrix<f64>) -> Result<(), SpectralError> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SpectralError::NonFiniteInput)
    }
}

fn check_mu(mu: f64) -> Result<(), SpectralError> {
    if mu > 0.0 && mu.is_finite() {
        Ok(())
    } else {
        Err(SpectralError::NonpositiveMu(mu))
    }
}

// nalgebra's Golub-Kahan SVD occasionally deflates too early on
// rank-deficient input (reconstruction off by ~1e-3), which is exactly what
// nuclear-ball projections produce, so decompositions go through faer.
fn to_faer(a: &DMatrix<f64>) -> faer::Mat<f64> {
    faer::Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

struct ThinSvd {
    u: DMatrix<f64>,
    sigma: DVector<f64>,
    v_t: DMatrix<f64>,
}

impl ThinSvd {
    fn new(a: &DMatrix<f64>) -> Result<Self, SpectralError> {
        let svd = to_faer(a).thin_svd().map_err(|_| SpectralError::SvdFailed)?;
        let (u, s, v) = (svd.U(), svd.S().column_vector(), svd.V());
        Ok(ThinSvd {
            u: DMatrix::from_fn(u.nrows(), u.ncols(), |i, j| u[(i, j)]),
            sigma: DVector::from_fn(s.nrows(), |i, _| s[i]),
            v_t: DMatrix::from_fn(v.ncols(), v.nrows(), |i, j| v[(j, i)]),
        })
    }

    /// `U diag(f(s)) V^T`.
    fn rebuild(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let mut scaled = self.u.clone();
        for (mut col, &s) in scaled.column_iter_mut().zip(self.sigma.iter()) {
            col *= f(s);
        }
        scaled * &self.v_t
    }
}

pub fn singular_values(a: &DMatrix<f64>) -> Result<Vec<f64>, SpectralError> {
    check_finite(a)?;
    to_faer(a).singular_values().map_err(|_| SpectralError::SvdFailed)
}

/// Sum of singular values.
pub fn nuclear_norm(a: &DMatrix<f64>) -> Result<f64, SpectralError> {
    Ok(singular_values(a)?.iter().sum())
}

/// Huber function applied to one singular value.
#[inline]
pub fn huber(sigma: f64, mu: f64) -> f64 {
    if sigma <= mu {
        sigma * sigma / (2.0 * mu)
    } else {
        sigma - mu / 2.0
    }
}

pub fn smoothed_nuclear_norm(a: &DMatrix<f64>, mu: f64) -> Result<f64, SpectralError> {
    check_mu(mu)?;
    Ok(singular_values(a)?.iter().map(|&s| huber(s, mu)).sum())
}

pub fn smoothed_nuclear_norm_grad(a: &DMatrix<f64>, mu: f64) -> Result<DMatrix<f64>, SpectralError> {
    Ok(smoothed_value_and_grad(a, mu)?.1)
}

/// Value and gradient from a single SVD.
pub fn smoothed_value_and_grad(a: &DMatrix<f64>, mu: f64) -> Result<(f64, DMatrix<f64>), SpectralError> {
    check_mu(mu)?;
    check_finite(a)?;
    let svd = ThinSvd::new(a)?;
    let value = svd.sigma.iter().map(|&s| huber(s, mu)).sum();
    Ok((value, svd.rebuild(|s| (s / mu).min(1.0))))
}

/// Euclidean projection of a nonnegative vector onto
/// `{x >= 0, sum(x) <= radius}` by sort-and-threshold.
///
/// If the budget is already met the input is returned unchanged; otherwise the
/// result lies on the simplex `sum(x) = radius` and equals `max(v - theta, 0)`.
pub fn project_l1_nonneg(values: &[f64], radius: f64) -> Vec<f64> {
    let clipped: Vec<f64> = values.iter().map(|&v| v.max(0.0)).collect();
    if clipped.iter().sum::<f64>() <= radius {
        return clipped;
    }
    let mut sorted = clipped.clone();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - radius) / (j + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        } else {
            break;
        }
    }
    clipped.iter().map(|&v| (v - theta).max(0.0)).collect()
}

/// `argmin_{||B||_* <= radius} ||B - A||_F`.
pub fn project_nuclear_ball(a: &DMatrix<f64>, radius: f64) -> Result<DMatrix<f64>, SpectralError> {
    project_nuclear_ball_with_tolerance(a, radius, DEFAULT_SVD_TOLERANCE)
}

pub fn project_nuclear_ball_with_tolerance(
    a: &DMatrix<f64>,
    radius: f64,
    svd_tolerance: f64,
) -> Result<DMatrix<f64>, SpectralError> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(SpectralError::NonpositiveRadius(radius));
    }
    check_finite(a)?;
    let svd = ThinSvd::new(a)?;
    let sigma_max = svd.sigma.iter().copied().fold(0.0, f64::max);
    let cutoff = svd_tolerance * sigma_max;
    let sigma: Vec<f64> = svd.sigma.iter().map(|&s| if s < cutoff { 0.0 } else { s }).collect();
    if sigma.iter().sum::<f64>() <= radius {
        return Ok(a.clone());
    }
    let projected = project_l1_nonneg(&sigma, radius);
    let mut scaled = svd.u.clone();
    for (mut col, &s) in scaled.column_iter_mut().zip(projected.iter()) {
        col *= s;
    }
    Ok(scaled * &svd.v_t)
}
