//! Independent reference implementations shared by the integration suites.
//! None of these call into the library's numerical code.

#![allow(dead_code)]

use ccnn_core::data_io::{Dataset, NoiseKind, Sample, SourceKind, SyntheticSpec};
use ccnn_core::extractor::{Layer, WeightBundle};
use ccnn_core::patching::{PatchConfig, PatchedDataset};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn gaussian_vec(n: usize, rng: &mut ChaCha20Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Thin SVD by one-sided (Hestenes) Jacobi rotations: `A = U diag(s) V^T`.
pub struct JacobiSvd {
    pub u: DMatrix<f64>,
    pub s: Vec<f64>,
    pub v: DMatrix<f64>,
}

pub fn jacobi_svd(a: &DMatrix<f64>) -> JacobiSvd {
    if a.nrows() < a.ncols() {
        let t = jacobi_svd(&a.transpose());
        return JacobiSvd { u: t.v, s: t.s, v: t.u };
    }
    let (m, n) = (a.nrows(), a.ncols());
    let mut u: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a[(i, j)]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = u[p].iter().map(|x| x * x).sum();
                let beta: f64 = u[q].iter().map(|x| x * x).sum();
                let gamma: f64 = u[p].iter().zip(&u[q]).map(|(x, y)| x * y).sum();
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for cols in [&mut u, &mut v] {
                    let (lo, hi) = cols.split_at_mut(q);
                    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                        let (xp, yq) = (*x, *y);
                        *x = c * xp - s * yq;
                        *y = s * xp + c * yq;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let s: Vec<f64> = u.iter().map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let umat = DMatrix::from_fn(m, n, |i, j| if s[j] > 0.0 { u[j][i] / s[j] } else { 0.0 });
    let vmat = DMatrix::from_fn(n, n, |i, j| v[j][i]);
    JacobiSvd { u: umat, s, v: vmat }
}

pub fn compose(svd: &JacobiSvd, s: &[f64]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(svd.u.nrows(), svd.v.nrows());
    for (k, &sk) in s.iter().enumerate() {
        for i in 0..out.nrows() {
            for j in 0..out.ncols() {
                out[(i, j)] += svd.u[(i, k)] * sk * svd.v[(j, k)];
            }
        }
    }
    out
}

/// Euclidean projection of a nonnegative vector onto `{s >= 0, sum s <= c}`
/// by bisection on the multiplier.
pub fn l1_projection_bisection(sigma: &[f64], c: f64) -> Vec<f64> {
    let shrink = |theta: f64| sigma.iter().map(|&x| (x - theta).max(0.0)).collect::<Vec<_>>();
    if sigma.iter().sum::<f64>() <= c {
        return sigma.to_vec();
    }
    let (mut lo, mut hi) = (0.0, sigma.iter().cloned().fold(0.0, f64::max));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if shrink(mid).iter().sum::<f64>() > c {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    shrink(0.5 * (lo + hi))
}

/// Spectral-norm ball projection via the Jacobi SVD.
pub fn clip_spectral(z: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = jacobi_svd(z);
    let s: Vec<f64> = svd.s.iter().map(|&x| x.min(1.0)).collect();
    compose(&svd, &s)
}

/// `sup_{||Z||_2 <= 1} <A, Z> - mu/2 ||Z||_F^2` by projected gradient ascent.
pub fn smoothed_norm_by_ascent(a: &DMatrix<f64>, mu: f64) -> f64 {
    let step = 0.5 / mu;
    let mut z = DMatrix::zeros(a.nrows(), a.ncols());
    for _ in 0..400 {
        let grad = a - &z * mu;
        z = clip_spectral(&(&z + grad * step));
    }
    a.dot(&z) - 0.5 * mu * z.norm_squared()
}

/// Scores of a `q x (P d2)` block matrix on `P` patch rows, by explicit loops.
pub fn naive_scores(a: &DMatrix<f64>, patches: &[Vec<f64>], d2: usize) -> Vec<f64> {
    let p_count = patches.len();
    (0..d2)
        .map(|k| {
            let mut s = 0.0;
            for (p, z) in patches.iter().enumerate() {
                for (j, zj) in z.iter().enumerate() {
                    s += a[(j, k * p_count + p)] * zj;
                }
            }
            s
        })
        .collect()
}

pub fn naive_log_loss(scores: &[f64], y: usize) -> f64 {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
    lse - scores[y]
}

pub fn patch_rows(data: &PatchedDataset, i: usize) -> Vec<Vec<f64>> {
    data.patches()[i].iter_rows().map(|r| r.to_vec()).collect()
}

/// Mean log-loss over the dataset by explicit loops.
pub fn naive_mean_loss(a: &DMatrix<f64>, data: &PatchedDataset) -> f64 {
    let d2 = data.num_classes();
    (0..data.len()).map(|i| naive_log_loss(&naive_scores(a, &patch_rows(data, i), d2), data.labels()[i])).sum::<f64>()
        / data.len() as f64
}

/// Huber smoothing of the singular values from the Jacobi SVD.
pub fn huber_norm_oracle(a: &DMatrix<f64>, mu: f64) -> f64 {
    jacobi_svd(a).s.iter().map(|&s| if s <= mu { s * s / (2.0 * mu) } else { s - mu / 2.0 }).sum()
}

pub fn logistic_spec(coefs: Vec<f64>, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        input_dim: coefs.len(),
        true_coefficients: coefs,
        noise: NoiseKind::Logistic,
        margin_width: 0.0,
        seed,
    }
}

pub fn vector_patches(data: &Dataset) -> PatchedDataset {
    PatchedDataset::from_dataset(data, &PatchConfig::new(1, 1).unwrap()).unwrap()
}

pub fn random_images(n: usize, side: usize, channels: usize, classes: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let samples = (0..n)
        .map(|i| {
            let pixels = (0..side * side * channels).map(|_| r.random::<f64>()).collect();
            Sample::new(side, side, channels, pixels, i % classes).unwrap()
        })
        .collect();
    Dataset::new(samples, classes, SourceKind::RawImage).unwrap()
}

/// Ten-class 8x8 images: a fixed random binary template per class plus
/// uniform noise. The matching bundle (3x3 conv, ReLU, dense on the feature
/// map, softmax) classifies them almost perfectly, so perturbation has real
/// accuracy to destroy.
pub fn template_task(n: usize, seed: u64) -> (WeightBundle, Dataset) {
    let side = 8;
    let mut r = rng(seed);
    let templates: Vec<Vec<f64>> =
        (0..10).map(|_| (0..side * side).map(|_| if r.random::<bool>() { 1.0 } else { 0.0 }).collect()).collect();
    let mut data_rng = rng(seed ^ 0xDA7A);
    let samples = (0..n)
        .map(|i| {
            let k = i % 10;
            let px = templates[k].iter().map(|t| 0.7 * t + 0.3 * data_rng.random::<f64>()).collect();
            Sample::new(side, side, 1, px, k).unwrap()
        })
        .collect();
    let data = Dataset::new(samples, 10, SourceKind::RawImage).unwrap();

    // the conv keeps the centre pixel, so feature (r, c) is pixel (r+1, c+1)
    let mut kernel = vec![0.0; 9];
    kernel[4] = 1.0;
    let conv = Layer::Conv { kh: 3, kw: 3, in_c: 1, out_c: 1, stride: 1, kernel, bias: vec![0.0] };
    let inner = side - 2;
    let mut weights = vec![0.0; inner * inner * 10];
    for rr in 0..inner {
        for cc in 0..inner {
            for (k, t) in templates.iter().enumerate() {
                weights[(rr * inner + cc) * 10 + k] = 4.0 * (t[(rr + 1) * side + cc + 1] - 0.5);
            }
        }
    }
    let bundle = WeightBundle::new(
        (side, side, 1),
        vec![
            conv,
            Layer::Relu,
            Layer::Flatten,
            Layer::Dense { input: inner * inner, output: 10, weights, bias: vec![0.0; 10] },
            Layer::Softmax,
        ],
    )
    .unwrap()
    .to_f32_precision();
    (bundle, data)
}

/// Direct evaluation of one valid convolution over `[row][col][channel]` data.
pub fn naive_conv(
    x: &[f64],
    (h, w, c): (usize, usize, usize),
    kernel: &[f64],
    bias: &[f64],
    (kh, kw, out_c, stride): (usize, usize, usize, usize),
) -> (Vec<f64>, (usize, usize, usize)) {
    let (oh, ow) = ((h - kh) / stride + 1, (w - kw) / stride + 1);
    let mut out = vec![0.0; oh * ow * out_c];
    for o in 0..out_c {
        for r in 0..oh {
            for col in 0..ow {
                let mut acc = bias[o];
                for i in 0..kh {
                    for j in 0..kw {
                        for ch in 0..c {
                            let pixel = x[((r * stride + i) * w + (col * stride + j)) * c + ch];
                            let weight = kernel[((i * kw + j) * c + ch) * out_c + o];
                            acc += pixel * weight;
                        }
                    }
                }
                out[(r * ow + col) * out_c + o] = acc;
            }
        }
    }
    (out, (oh, ow, out_c))
}
