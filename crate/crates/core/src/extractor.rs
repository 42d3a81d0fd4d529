//! Forward-only CNN used as a fixed feature extractor, plus Gaussian weight
//! perturbation calibrated to chance-level accuracy.
//!
//! Activations are `(height, width, channels)` tensors stored row-major like
//! [`Sample::pixels`]. Convolutions and pools use valid padding; output side
//! is `(side - window) / stride + 1` (floor).
//!
//! # CCNW layout
//!
//! Little-endian throughout:
//!
//! ```text
//! "CCNW" | u32 version (1) | u32 in_h | u32 in_w | u32 in_c | u32 layer_count
//! per layer: u32 tag, then
//!   1 conv     u32 kh, kw, in_c, out_c, stride | f32 kernel[kh][kw][in_c][out_c] | f32 bias[out_c]
//!   2 relu
//!   3 maxpool  u32 size, stride
//!   4 flatten
//!   5 dense    u32 in, out | f32 weights[in][out] | f32 bias[out]
//!   6 softmax
//! ```
//!
//! External tools can instead emit a JSON manifest (see [`load_manifest`])
//! that names one raw little-endian `f32` file per weight array.

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{dim_u32, put_f32_le, put_u32_le, Cursor};
use crate::data_io::{Dataset, Sample, SourceKind};
use crate::model::softmax_probs;
use crate::seeding;

const MAGIC: &[u8; 4] = b"CCNW";
const VERSION: u32 = 1;
const MAX_RETRIES: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum ExtractError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite activation after layer {layer}")]
    NonFiniteActivation { layer: usize },
    #[error("non-finite weight in layer {layer}")]
    NonFiniteWeight { layer: usize },
    #[error("bundle has no convolution layer")]
    NoConvLayer,
    #[error("perturbation sigma must be positive, got {0}")]
    NonpositiveSigma(f64),
    #[error("invalid perturbation spec: {0}")]
    InvalidSpec(String),
    #[error("accuracy stayed at {accuracy} > target {target} after sigma reached {sigma}")]
    CalibrationFailed { sigma: f64, accuracy: f64, target: f64 },
    #[error("bad weight bundle: {0}")]
    BadHeader(String),
    #[error("bad manifest: {0}")]
    BadManifest(String),
    #[error("dataset error: {0}")]
    Data(#[from] crate::data_io::DataError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl ExtractError {
    pub fn kind(&self) -> &'static str {
        match self {
            ExtractError::ShapeMismatch(_) => "shape-mismatch",
            ExtractError::NonFiniteActivation { .. } => "non-finite-activation",
            ExtractError::NonFiniteWeight { .. } => "non-finite-weight",
            ExtractError::NoConvLayer => "no-conv-layer",
            ExtractError::NonpositiveSigma(_) => "nonpositive-sigma",
            ExtractError::InvalidSpec(_) => "invalid-config",
            ExtractError::CalibrationFailed { .. } => "calibration-failed",
            ExtractError::BadHeader(_) | ExtractError::BadManifest(_) => "bad-header",
            ExtractError::Data(e) => e.kind(),
            ExtractError::Io(_) => "io",
        }
    }
}

/// Activation shape `(height, width, channels)`.
pub type Shape = (usize, usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `kernel` is laid out `[kh][kw][in_c][out_c]`.
    Conv {
        kh: usize,
        kw: usize,
        in_c: usize,
        out_c: usize,
        stride: usize,
        kernel: Vec<f64>,
        bias: Vec<f64>,
    },
    Relu,
    MaxPool {
        size: usize,
        stride: usize,
    },
    Flatten,
    /// `weights` is laid out `[input][output]`; expects a `1 x 1 x input` tensor.
    Dense {
        input: usize,
        output: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    },
    Softmax,
}

impl Layer {
    fn tag(&self) -> u32 {
        match self {
            Layer::Conv { .. } => 1,
            Layer::Relu => 2,
            Layer::MaxPool { .. } => 3,
            Layer::Flatten => 4,
            Layer::Dense { .. } => 5,
            Layer::Softmax => 6,
        }
    }

    pub fn is_parametric(&self) -> bool {
        matches!(self, Layer::Conv { .. } | Layer::Dense { .. })
    }

    fn params(&self) -> [&[f64]; 2] {
        match self {
            Layer::Conv { kernel, bias, .. } => [kernel, bias],
            Layer::Dense { weights, bias, .. } => [weights, bias],
            _ => [&[], &[]],
        }
    }

    fn params_mut(&mut self) -> [&mut Vec<f64>; 2] {
        match self {
            Layer::Conv { kernel, bias, .. } => [kernel, bias],
            Layer::Dense { weights, bias, .. } => [weights, bias],
            _ => unreachable!("only called on parametric layers"),
        }
    }

    /// Output shape for input `shape`, or why the layer cannot accept it.
    pub fn output_shape(&self, (h, w, c): Shape) -> Result<Shape, String> {
        let window = |side: usize, k: usize, s: usize| -> Result<usize, String> {
            if k == 0 || s == 0 {
                return Err("zero window or stride".into());
            }
            if k > side {
                return Err(format!("window {k} larger than input side {side}"));
            }
            Ok((side - k) / s + 1)
        };
        match self {
            Layer::Conv { kh, kw, in_c, out_c, stride, kernel, bias } => {
                if *in_c != c {
                    return Err(format!("conv expects {in_c} input channels, got {c}"));
                }
                if *out_c == 0 {
                    return Err("conv with zero output channels".into());
                }
                if kernel.len() != kh * kw * in_c * out_c || bias.len() != *out_c {
                    return Err(format!(
                        "conv {kh}x{kw}x{in_c}x{out_c} has {} kernel and {} bias values",
                        kernel.len(),
                        bias.len()
                    ));
                }
                Ok((window(h, *kh, *stride)?, window(w, *kw, *stride)?, *out_c))
            }
            Layer::MaxPool { size, stride } => Ok((window(h, *size, *stride)?, window(w, *size, *stride)?, c)),
            Layer::Relu | Layer::Softmax => Ok((h, w, c)),
            Layer::Flatten => Ok((1, 1, h * w * c)),
            Layer::Dense { input, output, weights, bias } => {
                if (h, w, c) != (1, 1, *input) {
                    return Err(format!("dense expects 1x1x{input}, got {h}x{w}x{c}"));
                }
                if *output == 0 || weights.len() != input * output || bias.len() != *output {
                    return Err(format!(
                        "dense {input}->{output} has {} weights and {} bias values",
                        weights.len(),
                        bias.len()
                    ));
                }
                Ok((1, 1, *output))
            }
        }
    }

    fn apply(&self, x: &[f64], (h, w, c): Shape, out_shape: Shape) -> Vec<f64> {
        let (oh, ow, oc) = out_shape;
        match self {
            Layer::Conv { kh, kw, in_c, stride, kernel, bias, .. } => {
                let mut out = Vec::with_capacity(oh * ow * oc);
                for r in 0..oh {
                    for col in 0..ow {
                        let base = out.len();
                        out.extend_from_slice(bias);
                        let acc = &mut out[base..base + oc];
                        for dr in 0..*kh {
                            for dc in 0..*kw {
                                let px = ((r * stride + dr) * w + col * stride + dc) * c;
                                for ci in 0..*in_c {
                                    let v = x[px + ci];
                                    let krow = ((dr * kw + dc) * in_c + ci) * oc;
                                    for (a, k) in acc.iter_mut().zip(&kernel[krow..krow + oc]) {
                                        *a += v * k;
                                    }
                                }
                            }
                        }
                    }
                }
                out
            }
            Layer::MaxPool { size, stride } => {
                let mut out = Vec::with_capacity(oh * ow * oc);
                for r in 0..oh {
                    for col in 0..ow {
                        for ch in 0..c {
                            let mut m = f64::NEG_INFINITY;
                            for dr in 0..*size {
                                for dc in 0..*size {
                                    m = m.max(x[((r * stride + dr) * w + col * stride + dc) * c + ch]);
                                }
                            }
                            out.push(m);
                        }
                    }
                }
                out
            }
            Layer::Relu => x.iter().map(|v| v.max(0.0)).collect(),
            Layer::Flatten => x.to_vec(),
            Layer::Dense { output, weights, bias, .. } => {
                let mut out = bias.clone();
                for (i, v) in x.iter().enumerate() {
                    for (o, wv) in out.iter_mut().zip(&weights[i * output..(i + 1) * output]) {
                        *o += v * wv;
                    }
                }
                out
            }
            Layer::Softmax => {
                debug_assert_eq!(h * w * c, x.len());
                softmax_probs(x)
            }
        }
    }
}

/// A validated layer stack with its input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBundle {
    input: Shape,
    layers: Vec<Layer>,
    shapes: Vec<Shape>,
}

impl WeightBundle {
    pub fn new(input: Shape, layers: Vec<Layer>) -> Result<Self, ExtractError> {
        if input.0 == 0 || input.1 == 0 || input.2 == 0 {
            return Err(ExtractError::ShapeMismatch(format!("zero dimension in input shape {input:?}")));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut shape = input;
        for (i, layer) in layers.iter().enumerate() {
            shape = layer.output_shape(shape).map_err(|m| ExtractError::ShapeMismatch(format!("layer {i}: {m}")))?;
            if layer.params().iter().any(|p| p.iter().any(|v| !v.is_finite())) {
                return Err(ExtractError::NonFiniteWeight { layer: i });
            }
            shapes.push(shape);
        }
        Ok(WeightBundle { input, layers, shapes })
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Output shape of each layer, in order.
    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn output_shape(&self) -> Shape {
        self.shapes.last().copied().unwrap_or(self.input)
    }

    /// Index of the last layer whose output is the extracted feature: the
    /// last convolution plus any ReLU or max-pool directly after it.
    pub fn feature_layer(&self) -> Result<usize, ExtractError> {
        let conv =
            self.layers.iter().rposition(|l| matches!(l, Layer::Conv { .. })).ok_or(ExtractError::NoConvLayer)?;
        let tail =
            self.layers[conv + 1..].iter().take_while(|l| matches!(l, Layer::Relu | Layer::MaxPool { .. })).count();
        Ok(conv + tail)
    }

    /// Run layers `0..=last` on `x`.
    fn run(&self, x: &[f64], last: usize) -> Result<Vec<f64>, ExtractError> {
        let mut act = x.to_vec();
        let mut shape = self.input;
        for (i, layer) in self.layers[..=last].iter().enumerate() {
            act = layer.apply(&act, shape, self.shapes[i]);
            if act.iter().any(|v| !v.is_finite()) {
                return Err(ExtractError::NonFiniteActivation { layer: i });
            }
            shape = self.shapes[i];
        }
        Ok(act)
    }

    fn check_sample(&self, sample: &Sample) -> Result<(), ExtractError> {
        if sample.shape() != self.input {
            return Err(ExtractError::ShapeMismatch(format!(
                "bundle expects {:?}, sample has {:?}",
                self.input,
                sample.shape()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32_le(&mut out, VERSION);
        for v in [self.input.0, self.input.1, self.input.2, self.layers.len()] {
            put_u32_le(&mut out, dim_u32(v));
        }
        for layer in &self.layers {
            put_u32_le(&mut out, layer.tag());
            let dims: Vec<usize> = match layer {
                Layer::Conv { kh, kw, in_c, out_c, stride, .. } => vec![*kh, *kw, *in_c, *out_c, *stride],
                Layer::MaxPool { size, stride } => vec![*size, *stride],
                Layer::Dense { input, output, .. } => vec![*input, *output],
                _ => vec![],
            };
            for d in dims {
                put_u32_le(&mut out, dim_u32(d));
            }
            for p in layer.params() {
                for &v in p {
                    put_f32_le(&mut out, v as f32);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ExtractError> {
        let trunc = |t: crate::binio::Truncated| {
            ExtractError::BadHeader(format!("truncated at byte {} (needed {} more)", t.at, t.needed))
        };
        let mut cur = Cursor::new(bytes);
        if cur.take(4).map_err(trunc)? != MAGIC {
            return Err(ExtractError::BadHeader("expected magic CCNW".into()));
        }
        let version = cur.u32_le().map_err(trunc)?;
        if version != VERSION {
            return Err(ExtractError::BadHeader(format!("unsupported version {version}")));
        }
        let mut head = [0usize; 4];
        for d in head.iter_mut() {
            *d = cur.u32_le().map_err(trunc)? as usize;
        }
        let [h, w, c, count] = head;
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let tag = cur.u32_le().map_err(trunc)?;
            let mut dims = |k: usize| -> Result<Vec<usize>, ExtractError> {
                (0..k).map(|_| cur.u32_le().map(|v| v as usize).map_err(trunc)).collect()
            };
            let layer = match tag {
                1 => {
                    let d = dims(5)?;
                    let (kh, kw, in_c, out_c, stride) = (d[0], d[1], d[2], d[3], d[4]);
                    let kernel = read_f64s(&mut cur, kh * kw * in_c * out_c)?;
                    let bias = read_f64s(&mut cur, out_c)?;
                    Layer::Conv { kh, kw, in_c, out_c, stride, kernel, bias }
                }
                2 => Layer::Relu,
                3 => {
                    let d = dims(2)?;
                    Layer::MaxPool { size: d[0], stride: d[1] }
                }
                4 => Layer::Flatten,
                5 => {
                    let d = dims(2)?;
                    let weights = read_f64s(&mut cur, d[0] * d[1])?;
                    let bias = read_f64s(&mut cur, d[1])?;
                    Layer::Dense { input: d[0], output: d[1], weights, bias }
                }
                6 => Layer::Softmax,
                t => return Err(ExtractError::BadHeader(format!("unknown layer tag {t}"))),
            };
            layers.push(layer);
        }
        if cur.remaining() != 0 {
            return Err(ExtractError::BadHeader(format!("{} trailing bytes", cur.remaining())));
        }
        WeightBundle::new((h, w, c), layers)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), ExtractError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, ExtractError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Copy with every weight narrowed to `f32` precision, i.e. exactly
    /// what a CCNW round trip yields.
    pub fn to_f32_precision(&self) -> Self {
        let mut out = self.clone();
        for layer in out.layers.iter_mut().filter(|l| l.is_parametric()) {
            for p in layer.params_mut() {
                p.iter_mut().for_each(|v| *v = f64::from(*v as f32));
            }
        }
        out
    }
}

fn read_f64s(cur: &mut Cursor<'_>, n: usize) -> Result<Vec<f64>, ExtractError> {
    cur.f32_vec_le(n)
        .map(|v| v.into_iter().map(f64::from).collect())
        .map_err(|t| ExtractError::BadHeader(format!("truncated at byte {} (needed {} more)", t.at, t.needed)))
}

/// Final-layer output of the bundle on one sample.
pub fn forward(bundle: &WeightBundle, sample: &Sample) -> Result<Vec<f64>, ExtractError> {
    bundle.check_sample(sample)?;
    if bundle.layers.is_empty() {
        return Ok(sample.pixels.clone());
    }
    bundle.run(&sample.pixels, bundle.layers.len() - 1)
}

/// Replace each sample by the activations after the last convolution (and
/// any ReLU / max-pool right after it). Values are narrowed to `f32` so the
/// result survives a FeatureBundle round trip unchanged.
pub fn extract_features(bundle: &WeightBundle, data: &Dataset) -> Result<Dataset, ExtractError> {
    let last = bundle.feature_layer()?;
    let (h, w, c) = bundle.shapes[last];
    let samples = data
        .samples()
        .par_iter()
        .map(|s| {
            bundle.check_sample(s)?;
            let act = bundle.run(&s.pixels, last)?;
            let pixels = act.into_iter().map(|v| f64::from(v as f32)).collect();
            Ok(Sample::new(h, w, c, pixels, s.label)?)
        })
        .collect::<Result<Vec<_>, ExtractError>>()?;
    Ok(Dataset::new(samples, data.num_classes(), SourceKind::ExtractedFeature)?)
}

/// Fraction of samples whose output argmax equals the label.
pub fn accuracy(bundle: &WeightBundle, data: &Dataset) -> Result<f64, ExtractError> {
    let hits = data
        .samples()
        .par_iter()
        .map(|s| {
            let out = forward(bundle, s)?;
            Ok(usize::from(argmax(&out) == s.label))
        })
        .collect::<Result<Vec<_>, ExtractError>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / data.len() as f64)
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (k, &x)| if x > best.1 { (k, x) } else { best }).0
}

#[derive(Debug, Clone)]
pub struct PerturbSpec {
    pub sigma: f64,
    pub target_accuracy: f64,
    pub calibration: Dataset,
    pub seed: u64,
}

impl PerturbSpec {
    /// Target of `1/d2 + slack` on `calibration`.
    pub fn chance_level(sigma: f64, slack: f64, calibration: Dataset, seed: u64) -> Self {
        let target_accuracy = 1.0 / calibration.num_classes() as f64 + slack;
        PerturbSpec { sigma, target_accuracy, calibration, seed }
    }
}

/// One calibration attempt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbAttempt {
    pub sigma: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct PerturbOutcome {
    pub bundle: WeightBundle,
    /// Noise level of the returned bundle.
    pub sigma: f64,
    pub accuracy: f64,
    pub attempts: Vec<PerturbAttempt>,
}

/// Add `N(0, sigma^2)` noise to every weight and bias of the original
/// bundle, doubling `sigma` (up to 20 times) until accuracy on the
/// calibration set is at most the target. Each attempt draws fresh noise
/// from its own derived seed; the noisy weights are narrowed to `f32`.
pub fn perturb(bundle: &WeightBundle, spec: &PerturbSpec) -> Result<PerturbOutcome, ExtractError> {
    if !(spec.sigma > 0.0 && spec.sigma.is_finite()) {
        return Err(ExtractError::NonpositiveSigma(spec.sigma));
    }
    if !(spec.target_accuracy > 0.0 && spec.target_accuracy <= 1.0) {
        return Err(ExtractError::InvalidSpec(format!("target accuracy {} outside (0, 1]", spec.target_accuracy)));
    }
    if !bundle.layers.iter().any(Layer::is_parametric) {
        return Err(ExtractError::InvalidSpec("bundle has no weights to perturb".into()));
    }
    let mut sigma = spec.sigma;
    let mut attempts = Vec::new();
    for attempt in 0..=MAX_RETRIES {
        let noisy = add_noise(bundle, sigma, seeding::derive_seed(spec.seed, attempt as u64));
        let acc = accuracy(&noisy, &spec.calibration)?;
        attempts.push(PerturbAttempt { sigma, accuracy: acc });
        if acc <= spec.target_accuracy {
            return Ok(PerturbOutcome { bundle: noisy, sigma, accuracy: acc, attempts });
        }
        sigma *= 2.0;
    }
    let last = attempts[attempts.len() - 1];
    Err(ExtractError::CalibrationFailed { sigma: last.sigma, accuracy: last.accuracy, target: spec.target_accuracy })
}

fn add_noise(bundle: &WeightBundle, sigma: f64, seed: u64) -> WeightBundle {
    let normal = Normal::new(0.0, sigma).expect("sigma checked positive");
    let mut rng = seeding::rng(seed);
    let mut out = bundle.clone();
    for layer in out.layers.iter_mut().filter(|l| l.is_parametric()) {
        for p in layer.params_mut() {
            for v in p.iter_mut() {
                *v = f64::from((*v + normal.sample(&mut rng)) as f32);
            }
        }
    }
    out
}

/// JSON manifest entry; weight arrays are raw little-endian `f32` files
/// relative to the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ManifestLayer {
    /// `kernel` is `[kh, kw, in_c, out_c]`, data ordered the same way.
    Conv {
        kernel: [usize; 4],
        stride: usize,
        weights: String,
        bias: String,
    },
    Relu,
    Maxpool {
        size: usize,
        stride: usize,
    },
    Flatten,
    /// Data ordered `[input][output]`.
    Dense {
        input: usize,
        output: usize,
        weights: String,
        bias: String,
    },
    Softmax,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    /// `[height, width, channels]`.
    pub input: [usize; 3],
    pub layers: Vec<ManifestLayer>,
}

/// Build a bundle from a JSON manifest, e.g.
///
/// ```json
/// { "input": [28, 28, 1],
///   "layers": [
///     { "type": "conv", "kernel": [5, 5, 1, 8], "stride": 1,
///       "weights": "conv1.w.f32", "bias": "conv1.b.f32" },
///     { "type": "relu" },
///     { "type": "maxpool", "size": 2, "stride": 2 },
///     { "type": "flatten" },
///     { "type": "dense", "input": 1152, "output": 10,
///       "weights": "fc.w.f32", "bias": "fc.b.f32" },
///     { "type": "softmax" } ] }
/// ```
pub fn load_manifest(path: impl AsRef<Path>) -> Result<WeightBundle, ExtractError> {
    let path = path.as_ref();
    let manifest: Manifest =
        serde_json::from_slice(&fs::read(path)?).map_err(|e| ExtractError::BadManifest(e.to_string()))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let array = |name: &str, n: usize| -> Result<Vec<f64>, ExtractError> {
        let bytes = fs::read(dir.join(name))?;
        if bytes.len() != 4 * n {
            return Err(ExtractError::BadManifest(format!(
                "{name}: expected {n} f32 values, found {} bytes",
                bytes.len()
            )));
        }
        read_f64s(&mut Cursor::new(&bytes), n)
    };
    let layers = manifest
        .layers
        .iter()
        .map(|l| {
            Ok(match l {
                ManifestLayer::Conv { kernel: [kh, kw, in_c, out_c], stride, weights, bias } => Layer::Conv {
                    kh: *kh,
                    kw: *kw,
                    in_c: *in_c,
                    out_c: *out_c,
                    stride: *stride,
                    kernel: array(weights, kh * kw * in_c * out_c)?,
                    bias: array(bias, *out_c)?,
                },
                ManifestLayer::Relu => Layer::Relu,
                ManifestLayer::Maxpool { size, stride } => Layer::MaxPool { size: *size, stride: *stride },
                ManifestLayer::Flatten => Layer::Flatten,
                ManifestLayer::Dense { input, output, weights, bias } => Layer::Dense {
                    input: *input,
                    output: *output,
                    weights: array(weights, input * output)?,
                    bias: array(bias, *output)?,
                },
                ManifestLayer::Softmax => Layer::Softmax,
            })
        })
        .collect::<Result<Vec<_>, ExtractError>>()?;
    let [h, w, c] = manifest.input;
    WeightBundle::new((h, w, c), layers)
}
