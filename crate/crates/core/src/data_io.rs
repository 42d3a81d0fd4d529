//! Datasets: IDX image files, FeatureBundle tensors, synthetic generators and
//! bootstrap resampling.
//!
//! # FeatureBundle layout
//!
//! All integers are `u32` little-endian, values are `f32` little-endian:
//!
//! ```text
//! "CCNF" | version=1 | n | h | w | c | d2 | n labels | n*h*w*c values
//! ```
//!
//! Each sample's values are stored row-major over `(row, col, channel)`, the
//! same layout as [`Sample::pixels`].

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::binio::{dim_u32, put_f32_le, put_u32_le, Cursor, Truncated};
use crate::seeding;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const FEATURE_MAGIC: &[u8; 4] = b"CCNF";
const FEATURE_VERSION: u32 = 1;

/// Draw cap per accepted sample in separable-margin mode.
pub const MAX_DRAWS_PER_SAMPLE: u64 = 1_000_000;
/// Minimum acceptance rate tolerated by the rejection sampler once it has
/// made enough draws to estimate the rate.
pub const MIN_ACCEPTANCE_RATE: f64 = 1e-3;
const ACCEPTANCE_WARMUP_DRAWS: u64 = 10_000;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("malformed magic in {what}: expected {expected:#010x}, found {found:#010x}")]
    MalformedMagic { what: &'static str, expected: u32, found: u32 },
    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("truncated {what}: needed {needed} bytes at offset {at}")]
    TruncatedFile { what: &'static str, at: usize, needed: usize },
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {label} out of range for {num_classes} classes")]
    BadLabel { label: usize, num_classes: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("rejection sampler stalled after {draws} draws ({accepted} accepted)")]
    RejectionStalled { draws: u64, accepted: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl DataError {
    pub fn kind(&self) -> &'static str {
        match self {
            DataError::MalformedMagic { .. } => "malformed-magic",
            DataError::CountMismatch { .. } => "count-mismatch",
            DataError::TruncatedFile { .. } => "truncated-file",
            DataError::BadHeader(_) => "bad-header",
            DataError::ShapeMismatch(_) => "shape-mismatch",
            DataError::BadLabel { .. } => "bad-label",
            DataError::EmptyDataset => "empty-dataset",
            DataError::InvalidSpec(_) => "invalid-spec",
            DataError::RejectionStalled { .. } => "rejection-stalled",
            DataError::Io(_) => "io",
        }
    }

    fn truncated(what: &'static str, t: Truncated) -> Self {
        DataError::TruncatedFile { what, at: t.at, needed: t.needed }
    }
}

/// One labeled image (or feature tensor), stored row-major over
/// `(row, col, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
    pub label: usize,
}

impl Sample {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        pixels: Vec<f64>,
        label: usize,
    ) -> Result<Self, DataError> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(DataError::ShapeMismatch(format!("zero dimension in {height}x{width}x{channels}")));
        }
        if pixels.len() != height * width * channels {
            return Err(DataError::ShapeMismatch(format!(
                "{} values for a {height}x{width}x{channels} sample",
                pixels.len()
            )));
        }
        Ok(Sample { height, width, channels, pixels, label })
    }

    /// A `1 x 1 x dim` sample holding a plain feature vector.
    pub fn vector(values: Vec<f64>, label: usize) -> Self {
        let channels = values.len();
        Sample { height: 1, width: 1, channels, pixels: values, label }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.pixels[(row * self.width + col) * self.channels + channel]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    RawImage,
    ExtractedFeature,
    Synthetic,
}

/// Ordered labeled samples of a common shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    num_classes: usize,
    source: SourceKind,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, num_classes: usize, source: SourceKind) -> Result<Self, DataError> {
        let first = samples.first().ok_or(DataError::EmptyDataset)?;
        let shape = first.shape();
        if num_classes == 0 {
            return Err(DataError::ShapeMismatch("zero classes".into()));
        }
        if source == SourceKind::RawImage {
            if shape.0 != shape.1 {
                return Err(DataError::ShapeMismatch(format!(
                    "raw images must be square, got {}x{}",
                    shape.0, shape.1
                )));
            }
            if shape.2 != 1 && shape.2 != 3 {
                return Err(DataError::ShapeMismatch(format!("raw images need 1 or 3 channels, got {}", shape.2)));
            }
        }
        for (i, s) in samples.iter().enumerate() {
            if s.shape() != shape {
                return Err(DataError::ShapeMismatch(format!(
                    "sample {i} has shape {:?}, expected {:?}",
                    s.shape(),
                    shape
                )));
            }
            if s.label >= num_classes {
                return Err(DataError::BadLabel { label: s.label, num_classes });
            }
        }
        Ok(Dataset { samples, num_classes, source })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn source(&self) -> SourceKind {
        self.source
    }

    /// `(height, width, channels)` shared by all samples.
    pub fn shape(&self) -> (usize, usize, usize) {
        self.samples[0].shape()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Samples at `indices`, in that order (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> Result<Dataset, DataError> {
        let samples = indices.iter().map(|&i| self.samples[i].clone()).collect();
        Dataset::new(samples, self.num_classes, self.source)
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Result<Dataset, DataError> {
        let n = n.min(self.len());
        Dataset::new(self.samples[..n].to_vec(), self.num_classes, self.source)
    }

    /// Same samples, declared with a larger class count.
    pub fn with_num_classes(self, num_classes: usize) -> Result<Dataset, DataError> {
        Dataset::new(self.samples, num_classes, self.source)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    Ok(fs::read(path)?)
}

/// Load an IDX image/label pair (MNIST layout). Pixels are scaled to `[0, 1]`
/// by dividing by 255; the class count is `max(label) + 1`.
pub fn load_idx(image_path: impl AsRef<Path>, label_path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let images = read_file(image_path.as_ref())?;
    let labels = read_file(label_path.as_ref())?;
    parse_idx(&images, &labels)
}

pub fn parse_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Dataset, DataError> {
    let trunc_img = |t| DataError::truncated("image file", t);
    let trunc_lbl = |t| DataError::truncated("label file", t);

    let mut img = Cursor::new(image_bytes);
    let magic = img.u32_be().map_err(trunc_img)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::MalformedMagic { what: "image file", expected: IDX_IMAGES_MAGIC, found: magic });
    }
    let n_images = img.u32_be().map_err(trunc_img)? as usize;
    let rows = img.u32_be().map_err(trunc_img)? as usize;
    let cols = img.u32_be().map_err(trunc_img)? as usize;

    let mut lbl = Cursor::new(label_bytes);
    let magic = lbl.u32_be().map_err(trunc_lbl)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::MalformedMagic { what: "label file", expected: IDX_LABELS_MAGIC, found: magic });
    }
    let n_labels = lbl.u32_be().map_err(trunc_lbl)? as usize;
    if n_images != n_labels {
        return Err(DataError::CountMismatch { images: n_images, labels: n_labels });
    }

    let pixel_bytes = img.take(n_images * rows * cols).map_err(trunc_img)?;
    let label_vals = lbl.take(n_labels).map_err(trunc_lbl)?;

    let num_classes = label_vals.iter().copied().max().map_or(0, |m| m as usize + 1);
    let per_image = rows * cols;
    let samples = pixel_bytes
        .chunks_exact(per_image.max(1))
        .zip(label_vals)
        .map(|(px, &label)| {
            Sample::new(rows, cols, 1, px.iter().map(|&b| f64::from(b) / 255.0).collect(), label as usize)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Dataset::new(samples, num_classes, SourceKind::RawImage)
}

/// Encode a single-channel dataset back into IDX image and label bytes.
pub fn encode_idx(data: &Dataset) -> Result<(Vec<u8>, Vec<u8>), DataError> {
    let (rows, cols, channels) = data.shape();
    if channels != 1 {
        return Err(DataError::ShapeMismatch(format!("IDX images are single-channel, got {channels}")));
    }
    let mut images = Vec::with_capacity(16 + data.len() * rows * cols);
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for v in [data.len(), rows, cols] {
        images.extend_from_slice(&dim_u32(v).to_be_bytes());
    }
    let mut labels = Vec::with_capacity(8 + data.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&dim_u32(data.len()).to_be_bytes());
    for s in data.samples() {
        images.extend(s.pixels.iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
        let label = u8::try_from(s.label).map_err(|_| DataError::BadLabel { label: s.label, num_classes: 256 })?;
        labels.push(label);
    }
    Ok((images, labels))
}

pub fn write_idx(data: &Dataset, image_path: impl AsRef<Path>, label_path: impl AsRef<Path>) -> Result<(), DataError> {
    let (images, labels) = encode_idx(data)?;
    fs::write(image_path, images)?;
    fs::write(label_path, labels)?;
    Ok(())
}

/// Load a FeatureBundle file.
pub fn load_features(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    parse_features(&read_file(path.as_ref())?)
}

pub fn parse_features(bytes: &[u8]) -> Result<Dataset, DataError> {
    let trunc = |t| DataError::truncated("feature bundle", t);
    let mut cur = Cursor::new(bytes);
    let magic = cur.take(4).map_err(trunc)?;
    if magic != FEATURE_MAGIC {
        return Err(DataError::BadHeader(format!("expected magic CCNF, found {:?}", String::from_utf8_lossy(magic))));
    }
    let version = cur.u32_le().map_err(trunc)?;
    if version != FEATURE_VERSION {
        return Err(DataError::BadHeader(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 5];
    for d in dims.iter_mut() {
        *d = cur.u32_le().map_err(trunc)? as usize;
    }
    let [n, h, w, c, d2] = dims;
    if n == 0 || h == 0 || w == 0 || c == 0 || d2 == 0 {
        return Err(DataError::ShapeMismatch(format!(
            "zero dimension in header (n={n}, h={h}, w={w}, c={c}, d2={d2})"
        )));
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(cur.u32_le().map_err(trunc)? as usize);
    }
    let per = h * w * c;
    let values = cur.f32_vec_le(n * per).map_err(trunc)?;
    if cur.remaining() != 0 {
        return Err(DataError::ShapeMismatch(format!("{} trailing bytes after declared payload", cur.remaining())));
    }
    let samples = values
        .chunks_exact(per)
        .zip(labels)
        .map(|(vals, label)| Sample::new(h, w, c, vals.iter().map(|&v| f64::from(v)).collect(), label))
        .collect::<Result<Vec<_>, _>>()?;
    Dataset::new(samples, d2, SourceKind::ExtractedFeature)
}

/// Serialize as a FeatureBundle. Values are narrowed to `f32`.
pub fn encode_features(data: &Dataset) -> Vec<u8> {
    let (h, w, c) = data.shape();
    let mut out = Vec::with_capacity(28 + data.len() * (4 + 4 * h * w * c));
    out.extend_from_slice(FEATURE_MAGIC);
    put_u32_le(&mut out, FEATURE_VERSION);
    for v in [data.len(), h, w, c, data.num_classes()] {
        put_u32_le(&mut out, dim_u32(v));
    }
    for s in data.samples() {
        put_u32_le(&mut out, dim_u32(s.label));
    }
    for s in data.samples() {
        for &v in &s.pixels {
            put_f32_le(&mut out, v as f32);
        }
    }
    out
}

pub fn write_features(data: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    fs::write(path, encode_features(data))?;
    Ok(())
}

/// `size` indices drawn uniformly with replacement from `0..n`.
pub fn resample_indices(n: usize, size: usize, seed: u64) -> Result<Vec<usize>, DataError> {
    if n == 0 {
        return Err(DataError::EmptyDataset);
    }
    let mut rng = seeding::rng(seed);
    Ok((0..size).map(|_| rng.random_range(0..n)).collect())
}

/// Bootstrap sample of `size` draws with replacement.
pub fn resample(data: &Dataset, size: usize, seed: u64) -> Result<Dataset, DataError> {
    let idx = resample_indices(data.len(), size, seed)?;
    data.select(&idx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    /// `y ~ Bernoulli(logistic(<w, x>))`.
    Logistic,
    /// `y = 1{<w, x> > 0}`, rejecting draws with `|<w, x>| < margin`.
    SeparableMargin,
}

/// Binary synthetic data with standard-normal inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub input_dim: usize,
    pub true_coefficients: Vec<f64>,
    pub noise: NoiseKind,
    #[serde(default)]
    pub margin_width: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.input_dim == 0 {
            return Err(DataError::InvalidSpec("input_dim must be positive".into()));
        }
        if self.true_coefficients.len() != self.input_dim {
            return Err(DataError::InvalidSpec(format!(
                "{} coefficients for input_dim {}",
                self.true_coefficients.len(),
                self.input_dim
            )));
        }
        if !(self.margin_width.is_finite() && self.margin_width >= 0.0) {
            return Err(DataError::InvalidSpec(format!("margin width {} must be finite and >= 0", self.margin_width)));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        SyntheticSpec { seed, ..self.clone() }
    }
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Draw `n` samples (`1 x 1 x input_dim`, two classes) from `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec, n: usize) -> Result<Dataset, DataError> {
    spec.validate()?;
    if n == 0 {
        return Err(DataError::EmptyDataset);
    }
    let mut rng = seeding::rng(spec.seed);
    let w = &spec.true_coefficients;
    let mut samples = Vec::with_capacity(n);
    let mut draws: u64 = 0;
    while samples.len() < n {
        let mut attempts: u64 = 0;
        let (x, label) = loop {
            let x: Vec<f64> = (0..spec.input_dim).map(|_| rng.sample(StandardNormal)).collect();
            let z: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
            attempts += 1;
            draws += 1;
            match spec.noise {
                NoiseKind::Logistic => {
                    let label = usize::from(rng.random::<f64>() < logistic(z));
                    break (x, label);
                }
                NoiseKind::SeparableMargin => {
                    if z.abs() >= spec.margin_width && z != 0.0 {
                        break (x, usize::from(z > 0.0));
                    }
                    let rate_too_low =
                        draws >= ACCEPTANCE_WARMUP_DRAWS && (samples.len() as f64) < MIN_ACCEPTANCE_RATE * draws as f64;
                    if attempts >= MAX_DRAWS_PER_SAMPLE || rate_too_low {
                        return Err(DataError::RejectionStalled { draws, accepted: samples.len() });
                    }
                }
            }
        };
        samples.push(Sample::vector(x, label));
    }
    Dataset::new(samples, 2, SourceKind::Synthetic)
}
