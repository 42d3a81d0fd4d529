//! Convexified convolutional neural networks (CCNN) with warm-start bootstrap
//! prediction intervals.
//!
//! The pipeline is: load a [`data_io::Dataset`], cut every sample into a
//! [`patching::PatchMatrix`], optionally lift the patches through an RBF
//! [`kernel::KernelFeatureMap`], fit the convex model with [`trainer::fit`],
//! and resample the training set with [`bootstrap::run_bootstrap`] to obtain a
//! [`bootstrap::PredictionCube`] and percentile [`bootstrap::IntervalTable`]s.
//!
//! All randomness flows from explicit 64-bit seeds through ChaCha8 (see
//! [`seeding`]), so every stochastic operation is reproducible.

pub mod bootstrap;
pub mod data_io;
pub mod extractor;
pub mod kernel;
pub mod metrics;
pub mod model;
pub mod patching;
pub mod seeding;
pub mod spectral;
pub mod trainer;

mod binio;

pub use bootstrap::{BootstrapConfig, ChainMode, IntervalTable, PredictionCube};
pub use data_io::{Dataset, Sample, SourceKind, SyntheticSpec};
pub use model::CcnnParams;
pub use patching::{PatchConfig, PatchMatrix, PatchedDataset};
pub use trainer::{FitResult, Regularization, TrainerConfig};

/// Errors from any stage of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] data_io::DataError),
    #[error(transparent)]
    Patch(#[from] patching::PatchError),
    #[error(transparent)]
    Spectral(#[from] spectral::SpectralError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Train(#[from] trainer::TrainError),
    #[error(transparent)]
    Kernel(#[from] kernel::KernelError),
    #[error(transparent)]
    Bootstrap(#[from] bootstrap::BootstrapError),
    #[error(transparent)]
    Extract(#[from] extractor::ExtractError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
}

impl Error {
    /// Stable kebab-case identifier of the failure, used in machine-readable
    /// error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Data(e) => e.kind(),
            Error::Patch(e) => e.kind(),
            Error::Spectral(e) => e.kind(),
            Error::Model(e) => e.kind(),
            Error::Train(e) => e.kind(),
            Error::Kernel(e) => e.kind(),
            Error::Bootstrap(e) => e.kind(),
            Error::Extract(e) => e.kind(),
            Error::Metrics(e) => e.kind(),
        }
    }
}
