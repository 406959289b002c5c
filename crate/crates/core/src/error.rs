//! Error types shared across the crate.

use thiserror::Error;

/// Errors from tensor construction and differentiable operations.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("non-finite values in {op}")]
    NonFinite { op: &'static str },
    #[error("backward was already run on this graph; build a fresh graph per step")]
    BackwardAlreadyRun,
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("unknown activation kind {0:?}")]
    UnknownActivation(String),
}

/// Errors from run-configuration validation.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum ConfigError {
    #[error("config: {0}")]
    Invalid(String),
    #[error("config version {found} unsupported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("config parse error: {0}")]
    Parse(String),
}

/// Errors from manifest loading and synthetic data generation.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("manifest {path}, line {line}: {reason}")]
    ManifestLine {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("manifest {path}: {reason}")]
    Manifest { path: String, reason: String },
    #[error("image {path}: {reason}")]
    Image { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Checkpoint container errors. The three corruption cases are distinct.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: expected \"GAUN\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated checkpoint while reading {context}")]
    Truncated { context: String },
    #[error("unknown tensor name {0:?} in checkpoint")]
    UnknownTensor(String),
    #[error("checkpoint missing tensor {0:?}")]
    MissingTensor(String),
    #[error("tensor {name}: stored shape {stored:?} does not match expected {expected:?}")]
    ShapeMismatch {
        name: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Metric computation errors.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum MetricsError {
    #[error("no attack samples: APCER undefined")]
    NoAttackSamples,
    #[error("no bonafide samples: BPCER undefined")]
    NoBonafideSamples,
    #[error("both classes required, got single-class input")]
    SingleClass,
    #[error("k-fold: class {class:?} has {count} samples, fewer than k={k}")]
    ClassSmallerThanK {
        class: String,
        count: usize,
        k: usize,
    },
    #[error("k must be >= 2, got {0}")]
    BadK(usize),
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("rate {0} outside [0, 100]")]
    RateOutOfRange(f64),
    #[error("invalid threshold policy {0:?} (expected fixed:<t>, bpcer:<target>, or eer)")]
    BadPolicy(String),
    #[error("train/test dataset ids overlap: {0:?}")]
    OverlappingDatasets(Vec<String>),
}

/// Training-loop failures.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step} (epoch {epoch}); offending batch indices {indices:?}, probabilities {probs:?}")]
    NonFiniteLoss {
        step: u64,
        epoch: usize,
        indices: Vec<usize>,
        probs: Vec<f64>,
    },
    #[error("non-finite gradient for parameter {name:?}; step rejected")]
    NonFiniteGradient { name: String },
    #[error("training needs both classes present, manifest has one")]
    SingleClassManifest,
    #[error("empty manifest: nothing to train on")]
    EmptyManifest,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Crate-level error wrapper.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
