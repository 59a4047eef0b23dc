use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("prompt length {0} must be even")]
    OddPromptLength(usize),
    #[error("mask ratio {0} out of range (3·γ must not exceed 1)")]
    MaskRatio(f64),
    #[error("image size {image} is not divisible by patch size {patch}")]
    PatchGrid { image: usize, patch: usize },
    #[error("embed dim {dim} is not divisible by {heads} heads")]
    Heads { dim: usize, heads: usize },
    #[error("central difference intensity {0} outside [0, 1]")]
    Theta(f64),
    #[error("{0}")]
    Invalid(String),
    #[error("input plane {name} is {got_h}×{got_w}, expected {want}×{want}")]
    PlaneSize {
        name: &'static str,
        got_h: usize,
        got_w: usize,
        want: usize,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("{tokens} tokens do not fill a {height}×{width} grid")]
    GridMismatch {
        tokens: usize,
        height: usize,
        width: usize,
    },
    #[error("central difference intensity {0} outside [0, 1]")]
    Theta(f64),
    #[error("token count {0} per modality is not a perfect square")]
    NonSquare(usize),
    #[error("residual carry {0} at layer {1}")]
    Carry(&'static str, usize),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("layer {layer} out of range 1..={layers}")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("parameter `{name}`: shape {got:?} does not match expected {want:?}")]
    ShapeMismatch {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("backbone fingerprint mismatch: checkpoint {stored}, loaded {actual}")]
    FingerprintMismatch { stored: String, actual: String },
    #[error("malformed weight file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing-modality ratio {0} outside [0, 1]")]
    Alpha(f64),
    #[error("empty id list")]
    EmptyIds,
    #[error("row `{id}`: {reason}")]
    Row { id: String, reason: String },
    #[error("manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("unknown preprocessing mode `{0}`")]
    UnknownMode(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no {0} samples; rate undefined")]
    EmptyClass(&'static str),
    #[error("score and label counts differ ({0} vs {1})")]
    Length(usize, usize),
    #[error("target rate {0} outside (0, 1)")]
    Target(f64),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MmrError {
    #[error("mask ratio {0} out of range (3·γ must not exceed 1)")]
    MaskRatio(f64),
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Mmr(#[from] MmrError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("training diverged at epoch {epoch} step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("configuration error: {0}")]
    Invalid(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("plot error: {0}")]
    Plot(String),
}

impl From<(PathBuf, std::io::Error)> for ModelError {
    fn from((path, source): (PathBuf, std::io::Error)) -> Self {
        ModelError::Io { path, source }
    }
}

impl From<(PathBuf, std::io::Error)> for DataError {
    fn from((path, source): (PathBuf, std::io::Error)) -> Self {
        DataError::Io { path, source }
    }
}

impl From<(PathBuf, std::io::Error)> for HarnessError {
    fn from((path, source): (PathBuf, std::io::Error)) -> Self {
        HarnessError::Io { path, source }
    }
}
