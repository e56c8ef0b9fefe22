use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the recognition engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported sample rate: {0} Hz (expected 16000)")]
    UnsupportedSampleRate(u32),

    #[error("input too short: {samples} samples, need at least {needed}")]
    InputTooShort { samples: usize, needed: usize },

    #[error("mask out of range: span [{start}, {end}) not within [0, {frames})")]
    MaskOutOfRange { start: usize, end: usize, frames: usize },

    #[error("degenerate power: {0} signal has zero mean-square amplitude")]
    DegeneratePower(&'static str),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("recording shorter than one encoder frame ({0} mel frames, need 8)")]
    TooShortForEncoder(usize),

    #[error("target too long for lattice: {target} labels (+{repeats} repeats) over {frames} frames")]
    TargetTooLong {
        target: usize,
        repeats: usize,
        frames: usize,
    },

    #[error("instance too large for enumeration: {0} label sequences")]
    InstanceTooLarge(f64),

    #[error("coverage gap at encoder frame {0}")]
    CoverageGap(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("unknown symbol {0:?} for vocabulary")]
    UnknownSymbol(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("non-finite loss at step {step} (lr {lr:e}, grad norm {grad_norm:e})")]
    NanLoss { step: usize, lr: f64, grad_norm: f64 },

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
