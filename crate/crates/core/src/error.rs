use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unreadable wav file {path}: {message}")]
    UnreadableWav { path: PathBuf, message: String },
    #[error("unsupported channel count {0} (expected mono)")]
    UnsupportedChannels(u16),
    #[error("unsupported sample encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("unsupported sample rate {got} Hz (expected {expected} Hz)")]
    UnsupportedSampleRate { got: u32, expected: u32 },
    #[error("empty waveform")]
    EmptyWaveform,
    #[error("non-finite sample at index {0}")]
    NonFiniteSample(usize),
    #[error("waveform of {len} samples is shorter than one frame ({frame} samples)")]
    TooShort { len: usize, frame: usize },
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    SampleRateMismatch(u32, u32),
    #[error("silent signal: {0}")]
    Silent(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("sequence of {got} frames too short for the encoder (minimum {min})")]
    SequenceTooShort { got: usize, min: usize },
    #[error("non-finite activation in layer {layer} ({name})")]
    NonFiniteActivation { layer: usize, name: &'static str },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("profile error: {0}")]
    Profile(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
