use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("unsupported audio encoding in {path}: {detail}")]
    UnsupportedEncoding { path: PathBuf, detail: String },
    #[error("zero-length audio: {0}")]
    EmptyAudio(PathBuf),
    #[error("invalid signal: {0}")]
    InvalidSignal(String),
    #[error("signal of {len} samples is shorter than the required {required}")]
    SignalTooShort { len: usize, required: usize },
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    RateMismatch(u32, u32),
    #[error("length mismatch of {samples} samples exceeds tolerance for pair {id}")]
    PairLengthMismatch { id: String, samples: usize },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("unknown layout: {0}")]
    UnknownLayout(String),
    #[error("empty result set: {0}")]
    EmptyResultSet(String),
    #[error("label file missing under {0}")]
    LabelFileMissing(PathBuf),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("unknown model id: {0}")]
    UnknownModel(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("plugin not registered: {0}")]
    PluginMissing(String),
    #[error("evaluator failure: {0}")]
    Evaluator(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// True when the failure comes from an input that does not exist.
    pub fn is_missing_input(&self) -> bool {
        match self {
            Error::MissingFile(_) | Error::LabelFileMissing(_) => true,
            Error::Io(e) => e.kind() == std::io::ErrorKind::NotFound,
            _ => false,
        }
    }

    /// True when the failure is a configuration problem rather than a runtime one.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::UnknownLayout(_) | Error::UnknownModel(_) | Error::PluginMissing(_)
        )
    }
}
