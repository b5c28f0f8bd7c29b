use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unsupported meter {0}: only 4/4 is accepted")]
    UnsupportedMeter(String),
    #[error("polyphonic content: {0}")]
    Polyphony(String),
    #[error("overlapping notes at frame {0}")]
    Overlap(usize),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("{pitches} pitches cannot cover {onsets} onsets")]
    ArityMismatch { pitches: usize, onsets: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("token {token} outside the {alphabet} alphabet")]
    Vocab { token: u32, alphabet: &'static str },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("need at least {needed} windows, got {got}")]
    TooFewWindows { needed: usize, got: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("invalid sketch: {0}")]
    Spec(String),
    #[error("invalid mask: {0}")]
    Mask(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid request: {0}")]
    Validation(String),
    #[error("model not loaded: {0}")]
    ModelNotLoaded(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
