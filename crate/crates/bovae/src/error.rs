use std::path::PathBuf;

/// Crate-wide error type. Construction-time shape errors inside the graph
/// panic instead; everything recoverable goes through here.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty bag passed to {op}")]
    EmptyBag { op: &'static str },

    #[error("empty text cannot be tokenized")]
    EmptyText,

    #[error("sequence of {len} tokens exceeds maximum length {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("non-finite value in {context}{}", coordinate.map(|c| format!(" at coordinate {c}")).unwrap_or_default())]
    NonFinite {
        context: String,
        coordinate: Option<usize>,
    },

    #[error("bag dimension {got} does not match model dimension {want}")]
    DimMismatch { got: usize, want: usize },

    #[error("{kind} head has not been trained")]
    UntrainedHead { kind: &'static str },

    #[error("training corpus contains a single class; need both")]
    SingleClass,

    #[error("training corpus is empty")]
    EmptyCorpus,

    #[error("window {lo}..={hi} lies entirely outside generated range 1..={n_max}")]
    WindowOutOfRange { lo: usize, hi: usize, n_max: usize },

    #[error("no candidate prefix produced a finite loss")]
    NoFinitePrefix,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
