use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch { op: &'static str, expected: String, got: String },

    #[error("attention row {row} has every logit at -inf")]
    AllMaskedRow { row: usize },

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("vocabulary is empty")]
    EmptyVocab,

    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),

    #[error("scene has no interaction to caption")]
    NoInteraction,

    #[error("caption is empty")]
    EmptyCaption,

    #[error("cannot normalize a zero vector")]
    ZeroNorm,

    #[error("label set is empty")]
    EmptyLabelSet,

    #[error("bias grid {grid}x{grid} does not cover {patches} patch tokens")]
    GridMismatch { grid: usize, patches: usize },

    #[error("category (verb {verb}, object {object}) is neither seen nor unseen under the split")]
    UnclassifiedCategory { verb: usize, object: usize },

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("frozen parameter `{0}` changed during training")]
    FrozenParameterChanged(String),

    #[error("fast path disagrees with the per-query reference by {0:e}")]
    OracleMismatch(f64),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed record: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> Error {
    Error::ShapeMismatch { op, expected: format!("{expected:?}"), got: format!("{got:?}") }
}
