use alloc::string::String;

/// Errors raised by the core engine.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("empty-mask reduction")]
    EmptyMask,
    #[error("loss is not a scalar (shape {0:?})")]
    NotScalar([usize; 4]),
    #[error("insufficient bins: need at least 2 defined bins, found {0}")]
    InsufficientBins(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
