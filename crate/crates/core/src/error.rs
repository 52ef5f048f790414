use alloc::string::String;

/// Errors raised anywhere in the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("size error: element count of {0} overflows")]
    Size(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("spec error: {0}")]
    Spec(String),
    #[error("unknown parameter '{0}'")]
    UnknownParameter(String),
    #[error("unbound input '{0}'")]
    UnboundInput(String),
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("loss must be a scalar (1,1,1,1) tensor, got {0}")]
    NonScalarLoss(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
}

pub type Result<T> = core::result::Result<T, Error>;
