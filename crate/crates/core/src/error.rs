use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("data length {data} does not match shape {shape:?} (product {expected})")]
    ShapeData {
        shape: Vec<usize>,
        expected: usize,
        data: usize,
    },

    #[error("mode sizes must be positive, got shape {0:?}")]
    ZeroMode(Vec<usize>),

    #[error("cannot reshape: source product {from} != target product {to}")]
    ReshapeMismatch { from: usize, to: usize },

    #[error("axis {axis} out of range for a tensor with {ndim} modes")]
    AxisOutOfRange { axis: usize, ndim: usize },

    #[error("duplicate axis {0} in axis list")]
    DuplicateAxis(usize),

    #[error("contracted axes have different sizes: {left} vs {right}")]
    ContractSize { left: usize, right: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid ring: {0}")]
    Ring(String),

    #[error("invalid merge plan: {0}")]
    Plan(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("normal equations singular while updating core {core}")]
    Singular { core: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("bad magic: expected {expected:#010x}, found {actual:#010x}")]
    BadMagic { expected: u32, actual: u32 },

    #[error("schema error at {pointer}: {message}")]
    Schema { pointer: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
