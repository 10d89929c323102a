use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("batch-norm in train mode needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),

    #[error("zero-norm vector in {0}")]
    ZeroNorm(&'static str),

    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },

    #[error("unknown utterance id `{0}`")]
    UnknownUtterance(String),

    #[error("EER needs both same-speaker and different-speaker trials")]
    SingleClass,

    #[error("invalid argument: {0}")]
    Invalid(String),
}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(alloc::format!($($arg)*))
    };
}
pub(crate) use shape_err;
