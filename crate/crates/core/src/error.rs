use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A caller-side precondition did not hold.
    #[error("contract violated: {0}")]
    Contract(String),
    /// A computation received or produced a non-finite value.
    #[error("numeric domain error: {0}")]
    NumericDomain(String),
    /// The metric has no defined value for the given input.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    /// Training produced a non-finite loss for one batch member.
    #[error("non-finite loss at batch index {index}")]
    NonFiniteLoss { index: usize },
}

macro_rules! contract {
    ($($arg:tt)*) => {
        $crate::error::Error::Contract(alloc::format!($($arg)*))
    };
}
pub(crate) use contract;
