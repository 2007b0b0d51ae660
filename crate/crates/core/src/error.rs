use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    /// Protocol misuse, e.g. probing the same vector ordinal twice in one pass.
    #[error("logic error: {0}")]
    Logic(String),
    #[error("no stored signatures for layer {layer}")]
    MissingStore { layer: usize },
    #[error("training diverged at epoch {epoch}, iteration {iteration} (loss = {loss})")]
    Diverged { epoch: usize, iteration: usize, loss: f64 },
    #[error("dataset is empty")]
    EmptyDataset,
}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(alloc::format!($($arg)*))
    };
}

macro_rules! config_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Config(alloc::format!($($arg)*))
    };
}

pub(crate) use config_err;
pub(crate) use shape_err;
