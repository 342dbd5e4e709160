use crate::serialization::ContainerError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    /// A record or manifest line violates a data invariant.
    #[error("{0}")]
    Data(String),
    /// Shapes or configuration values that do not fit together.
    #[error("{0}")]
    Config(String),
    /// Non-finite loss or gradient.
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("LoRA {0}")]
    Lora(String),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! bail_data {
    ($($arg:tt)*) => {
        return Err($crate::error::Error::Data(format!($($arg)*)))
    };
}

macro_rules! bail_config {
    ($($arg:tt)*) => {
        return Err($crate::error::Error::Config(format!($($arg)*)))
    };
}

pub(crate) use bail_config;
pub(crate) use bail_data;
