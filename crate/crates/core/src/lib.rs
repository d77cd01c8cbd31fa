//! Multi-connected channel attention networks for single-image
//! super-resolution: model construction, cost analysis, training and
//! evaluation on the CPU.

pub mod analysis;
pub mod arch;
pub mod data;
pub mod format;
pub mod tensor;
pub mod train;
pub mod weights;

use thiserror::Error;

pub use arch::{Model, ModelConfig, Preset, SigmoidVariant};
pub use tensor::{Tensor, TensorError};
pub use weights::WeightStore;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] arch::graph::GraphError),
    #[error(transparent)]
    Format(#[from] format::FormatError),
    #[error(transparent)]
    Image(#[from] data::ImageError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Invalid(String),
    #[error("non-finite loss {loss} at step {step}")]
    NonFinite { step: u64, loss: f64 },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
