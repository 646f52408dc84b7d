//! Personalized self-attentive sequential recommendation with stochastic
//! shared embeddings, on a small tape-based autodiff engine.

pub mod autodiff;
pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod regularization;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
