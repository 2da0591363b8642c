//! LSTM and capsule autoencoders for multivariate time-series anomaly
//! detection, with a small tape-based autodiff engine underneath.

pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod compare;
pub mod data;
pub mod detector;
pub mod error;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod nab;
pub mod optim;
pub mod synthetic;
pub mod tensor;
#[cfg(any(test, feature = "test-utils"))]
pub mod testing;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
