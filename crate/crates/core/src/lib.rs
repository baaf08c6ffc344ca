//! Convolutional dynamic alignment networks.

pub mod bench;
pub mod data;
pub mod dau;
pub mod decomposition;
pub mod error;
pub mod evdemo;
pub mod metrics;
pub mod net;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Real, Tensor, Var};
