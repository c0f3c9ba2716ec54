//! Pyramid non-local attention and the PNEN edge-preserving smoothing network.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the common choices.

pub mod error;
pub mod filters;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod nonlocal;
pub mod ops;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tensor::{Shape, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Pnen32 = model::PnenModel<f32>;
pub type Pnen64 = model::PnenModel<f64>;
