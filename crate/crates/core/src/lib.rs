// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod fft;
pub mod io;
pub mod localize;
pub mod pipeline;
pub mod prox;
pub mod psf;
pub mod render;
pub mod scalar;
pub mod sim;
pub mod solver;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Real;

/// Double-precision stack, the type most pipelines work in.
pub type Stack = tensor::Tensor3<f64>;
/// Double-precision PSF kernel.
pub type Psf = tensor::Kernel2<f64>;
