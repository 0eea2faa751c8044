//! Exact-likelihood generative modeling with normalizing flows.
//!
//! The crate is organized around a small define-by-run reverse-mode
//! autodiff engine over dense tensors ([`ad`]), a library of invertible
//! transforms with exact log-Jacobian determinants ([`flows`]), gated
//! conv/attention conditioning networks ([`conditioning`]), discrete-data
//! dequantization including a learned conditional-flow noise model
//! ([`dequant`]), a maximum-likelihood training loop with bits/dim
//! accounting ([`training`]), and dataset/file plumbing ([`dataio`]).
//!
//! Numeric kernels (tensors, autodiff, linear algebra, special functions)
//! are generic over the [`scalar::Scalar`] trait; the modeling layers fix
//! the scalar to `f64` through the type aliases below. Log-determinant and
//! bound arithmetic are precision-sensitive, so everything downstream of
//! the kernels runs in 64-bit.

pub mod ad;
pub mod check;
pub mod conditioning;
pub mod dataio;
pub mod dequant;
pub mod error;
pub mod flows;
pub mod linalg;
pub mod math;
pub mod model;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Dense row-major tensor of 64-bit floats, the universal value type.
pub type Tensor = tensor::TensorBase<f64>;
/// Single-precision tensor, for callers that trade precision for size.
pub type Tensor32 = tensor::TensorBase<f32>;
/// Expression handle in the 64-bit autodiff graph.
pub type Expr = ad::ExprBase<f64>;
