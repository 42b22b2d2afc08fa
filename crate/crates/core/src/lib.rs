//! Select-additive learning: finds identity-driven dimensions of a learned
//! representation and retrains the classifier with noise injected there.
//!
//! The numeric core ([`tensor`], [`nn`], [`sal`]) is generic over the
//! floating-point element type; the aliases below fix it to `f64`, the
//! precision used by the experiment harness.

pub mod error;
pub mod experiment;
pub mod nn;
pub mod sal;
pub mod scalar;
pub mod stats;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix = tensor::Matrix<f64>;
pub type Network = nn::Network<f64>;
pub type Gradients = nn::Gradients<f64>;
pub type SalModel = sal::SalModel<f64>;

pub type MatrixF32 = tensor::Matrix<f32>;
pub type NetworkF32 = nn::Network<f32>;
pub type SalModelF32 = sal::SalModel<f32>;
