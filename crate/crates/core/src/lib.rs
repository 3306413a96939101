//! Fake-sample adversarial training for semi-supervised classifiers.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision used by the command-line tool.

pub mod badgen;
pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod matrix;
pub mod nn;
pub mod scalar;
pub mod trainer;
pub mod vat;
pub mod verify;

pub use error::{FatError, Result};
pub use scalar::Scalar;

pub type Matrix = matrix::DenseMatrix<f64>;
pub type Mlp = nn::MlpModel<f64>;
pub type Dataset = data::SslDataset<f64>;
pub type Matrix32 = matrix::DenseMatrix<f32>;
pub type Mlp32 = nn::MlpModel<f32>;
