//! Multivariate time-series forecasting with joint-axis attention.
//!
//! The crate is self-contained: a small float64 reverse-mode autodiff
//! engine ([`tensor`]), data handling ([`data`]), the model pieces
//! ([`decompose`], [`patch`], [`ja`], [`model`]) and training ([`train`]).

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decompose;
pub mod error;
pub mod export;
pub mod ja;
pub mod model;
pub mod nn;
pub mod par;
pub mod patch;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{ModelConfig, TiVaT};
pub use tensor::{Tape, Tensor, Var};
