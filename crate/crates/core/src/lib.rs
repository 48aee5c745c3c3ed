//! Core of the glyphforge dual-manifold font model.
//!
//! Everything in this crate is pure computation over in-memory data and
//! builds without `std` (an allocator is required). File formats, PNG IO,
//! checkpoint containers and the command line live in the `glyphforge`
//! crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod adaptive_loss;
pub mod autodiff;
pub mod baselines;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod interpolate;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod quadrature;
pub mod synthetic;
pub mod tensor;
pub mod trainer;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::Tensor;
