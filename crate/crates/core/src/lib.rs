//! Illumination-aware gamma correction for low-light image enhancement.
//!
//! The crate carries its own small reverse-mode autodiff engine
//! ([`tensor`]), the model components ([`gamma`], [`fusion`],
//! [`como_vit`]), the three-stage pipeline with its training loop
//! ([`pipeline`]) and data plumbing ([`data`]).

pub mod como_vit;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gamma;
pub mod gradsuite;
pub mod nn;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{ParamStore, Real, Tensor};
