//! Target-restricted preference optimization on a toy multimodal policy.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`numerics`]), a
//! grid-image conditioned attention policy ([`model`]), the DPO loss family
//! with target-span masking ([`losses`], [`targeting`]), a synthetic dataset
//! generator ([`data`]), the training loop ([`training`]) and experiment
//! harnesses ([`verification`]).

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod targeting;
pub mod training;
pub mod verification;

pub use error::{Error, Result};
