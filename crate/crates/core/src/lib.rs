//! Reliability-aware fusion of optical and SAR feature maps under missing
//! modalities.
//!
//! The crate is organized bottom-up: dense linear algebra and tensor dumps
//! in [`numerics`], reliability assessment in [`dmqa`], orthogonal
//! projection and gated fusion in [`ocnf`], availability schedules and
//! degradations in [`missing`], gradients and optimization in
//! [`graddiff`], and the synthetic training/evaluation harness in
//! [`harness`].

pub mod dmqa;
pub mod error;
pub mod graddiff;
pub mod harness;
pub mod missing;
pub mod mlp;
pub mod numerics;
pub mod ocnf;

pub use error::{Error, Result};
