//! Class-aware feature alignment for test-time adaptation.
//!
//! A pretrained classifier `h ∘ g` is adapted online to a shifted test
//! stream by updating only its batch-normalization affine parameters. The
//! class-aware objective pulls each test feature toward the source Gaussian
//! of its predicted class while pushing it away from the others, measured in
//! Mahalanobis distance against class-conditional source statistics that are
//! computed once before adaptation.
//!
//! Modules, bottom-up:
//!
//! - [`numcore`]: dense matrices, Cholesky factor/solve, covariance accumulation.
//! - [`nn`]: dense + BN feature extractor, linear head, hand-written backprop.
//! - [`stats`]: class-conditional and global source Gaussians, stats file I/O.
//! - [`align`]: Mahalanobis distances, alignment losses, baseline losses.
//! - [`tta`]: the online adaptation loop, Adam, per-batch run records.

pub mod align;
pub mod error;
pub mod nn;
pub mod numcore;
pub mod stats;
pub mod tta;

pub use error::{Error, Result};
