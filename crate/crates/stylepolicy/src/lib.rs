//! Learned compositions of analytic image operations for cross-domain
//! stylization.
//!
//! The crate trains a K-stage stylization policy — per stage, a categorical
//! selection over a dictionary of image operations, a normalized parameter,
//! and an application probability — to move a source image distribution
//! toward a target distribution under a sliced Wasserstein (or learned
//! critic) distance, optionally regularized by a classification task loss.

pub mod data;
pub mod distance;
pub mod error;
pub mod nets;
pub mod ops;
pub mod policy;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tensor, Tape, NodeId};
