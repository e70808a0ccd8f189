//! Test-time personalized federated learning at desk scale.
//!
//! This crate simulates a federation in which a pretrained global model is
//! personalized on unlabeled target clients at test time. Instead of fixing
//! which parts of the network to adapt, a scalar adaptation rate per module
//! is learned from the distribution shifts among labeled source clients and
//! then drives unsupervised adaptation — batch-wise or online — on targets.
//!
//! See the guide under `book/` for a narrative walk-through; its code
//! listings are compiled and run as doctests.

pub mod adapt;
pub mod error;
pub mod manifest;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
