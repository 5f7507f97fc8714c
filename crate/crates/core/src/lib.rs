//! Desk-scale laboratory for post-training weight quantization of tiny
//! mixture-of-experts transformers.
//!
//! The crate forges small MoE models, samples expert-balanced calibration
//! data from the model itself via width-limited branch search, captures
//! gate-affinity-weighted activation traces, and quantizes expert weights
//! with RTN, Hessian-compensated, and activation-aware scale-search solvers,
//! optionally after a Walsh-Hadamard rotation of the weight columns.

pub mod agq;
pub(crate) mod bytes;
pub mod ebss;
pub mod error;
pub mod linalg;
pub mod model;
pub mod qmodel;
pub mod quant;

pub use error::{Error, Result};
