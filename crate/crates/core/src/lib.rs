//! Data-free recursive distillation for open-set distributed place
//! classification.
//!
//! Robots ("teachers") expose only a query-to-label interface. A student
//! reconstructs a pseudo-training set by querying them with RRF-encoded
//! inputs, distills a classifier from it, and later serves as a teacher
//! itself.

pub mod cli;
pub mod error;
pub mod eval;
pub mod kt;
pub mod mlp;
pub mod rrf;
pub mod samplers;
pub mod scenario;
pub mod seed;
pub mod transport;

pub use error::{DfrdError, Result};
