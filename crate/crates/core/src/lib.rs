//! Pure-Rust SG-Former backbone: a small reverse-mode tensor engine,
//! hybrid-scale window attention with significance extraction, importance
//! guided key/value reallocation, the four-stage model, and the desk-scale
//! training core.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the training
//! driver with checkpoints and the CLI live in the `sgformer` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
pub mod error;
pub mod guided;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod rng;
#[cfg(test)]
pub(crate) mod test_util;

pub use error::{Error, Result};
pub use numerics::{Graph, Real, Tensor, Var};
