//! File formats, the on-disk training driver and the command-line front end
//! for `sgformer-core`.
//!
//! * `SGDS` datasets and `SGCK` checkpoints, both bit-exact on round trip.
//! * `history.csv` training logs and P5 PGM significance maps.
//! * `train` writes `config.txt`, one checkpoint per epoch and the history.

pub mod cli;
pub mod error;
pub mod formats;
pub mod run;

pub use error::{Error, Result};
