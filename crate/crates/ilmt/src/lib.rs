//! Files, checkpoints and the command line for `ilmt-core`.
//!
//! The core crate holds the model and algorithms with no I/O; this crate
//! adds the on-disk formats (checkpoints, run configs, corpora, tokenizer
//! files, metrics) and the `ilmt` binary.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod run;
pub mod synthetic;

pub use error::{CliError, Result};
