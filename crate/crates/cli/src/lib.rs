//! Command-line front end for `indexnet-core`: run configuration, the
//! `IDXN` checkpoint container, PPM/PGM images and the `indexnet` binary's
//! subcommands.

pub mod alloc;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod image;

pub use commands::{run, Cli};
pub use error::{CliError, Result};
