//! File formats, reports and the `c4` command-line tool built on [`c4_core`].

pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod manifest;
pub mod model_file;
pub mod report;

pub use error::{C4Error, Result};
