//! Command-line front end for NeMO functional factor analysis: file formats,
//! run configuration, summaries and replicated simulation studies.

pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod simstudy;
pub mod summary;

pub use error::{CliError, CliResult};
