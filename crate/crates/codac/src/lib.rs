//! File formats, configuration text and the command-line driver for
//! [`codac_core`].

pub mod checkpoint_io;
pub mod cli;
pub mod config_text;
pub mod dataset_io;
pub mod error;
pub mod report;

pub use error::{CliError, Result};
