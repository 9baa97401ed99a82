//! File formats, dataset handling, the training loop and the `diffnca` command line
//! around [`diffnca_core`].

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod train;

pub use error::{CliError, Result};
