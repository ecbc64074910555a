//! Storage and command-line layer for [`rand25d_core`]: volume files,
//! checkpoints, graymap export, text configuration and dataset indexes.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod pgm;
pub mod volume_io;

pub use error::{Error, Result};
