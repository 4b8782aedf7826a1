//! File formats, training driver and command-line interface for `revisp-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod image_io;
pub mod manifest;
pub mod report;

pub use error::{Error, Result};
