//! File formats, the training driver and the command line around
//! `glyphforge-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod image_io;
pub mod partition_cache;
pub mod run;
pub mod store;

pub use error::{Error, Result};
