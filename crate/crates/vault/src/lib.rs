//! File formats, run configuration and the command implementations for the
//! `vault` binary, on top of [`vault_core`].

pub mod checkpoint;
pub mod config;
mod error;
pub mod fixture;
pub mod imageio;
pub mod manifest;
pub mod pipeline;
pub mod run;
pub mod textfiles;

pub use error::{Error, Result};
