#![no_std]
//! Numeric core for image-text transformers that can take their language
//! input from a separate language model.
//!
//! Everything in this crate is pure computation over in-memory values: a
//! small reverse-mode autodiff engine, transformer building blocks, the
//! mini language model and the joint vision-and-language model in its four
//! wirings, plus the data transforms, optimizer, metrics and checkpoint codec
//! that the training loop needs. File and process IO live in the `vault`
//! crate.

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod checkpoint;
pub mod data;
pub mod encoder;
mod error;
pub mod fixture;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod lm;
pub mod metrics;
pub mod optim;
pub mod param;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod train;
pub mod vlm;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::{Real, Tensor};
