//! Scribble-supervised salient object detection, end to end on the CPU.
//!
//! The crate is organized around a small f64 tensor core with hand-written
//! backward passes ([`tensor`]), the three training losses and their
//! composition ([`losses`]), a compact encoder–decoder with weighted
//! multi-level fusion ([`network`]), dataset tooling ([`data`]), evaluation
//! measures ([`metrics`]), and the SGD training loop ([`trainer`]).

pub mod error;
pub mod data;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod trainer;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
