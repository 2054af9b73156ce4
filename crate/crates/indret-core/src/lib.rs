//! Core numerics for indicative image retrieval.
//!
//! Everything in this crate is pure computation over in-memory values:
//! dense n-dimensional tensors with a reverse-mode gradient tape, patch
//! decomposition, multi-metric matching tensors, the 4D verification
//! network with hypersphere attention regulation, Grad-CAM evidence
//! decoding, pseudo-relevance feedback, and retrieval metrics.
//!
//! The crate is `no_std` (with `alloc`); IO, file formats, and the CLI
//! live in the companion `indret` crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod error;
pub mod evalkit;
pub mod explain;
pub mod har;
pub mod matchtensor;
pub mod network;
pub mod patching;
pub mod prf;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::CoreError;
pub use tensor::Tensor;
