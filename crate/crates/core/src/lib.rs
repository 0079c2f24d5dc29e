//! Second-stage interaction recognition for two-stage human-object interaction
//! detection: a small reverse-mode autograd, attention decoders that build
//! interaction features and refine verb text embeddings, cosine classification
//! with focal training, zero-shot splits and HICO-style mAP.
//!
//! The crate is `no_std` (with `alloc`) unless the `std` feature is enabled.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod check;
pub mod data;
pub mod error;
pub mod eval;
pub mod hico;
pub mod interaction;
pub mod math;
pub mod model;
pub mod scoring;
pub mod splits;
pub mod synth;
pub mod train;
pub mod nn;
pub mod tensor;
pub mod verb;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, TensorError, Var};
