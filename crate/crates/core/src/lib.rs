//! Encoder layer fusion for sequence-to-sequence Transformers.
//!
//! The crate contains a small reverse-mode differentiation engine, an
//! encoder-decoder Transformer that exposes every encoder layer, fine-grained
//! layer attention, the SurfaceFusion output head (hard and soft), synthetic
//! copy and cipher tasks, a trainer with greedy and beam decoding, and the
//! diagnostics used to study which encoder layers the decoder relies on.

// `!(x > 0.0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layer_fusion;
pub mod ops;
pub mod surface_fusion;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
pub use tensor::{Rng, Tensor};
