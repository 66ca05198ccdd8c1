//! Long-short range attention (LSRA) transformer building blocks.
//!
//! The crate is `no_std` and only needs `alloc`. It contains:
//!
//! - [`tensor`]: a dense n-d array with a dynamic reverse-mode tape,
//! - [`layers`]: linear, embedding, GLU, multi-head attention, lightweight
//!   and dynamic depthwise convolution, FFN,
//! - [`lsra`]: the two-branch LSRA block, the flattened block and the
//!   encoder/decoder layers built from them,
//! - [`model`]: encoder-decoder and causal LM models, greedy/beam decoding,
//!   perplexity and attention-map export,
//! - [`cost`]: exact Mult-Adds and parameter accounting plus the mobile gate,
//! - [`compress`]: sensitivity scan, magnitude pruning, k-means quantization,
//! - [`train`]: synthetic tasks, label-smoothed loss, schedules, Adam.
//!
//! File formats, config parsing and the command-line driver live in the
//! `lsra-cli` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod compress;
pub mod cost;
mod error;
pub mod layers;
pub mod lsra;
pub(crate) mod math;
pub mod model;
pub mod params;
mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore, Session};
pub use rng::Rng;
pub use tensor::{Graph, Tensor, Var};

/// Reserved token ids shared by every synthetic vocabulary.
pub mod tokens {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    /// First id available for content tokens.
    pub const FIRST_CONTENT: usize = 3;
}
