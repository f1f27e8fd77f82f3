//! Sequence-level knowledge distillation for attention-based
//! sequence-to-sequence recognizers.
//!
//! The crate is `no_std` (it needs `alloc`) and contains everything that is
//! pure computation:
//!
//! * [`tensor`] and [`tape`]: dense tensors and a reverse-mode tape,
//! * [`model`]: conv frontend, bidirectional GRU encoder, attention and GRU
//!   decoder with sequence log-probabilities,
//! * [`decoding`]: greedy, k-best beam and exhaustive search,
//! * [`distill`]: sequence-level and frame-level distillation losses and the
//!   pseudo-label pipeline,
//! * [`metrics`]: edit distance, CER and WER,
//! * [`train`]: Adam, teacher forcing and the epoch loop.
//!
//! File formats, audio front-end and the command line live in the `skd`
//! companion crate.
#![no_std]

extern crate alloc;

pub mod decoding;
pub mod distill;
pub mod error;
pub mod exec;
pub mod features;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
