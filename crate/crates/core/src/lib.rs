//! Vector-quantized compression of spatial feature tokens.
//!
//! The crate trains a single- or multi-scale VQ tokenizer over per-tile
//! patch-token grids, serializes tokenizers and compressed index streams,
//! and uses the frozen tokenizer as the target for slide-level
//! self-supervised pretraining and downstream multiple-instance learning.

mod binio;
pub mod codec;
pub mod diffmath;
pub mod downstream;
pub mod error;
pub mod msvq;
pub mod ssl;
pub mod synth;
pub mod vq;

pub use error::{Error, Result};
