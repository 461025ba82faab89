//! Single-scale vector quantization: per-token MLP encoder, a shared
//! codebook matched by cosine (ℓ2-normalized nearest neighbour), and a
//! transformer decoder back to the source feature space.

mod baseline;
pub mod codebook;
mod model;

use serde::{Deserialize, Serialize};

use crate::diffmath::AdamW;
use crate::error::Result;
use crate::msvq::{train_step, ScaleSchedule, Tokenizer};
use crate::synth::TileST;

pub use baseline::{cls_baseline_recon, ClsDecoder, FidelityCurves};
pub use codebook::{
    codebook_stats, lookup_rows, quantize_rows, Codebook, CodebookStats, DEFAULT_DEAD_THRESHOLD, MAX_CODEBOOK_SIZE,
};
pub use model::{VqDecoder, VqEncoder};

/// Per-step loss breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VqLossReport {
    /// Mean cosine between reconstructions and targets.
    pub cosine: f64,
    /// `1 − cosine`, the reconstruction part of the minimised loss.
    pub cos_term: f64,
    pub commitment: f64,
    pub total: f64,
    /// Mean squared distance between normalized latents and their
    /// normalized reconstructions.
    pub code_distance: f64,
    /// Perplexity of the batch's code assignments.
    pub perplexity: f64,
}

/// One step of plain patch-level VQ: the multi-scale step restricted to
/// the single `p×p` scale.
pub fn vq_train_step(tok: &mut Tokenizer<f32>, batch: &[&TileST], opt: &mut AdamW<f32>) -> Result<VqLossReport> {
    let sched = ScaleSchedule::patch_only(tok.cfg.grid);
    train_step(tok, batch, &sched, opt)
}

#[cfg(test)]
mod tests;
