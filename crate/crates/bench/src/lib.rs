//! Fixtures shared by the codec benchmarks.

use vqtok_core::diffmath::nn::TransformerConfig;
use vqtok_core::msvq::{ScaleSchedule, Tokenizer, TokenizerConfig};
use vqtok_core::synth::{SynthBackbone, SynthConfig, TileST};

/// Frozen, untrained tokenizer on a 14x14 grid with the default scales.
/// Coding cost does not depend on the weight values.
pub fn tokenizer(dim: usize) -> Tokenizer<f32> {
    let cfg = TokenizerConfig {
        dim,
        grid: 14,
        code_dim: 16,
        codebook_size: 512,
        enc_hidden: 128,
        decoder: TransformerConfig { width: 64, depth: 2, heads: 4, mlp_ratio: 2 },
        schedule: ScaleSchedule::default_for(14),
        ..TokenizerConfig::default()
    };
    let mut tok = Tokenizer::new(cfg).expect("valid tokenizer config");
    tok.freeze();
    tok
}

pub fn tiles(dim: usize, count: u64) -> Vec<TileST> {
    let bb = SynthBackbone::new(SynthConfig { dim, grid: 14, with_cls: false, ..SynthConfig::default() }).expect("valid synth config");
    (0..count).map(|i| bb.generate_tile(i)).collect()
}
