//! Seeded counter-based random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Independent stream `stream` under master `seed`. ChaCha is counter
/// based, so a stream is fully determined by `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stable 64-bit FNV-1a hash of a label, for naming streams.
pub fn label_stream(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Stream keyed by a label and an integer id.
pub fn labeled_rng(seed: u64, label: &str, id: u64) -> StreamRng {
    stream_rng(seed, label_stream(label) ^ id.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}
