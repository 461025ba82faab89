use crate::config::{Key, RunConfig};
use crate::error::CliResult;

mod common;
mod compress;
mod finetune;
mod pretrain;
mod report;
mod synth;
mod train_vq;

pub struct CommandSpec {
    pub name: &'static str,
    pub about: &'static str,
    pub keys: fn() -> Vec<Key>,
    pub run: fn(&RunConfig) -> CliResult<()>,
}

pub const COMMANDS: [CommandSpec; 7] = [
    CommandSpec { name: "synth", about: "Write synthetic feature tiles or regions to PVQF", keys: synth::keys, run: synth::run },
    CommandSpec { name: "train-vq", about: "Train a VQ or multi-scale VQ tokenizer and save it as PVQT", keys: train_vq::keys, run: train_vq::run },
    CommandSpec { name: "compress", about: "Encode feature tiles to a PVQI index stream", keys: compress::compress_keys, run: compress::run_compress },
    CommandSpec { name: "decompress", about: "Decode a PVQI index stream back to PVQF features", keys: compress::decompress_keys, run: compress::run_decompress },
    CommandSpec { name: "pretrain", about: "Slide-level self-supervised pretraining on tokenized regions", keys: pretrain::keys, run: pretrain::run },
    CommandSpec { name: "finetune", about: "Cross-validated slide classification or survival training", keys: finetune::keys, run: finetune::run },
    CommandSpec { name: "report", about: "Compression accounting and charts of run metrics", keys: report::keys, run: report::run },
];
