//! Slide-level fine-tuning on compressed tiles: the convolutional adapter,
//! MIL heads for classification and survival, LoRA and the metrics used
//! to score them.

mod adapter;
mod lora;
mod metrics;
mod planted;
mod survival;
mod train;

pub use adapter::{
    adapter_align_pretrain, alignment_cosine, dequantized_latents, tile_target, AdapterConfig, AdapterMode, AlignConfig,
    ConvAdapter, ADAPTER_KERNEL, ADAPTER_PAD, ADAPTER_STRIDE,
};
pub use lora::{lora_merge, lora_wrap, DEFAULT_LORA_RANK};
pub use metrics::{argmax_rows, binary_auc, cindex, macro_auc, macro_f1, stratified_folds, Fold};
pub use planted::{planted_benchmark, planted_codes, planted_direction, PlantedBenchmark, PlantedConfig, PlantedSignal};
pub use survival::{hazard_nll, quantile_cuts, risk_score, survival_curve, time_bin, DEFAULT_SURVIVAL_BINS};
pub use train::{
    classify_train, mean_std, survival_train, BagTiles, ClassifyFold, ClassifyReport, FinetuneConfig, FoldCurve, HeadKind,
    InitKind, Label, MilHead, MilModel, PretrainedWeights, SlideBag, SurvivalFold, SurvivalReport, ABMIL_PREFIX,
    ADAPTER_PREFIX, WSI_PREFIX,
};
