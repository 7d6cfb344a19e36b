//! KV-cache compression for multimodal transformer inference.
//!
//! The engine splits a cache into a smooth base component, recovered by
//! low-pass filtering each channel along the position axis, and a sparse
//! set of outlier positions that deviate from it. A global retention budget
//! is spread across layers in proportion to how much energy each layer
//! holds above the frequency cutoff, and every layer keeps its protected
//! positions (attention sinks, the recent window, optionally all text
//! tokens) plus its top-scoring outliers.
//!
//! The crate also ships reference eviction baselines, a synthetic dump
//! generator with planted ground truth, dense-attention evaluation, a
//! spectrum diagnostic, and binary container formats for dumps and
//! compressed caches.

mod analysis;
mod baselines;
mod budget;
mod cache;
mod diag;
mod dump;
mod error;
mod eval;
mod fkv;
mod outlier;
mod spectral;
mod synth;
mod tensor;

pub use baselines::{select_baseline, PolicyId};
pub use budget::{allocate, layer_energy_ratio, AllocationMode, BudgetAllocation, LayerEnergyRatio};
pub use cache::{
    compress, compress_with_policy, protected_positions, CompressedCache, CompressionConfig,
    CompressionOutcome, DevSummary, EvictionScope, LayerPlan, RetentionPlan, PLAN_FORMAT,
};
pub use diag::{spectrum_summary, HeadSpectrum, LayerSpectrum, SpectrumSummary};
pub use dump::{DType, DumpMeta, KvDump, TokenTag};
pub use error::{Error, Result};
pub use eval::{
    evaluate_plan, GlobalMetrics, LayerMetrics, Metrics, QueryMatrix, METRICS_FORMAT,
};
pub use fkv::{
    read_cache, read_dump, read_json, read_queries, write_cache, write_dump, write_json,
    write_queries, FKC_MAGIC, FKV_MAGIC, FORMAT_VERSION,
};
pub use outlier::{
    compute_base_kv, deviation_scores, select_outliers, BaseKv, DeviationScores, SelectionResult,
};
pub use spectral::{cutoff, dct, idct, lowpass, power_spectrum, DctPlan};
pub use synth::{generate, SynthSpec, SynthTruth};
pub use tensor::{LayerKv, Tensor3};
