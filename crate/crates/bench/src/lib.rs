//! Shared fixtures for the criterion benchmarks.

use std::path::Path;

use tsmoe_core::data::synthetic::sine_corpus;
use tsmoe_core::data::SequenceStore;
use tsmoe_core::ModelConfig;

/// Two-layer mixture model used throughout the desk-scale checks.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        num_heads: 4,
        num_experts: 4,
        top_k: 2,
        d_model: 32,
        d_ff: 98,
        d_expert: 32,
        max_context: 512,
        ..ModelConfig::tiny()
    }
}

/// A deterministic, non-periodic looking fill for kernel inputs.
pub fn filler(n: usize, salt: u32) -> Vec<f32> {
    (0..n)
        .map(|i| {
            let x = (i as u32).wrapping_mul(2_654_435_761).wrapping_add(salt.wrapping_mul(40_503));
            (x >> 8) as f32 / (1u32 << 24) as f32 - 0.5
        })
        .collect()
}

pub fn series(len: usize, seed: u64) -> Vec<f32> {
    sine_corpus(1, len, 0.05, seed).remove(0).values
}

pub fn toy_store(dir: &Path) -> SequenceStore {
    SequenceStore::write(dir, "bench", &sine_corpus(32, 1024, 0.05, 1)).expect("bench store")
}
