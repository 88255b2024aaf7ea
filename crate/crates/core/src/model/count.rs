use serde::{Deserialize, Serialize};

use super::config::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub activated: usize,
}

/// Analytic parameter count.
///
/// Per mixture layer the router holds `(N+1)·D` weights and each of the
/// `N+1` experts (shared included) holds `3·D·d_expert`. A token activates
/// everything except the `N−K` routed experts it was not sent to; the dense
/// variant uses one `3·D·d_ff` block and is fully activated. Embedding,
/// attention (QKV biases included), norms and heads count in both totals.
pub fn count_params(c: &ModelConfig) -> ParamCount {
    let d = c.d_model;
    let embed = 2 * d;
    let attention = 4 * d * d + 3 * d;
    let norms = 2 * d;
    let expert = 3 * d * c.d_expert;
    let (ffn_total, ffn_active) = if c.use_moe {
        let router = (c.num_experts + 1) * d;
        let total = router + (c.num_experts + 1) * expert;
        (total, total - (c.num_experts - c.top_k) * expert)
    } else {
        let dense = 3 * d * c.d_ff;
        (dense, dense)
    };
    let heads: usize = c.head_horizons.iter().map(|p| p * d).sum();
    let shared = embed + d + heads + c.num_layers * (attention + norms);
    ParamCount {
        total: shared + c.num_layers * ffn_total,
        activated: shared + c.num_layers * ffn_active,
    }
}

/// Analytic multiply-add FLOPs to process one token at the given context
/// length: two per activated matrix weight (router and every head included)
/// plus `4·D·context` per layer for attention scores and the weighted value
/// sum. Norms, biases and activations are ignored.
pub fn flops_per_token(c: &ModelConfig, context: usize) -> u64 {
    let d = c.d_model as u64;
    let ffn = if c.use_moe {
        (c.num_experts as u64 + 1) * d + (c.top_k as u64 + 1) * 3 * d * c.d_expert as u64
    } else {
        3 * d * c.d_ff as u64
    };
    let heads: u64 = c.head_horizons.iter().map(|&p| p as u64 * d).sum();
    let per_layer = 2 * (4 * d * d + ffn) + 4 * d * context as u64;
    2 * 2 * d + 2 * heads + c.num_layers as u64 * per_layer
}
