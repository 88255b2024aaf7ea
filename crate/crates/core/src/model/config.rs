use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of a sparse forecasting transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    /// Routed experts per mixture layer (the shared expert is extra).
    pub num_experts: usize,
    /// Routed experts activated per token.
    pub top_k: usize,
    pub d_model: usize,
    /// Hidden size of the dense feed-forward variant.
    pub d_ff: usize,
    /// Hidden size of every routed and shared expert.
    pub d_expert: usize,
    #[serde(default = "default_horizons")]
    pub head_horizons: Vec<usize>,
    #[serde(default = "default_max_context")]
    pub max_context: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    /// `false` swaps every mixture layer for a dense SwiGLU block.
    #[serde(default = "default_true")]
    pub use_moe: bool,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    /// Init scale of the two point-embedding vectors. Their fan-in is 1, and
    /// at small scale the gated embedding is nearly even in its input.
    #[serde(default = "default_embed_init_std")]
    pub embed_init_std: f64,
}

pub const DEFAULT_HORIZONS: [usize; 4] = [1, 8, 32, 64];

fn default_horizons() -> Vec<usize> {
    DEFAULT_HORIZONS.to_vec()
}

fn default_max_context() -> usize {
    4096
}

fn default_rope_base() -> f64 {
    10000.0
}

fn default_true() -> bool {
    true
}

fn default_init_std() -> f64 {
    0.02
}

fn default_embed_init_std() -> f64 {
    1.0
}

impl ModelConfig {
    #[allow(clippy::too_many_arguments)]
    fn preset(num_layers: usize, num_heads: usize, d_model: usize, d_ff: usize, d_expert: usize) -> Self {
        Self {
            num_layers,
            num_heads,
            num_experts: 8,
            top_k: 2,
            d_model,
            d_ff,
            d_expert,
            head_horizons: default_horizons(),
            max_context: default_max_context(),
            rope_base: default_rope_base(),
            use_moe: true,
            init_std: default_init_std(),
            embed_init_std: default_embed_init_std(),
        }
    }

    /// 12 layers, 12 heads, 8 experts (top-2), D=384.
    pub fn base() -> Self {
        Self::preset(12, 12, 384, 1536, 192)
    }

    pub fn large() -> Self {
        Self::preset(12, 12, 768, 3072, 384)
    }

    pub fn ultra() -> Self {
        Self::preset(36, 16, 1024, 4096, 512)
    }

    /// Desk-scale model used by tests and examples.
    pub fn tiny() -> Self {
        Self {
            num_layers: 2,
            num_heads: 2,
            num_experts: 4,
            top_k: 2,
            d_model: 8,
            d_ff: 32,
            d_expert: 16,
            head_horizons: default_horizons(),
            max_context: 512,
            rope_base: default_rope_base(),
            use_moe: true,
            init_std: default_init_std(),
            embed_init_std: default_embed_init_std(),
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 || self.num_heads == 0 || self.d_model == 0 {
            return err("layers, heads and d_model must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return err(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if !self.d_head().is_multiple_of(2) {
            return err(format!("head dimension {} must be even for rotary embeddings", self.d_head()));
        }
        if self.num_experts == 0 || self.top_k == 0 || self.top_k > self.num_experts {
            return err(format!(
                "need 1 <= top_k ({}) <= num_experts ({})",
                self.top_k, self.num_experts
            ));
        }
        if self.d_ff == 0 || self.d_expert == 0 {
            return err("d_ff and d_expert must be positive".into());
        }
        validate_horizons(&self.head_horizons)?;
        if self.max_context == 0 {
            return err("max_context must be positive".into());
        }
        if !(self.rope_base > 0.0) || !(self.init_std > 0.0) || !(self.embed_init_std > 0.0) {
            return err("rope_base and init scales must be positive".into());
        }
        Ok(())
    }
}

pub fn validate_horizons(h: &[usize]) -> Result<()> {
    if h.first() != Some(&1) {
        return Err(Error::Config(format!("head horizons must start at 1, got {h:?}")));
    }
    if h.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("head horizons must be strictly ascending, got {h:?}")));
    }
    Ok(())
}
