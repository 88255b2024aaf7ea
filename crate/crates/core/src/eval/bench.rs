use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::synthetic::regime_corpus;
use crate::data::{sample_batch, step_rng, PackedBatch, SequenceStore};
use crate::error::{Error, Result};
use crate::model::{count_params, flops_per_token, Model, ModelConfig, ParamCount};
use crate::numerics::Graph;
use crate::train::{batch_objective, train_loop, TrainConfig};

/// Dense counterpart of a mixture config whose feed-forward width gives the
/// closest activated parameter count.
pub fn matched_dense(moe: &ModelConfig) -> ModelConfig {
    let active_ffn = (moe.num_experts + 1) as f64 / 3.0 + ((moe.top_k + 1) * moe.d_expert) as f64;
    ModelConfig {
        use_moe: false,
        d_ff: active_ffn.round().max(1.0) as usize,
        ..moe.clone()
    }
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}
fn default_per_regime() -> usize {
    24
}
fn default_series_len() -> usize {
    512
}
fn default_noise() -> f64 {
    0.05
}
fn default_probe_batches() -> usize {
    8
}
fn default_tolerance() -> f64 {
    0.02
}

/// A mixture config, its dense twin and the shared training budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchPair {
    pub moe: ModelConfig,
    /// Derived with [`matched_dense`] when absent.
    #[serde(default)]
    pub dense: Option<ModelConfig>,
    /// Seeds and domain weights are filled in per run.
    pub train: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Training series per regime.
    #[serde(default = "default_per_regime")]
    pub per_regime: usize,
    #[serde(default = "default_series_len")]
    pub series_len: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Held-out batches the final loss is averaged over.
    #[serde(default = "default_probe_batches")]
    pub probe_batches: usize,
    /// Largest accepted relative gap in activated parameters.
    #[serde(default = "default_tolerance")]
    pub parity_tolerance: f64,
}

impl BenchPair {
    pub fn dense_config(&self) -> ModelConfig {
        self.dense.clone().unwrap_or_else(|| matched_dense(&self.moe))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRun {
    pub seed: u64,
    pub moe_loss: f64,
    pub dense_loss: f64,
    pub moe_seconds: f64,
    pub dense_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub moe: ModelConfig,
    pub dense: ModelConfig,
    pub moe_params: ParamCount,
    pub dense_params: ParamCount,
    /// `|a_moe − a_dense| / a_dense` over activated parameters.
    pub parity_gap: f64,
    pub parity_ok: bool,
    pub context: usize,
    pub moe_flops_per_token: u64,
    pub dense_flops_per_token: u64,
    pub steps: u64,
    pub runs: Vec<BenchRun>,
    /// Seeds where the mixture's held-out loss is at most the dense one.
    pub moe_wins: usize,
}

/// Mean forecast loss (no auxiliary term) over fixed batches.
pub fn probe_loss(model: &Model<f32>, batches: &[PackedBatch], delta: f64) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::Usage("no probe batches".into()));
    }
    let mut sum = 0.0;
    for b in batches {
        let mut g = Graph::new();
        let (_, parts, _) = batch_objective(model, &mut g, b, 0.0, delta)?;
        sum += parts.forecast;
    }
    Ok(sum / batches.len() as f64)
}

fn regime_weights() -> BTreeMap<String, f64> {
    (0..3).map(|r| (format!("regime{r}"), 1.0)).collect()
}

/// Trains both configs of `pair` on the three-regime task for every seed
/// with identical batches, and compares held-out losses. Stores are written
/// under `workdir`.
pub fn bench_sparse_vs_dense(pair: &BenchPair, workdir: &Path) -> Result<BenchReport> {
    let dense = pair.dense_config();
    pair.moe.validate()?;
    dense.validate()?;
    if !pair.moe.use_moe || dense.use_moe {
        return Err(Error::Config("bench pair needs one mixture and one dense config".into()));
    }
    if pair.moe.head_horizons != dense.head_horizons {
        return Err(Error::Config("bench pair must share forecasting heads".into()));
    }
    pair.train.validate()?;
    let moe_params = count_params(&pair.moe);
    let dense_params = count_params(&dense);
    let gap = (moe_params.activated as f64 - dense_params.activated as f64).abs() / dense_params.activated as f64;
    std::fs::create_dir_all(workdir)?;
    let mut runs = Vec::with_capacity(pair.seeds.len());
    for &seed in &pair.seeds {
        let train_store = SequenceStore::write(
            workdir,
            &format!("train{seed}"),
            &regime_corpus(pair.per_regime, pair.series_len, pair.noise, seed),
        )?;
        let probe_store = SequenceStore::write(
            workdir,
            &format!("probe{seed}"),
            &regime_corpus(pair.per_regime.div_ceil(2), pair.series_len, pair.noise, seed ^ 0x5eed_0000),
        )?;
        let weights = regime_weights();
        let probes = (0..pair.probe_batches as u64)
            .map(|i| {
                let mut rng = step_rng(seed ^ 0x9e37_79b9, i);
                sample_batch(&probe_store, &mut rng, pair.train.batch, pair.train.context, &weights, &pair.moe.head_horizons)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut cfg = pair.train.clone();
        cfg.seed = seed;
        cfg.domain_weights = weights;
        let fit = |mc: &ModelConfig| -> Result<(f64, f64)> {
            let t0 = Instant::now();
            let (m, _) = train_loop(Model::new(mc.clone(), seed)?, &train_store, cfg.clone(), None, None)?;
            let secs = t0.elapsed().as_secs_f64();
            Ok((probe_loss(&m, &probes, cfg.delta)?, secs))
        };
        let (moe_loss, moe_seconds) = fit(&pair.moe)?;
        let (dense_loss, dense_seconds) = fit(&dense)?;
        info!("seed {seed}: moe {moe_loss:.5} ({moe_seconds:.1}s), dense {dense_loss:.5} ({dense_seconds:.1}s)");
        runs.push(BenchRun {
            seed,
            moe_loss,
            dense_loss,
            moe_seconds,
            dense_seconds,
        });
    }
    let context = pair.train.context;
    Ok(BenchReport {
        moe_flops_per_token: flops_per_token(&pair.moe, context),
        dense_flops_per_token: flops_per_token(&dense, context),
        moe: pair.moe.clone(),
        dense,
        moe_params,
        dense_params,
        parity_gap: gap,
        parity_ok: gap <= pair.parity_tolerance,
        context,
        steps: pair.train.steps,
        moe_wins: runs.iter().filter(|r| r.moe_loss <= r.dense_loss).count(),
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_moe() -> ModelConfig {
        ModelConfig {
            d_model: 32,
            num_heads: 4,
            num_experts: 4,
            top_k: 2,
            d_expert: 32,
            max_context: 128,
            ..ModelConfig::tiny()
        }
    }

    #[test]
    fn matched_dense_is_within_parity_and_cheaper_when_narrow() {
        let moe = small_moe();
        let dense = matched_dense(&moe);
        assert_eq!(dense.d_ff, 98);
        let (a, b) = (count_params(&moe).activated as f64, count_params(&dense).activated as f64);
        assert!((a - b).abs() / b < 0.02);
        assert!(flops_per_token(&moe, 96) < flops_per_token(&dense, 96));
    }

    #[test]
    fn flops_ordering_follows_expert_width() {
        for (k, de, dff) in [(1usize, 8usize, 64usize), (2, 16, 64), (2, 8, 200)] {
            let moe = ModelConfig { top_k: k, d_expert: de, ..small_moe() };
            let dense = ModelConfig { use_moe: false, d_ff: dff, ..small_moe() };
            // activated width counts the shared expert and the router row per expert
            let moe_width = (k + 1) * de * 3 * 32 + 5 * 32;
            assert_eq!(flops_per_token(&moe, 10) < flops_per_token(&dense, 10), moe_width < 3 * 32 * dff);
        }
    }

    #[test]
    fn tiny_bench_runs_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut train = TrainConfig::new(3, 2, 48);
        train.warmup_steps = 1;
        train.prefetch = 0;
        let pair = BenchPair {
            moe: ModelConfig { max_context: 64, ..ModelConfig::tiny() },
            dense: None,
            train,
            seeds: vec![1, 2],
            per_regime: 2,
            series_len: 96,
            noise: 0.05,
            probe_batches: 2,
            parity_tolerance: 0.02,
        };
        let r = bench_sparse_vs_dense(&pair, dir.path()).unwrap();
        assert_eq!(r.runs.len(), 2);
        assert!(r.runs.iter().all(|x| x.moe_loss.is_finite() && x.dense_loss.is_finite()));
        assert!(r.moe_wins <= 2);
        let back: BenchReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
        let again = bench_sparse_vs_dense(&pair, dir.path()).unwrap();
        assert_eq!(
            again.runs.iter().map(|x| (x.moe_loss, x.dense_loss)).collect::<Vec<_>>(),
            r.runs.iter().map(|x| (x.moe_loss, x.dense_loss)).collect::<Vec<_>>()
        );
    }
}
