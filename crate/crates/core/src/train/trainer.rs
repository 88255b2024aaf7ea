use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::mpsc;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::loss::{batch_objective, LossBreakdown, DEFAULT_DELTA};
use super::optim::{adamw_step, AdamWConfig, OptimizerState};
use super::schedule::lr_at_step;
use crate::data::{sample_batch, step_rng, PackedBatch, SequenceStore};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::Graph;

fn default_lr() -> f64 {
    1e-3
}
fn default_wd() -> f64 {
    0.1
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.95
}
fn default_eps() -> f64 {
    1e-8
}
fn default_warmup() -> u64 {
    10_000
}
fn default_alpha() -> f64 {
    0.02
}
fn default_delta() -> f64 {
    DEFAULT_DELTA
}
fn default_prefetch() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    /// Row length of packed batches.
    pub context: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Sampling weight per domain tag; every domain in the store needs one.
    #[serde(default)]
    pub domain_weights: BTreeMap<String, f64>,
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
    /// Batches prepared ahead of the optimizer; 0 disables the background thread.
    #[serde(default = "default_prefetch")]
    pub prefetch: usize,
}

impl TrainConfig {
    pub fn new(steps: u64, batch: usize, context: usize) -> Self {
        Self {
            steps,
            batch,
            context,
            lr: default_lr(),
            weight_decay: default_wd(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            warmup_steps: default_warmup(),
            alpha: default_alpha(),
            delta: default_delta(),
            seed: 0,
            grad_clip: None,
            domain_weights: BTreeMap::new(),
            checkpoint_every: None,
            prefetch: default_prefetch(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be finite and non-negative");
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad("delta must be positive");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("beta1 and beta2 must lie strictly between 0 and 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite() && self.weight_decay >= 0.0 && self.eps > 0.0) {
            return bad("lr, weight_decay must be non-negative and eps positive");
        }
        if self.batch == 0 || self.context < 2 {
            return bad("batch must be positive and context at least 2");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
        }
    }

    /// Learning rate of update number `update` (1-based).
    pub fn lr_for(&self, update: u64) -> f64 {
        lr_at_step(update, self.warmup_steps, self.steps, self.lr)
    }

    /// Fields that change the optimization trajectory.
    fn trajectory_key(&self) -> String {
        let mut c = self.clone();
        c.checkpoint_every = None;
        c.prefetch = 0;
        serde_json::to_string(&c).unwrap_or_default()
    }
}

/// Model and training settings in one document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub loss_ar: f64,
    pub loss_aux: f64,
    pub f_min: f64,
    pub f_max: f64,
}

impl StepRecord {
    fn new(step: u64, lr: f64, parts: &LossBreakdown) -> Self {
        let (f_min, f_max) = parts.f_range();
        Self {
            step,
            lr,
            loss: parts.total,
            loss_ar: parts.forecast,
            loss_aux: parts.aux,
            f_min,
            f_max,
        }
    }
}

pub struct Trainer {
    model: Model<f32>,
    state: OptimizerState<f32>,
    config: TrainConfig,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let state = OptimizerState::new(model.params());
        Ok(Self { model, state, config })
    }

    /// Continues a run. The checkpoint must carry optimizer state and, when it
    /// records its training settings, they must equal `config`.
    pub fn resume(ckpt: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let state = ckpt
            .optimizer
            .ok_or_else(|| Error::Compatibility("checkpoint has no optimizer state to resume from".into()))?;
        if let Some(saved) = &ckpt.header.train {
            if saved.trajectory_key() != config.trajectory_key() {
                return Err(Error::Compatibility(
                    "training settings differ from the ones stored in the checkpoint".into(),
                ));
            }
        }
        if state.step != ckpt.header.step {
            return Err(Error::Compatibility(format!(
                "checkpoint step {} disagrees with optimizer step {}",
                ckpt.header.step, state.step
            )));
        }
        Ok(Self {
            model: ckpt.model,
            state,
            config,
        })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn into_model(self) -> Model<f32> {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn optimizer(&self) -> &OptimizerState<f32> {
        &self.state
    }

    /// Completed updates.
    pub fn step(&self) -> u64 {
        self.state.step
    }

    /// Loss and gradients on `batch`, then one optimizer update.
    pub fn step_on(&mut self, batch: &PackedBatch) -> Result<StepRecord> {
        let update = self.state.step + 1;
        let lr = self.config.lr_for(update);
        let (grads, parts) = {
            let mut g = Graph::new();
            let (loss, parts, out) =
                batch_objective(&self.model, &mut g, batch, self.config.alpha, self.config.delta)?;
            let mut grads = g.backward(loss)?;
            let p = self.model.params();
            let flat: Vec<Vec<f32>> = p
                .ids()
                .map(|id| {
                    grads
                        .take(out.params[id.index()])
                        .unwrap_or_else(|| vec![0.0; p.get(id).len()])
                })
                .collect();
            (flat, parts)
        };
        adamw_step(self.model.params_mut(), &grads, &mut self.state, lr, &self.config.adamw())?;
        Ok(StepRecord::new(update, lr, &parts))
    }

    /// Batch used for update `update` (1-based); depends only on the seed.
    pub fn batch_for(&self, store: &SequenceStore, update: u64) -> Result<PackedBatch> {
        make_batch(store, &self.config, &self.model.config().head_horizons, update)
    }

    /// Trains until `until` updates have been applied, calling `on_step`
    /// after each one.
    pub fn run(
        &mut self,
        store: &SequenceStore,
        until: u64,
        mut on_step: impl FnMut(&StepRecord, &Trainer) -> Result<()>,
    ) -> Result<()> {
        if self.config.domain_weights.is_empty() {
            return Err(Error::Config("domain_weights must list a weight for every domain".into()));
        }
        let first = self.state.step + 1;
        if first > until {
            return Ok(());
        }
        if self.config.prefetch == 0 {
            for update in first..=until {
                let batch = self.batch_for(store, update)?;
                let rec = self.step_on(&batch)?;
                on_step(&rec, self)?;
            }
            return Ok(());
        }
        let horizons = self.model.config().head_horizons.clone();
        let cfg = self.config.clone();
        std::thread::scope(|s| {
            let (tx, rx) = mpsc::sync_channel(cfg.prefetch);
            s.spawn(move || {
                for update in first..=until {
                    let b = make_batch(store, &cfg, &horizons, update);
                    let stop = b.is_err();
                    if tx.send(b).is_err() || stop {
                        break;
                    }
                }
            });
            for _ in first..=until {
                let batch = rx
                    .recv()
                    .map_err(|_| Error::Training("batch producer stopped early".into()))??;
                let rec = self.step_on(&batch)?;
                on_step(&rec, self)?;
            }
            Ok(())
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.model, self.state.step, Some(&self.state), Some(&self.config))
    }
}

fn make_batch(store: &SequenceStore, cfg: &TrainConfig, horizons: &[usize], update: u64) -> Result<PackedBatch> {
    let mut rng = step_rng(cfg.seed, update);
    sample_batch(store, &mut rng, cfg.batch, cfg.context, &cfg.domain_weights, horizons)
}

/// Runs a full training schedule. Metrics go to `metrics` as one JSON
/// object per line; with `checkpoint` set the trainer state is written there
/// every `checkpoint_every` updates and at the end.
pub fn train_loop(
    model: Model<f32>,
    store: &SequenceStore,
    config: TrainConfig,
    mut metrics: Option<&mut dyn Write>,
    checkpoint: Option<&Path>,
) -> Result<(Model<f32>, Vec<StepRecord>)> {
    let mut trainer = Trainer::new(model, config)?;
    let total = trainer.config.steps;
    let every = trainer.config.checkpoint_every;
    let mut log = Vec::with_capacity(total as usize);
    trainer.run(store, total, |rec, t| {
        if let Some(w) = metrics.as_mut() {
            serde_json::to_writer(&mut **w, rec)?;
            w.write_all(b"\n")?;
        }
        if rec.step % 50 == 0 || rec.step == total {
            info!("step {} loss {:.5} (forecast {:.5}, aux {:.4}) lr {:.2e}", rec.step, rec.loss, rec.loss_ar, rec.loss_aux, rec.lr);
        } else {
            debug!("step {} loss {:.5}", rec.step, rec.loss);
        }
        if let (Some(path), Some(k)) = (checkpoint, every) {
            if k > 0 && rec.step % k == 0 {
                t.save(path)?;
            }
        }
        log.push(rec.clone());
        Ok(())
    })?;
    if let Some(path) = checkpoint {
        trainer.save(path)?;
    }
    Ok((trainer.into_model(), log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    use crate::data::synthetic::{multi_sine, sine_corpus};
    use crate::data::{CleanSeries, Origin};
    use crate::train::load_checkpoint;

    fn setup(dir: &Path) -> (SequenceStore, TrainConfig) {
        let store = SequenceStore::write(dir, "s", &sine_corpus(8, 300, 0.02, 1)).unwrap();
        let mut cfg = TrainConfig::new(2, 2, 80);
        cfg.warmup_steps = 1;
        cfg.domain_weights.insert("sine".into(), 1.0);
        (store, cfg)
    }

    fn bits(m: &Model<f32>) -> Vec<Vec<u32>> {
        m.params().iter().map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect()).collect()
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let (store, cfg) = setup(dir.path());
        let init = Model::<f32>::new(ModelConfig::tiny(), 3).unwrap();
        let (full, log) = train_loop(init.clone(), &store, cfg.clone(), None, None).unwrap();
        assert_eq!(log.len(), 2);

        let mut t = Trainer::new(init, cfg.clone()).unwrap();
        t.run(&store, 1, |_, _| Ok(())).unwrap();
        let path = dir.path().join("half.ckpt");
        t.save(&path).unwrap();
        let mut resumed = Trainer::resume(load_checkpoint(&path).unwrap(), cfg.clone()).unwrap();
        assert_eq!(resumed.step(), 1);
        resumed.run(&store, 2, |_, _| Ok(())).unwrap();
        assert_eq!(bits(resumed.model()), bits(&full));

        let mut other = cfg;
        other.seed = 99;
        assert!(matches!(
            Trainer::resume(load_checkpoint(&path).unwrap(), other),
            Err(Error::Compatibility(_))
        ));
    }

    #[test]
    fn prefetch_does_not_change_results() {
        let dir = tempfile::tempdir().unwrap();
        let (store, mut cfg) = setup(dir.path());
        let init = Model::<f32>::new(ModelConfig::tiny(), 4).unwrap();
        let (a, la) = train_loop(init.clone(), &store, cfg.clone(), None, None).unwrap();
        cfg.prefetch = 0;
        let (b, lb) = train_loop(init, &store, cfg, None, None).unwrap();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(la, lb);
    }

    #[test]
    fn seed_changes_trajectory() {
        let dir = tempfile::tempdir().unwrap();
        let (store, cfg) = setup(dir.path());
        let init = Model::<f32>::new(ModelConfig::tiny(), 5).unwrap();
        let (a, _) = train_loop(init.clone(), &store, cfg.clone(), None, None).unwrap();
        let mut other = cfg;
        other.seed = 1;
        let (b, _) = train_loop(init, &store, other, None, None).unwrap();
        assert_ne!(bits(&a), bits(&b));
    }

    #[test]
    fn metrics_are_json_lines() {
        let dir = tempfile::tempdir().unwrap();
        let (store, cfg) = setup(dir.path());
        let mut buf = Vec::new();
        let init = Model::<f32>::new(ModelConfig::tiny(), 6).unwrap();
        train_loop(init, &store, cfg, Some(&mut buf), None).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let recs: Vec<StepRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(recs.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2]);
        for key in ["step", "lr", "loss", "loss_ar", "loss_aux", "f_min", "f_max"] {
            assert!(text.lines().next().unwrap().contains(&format!("\"{key}\"")));
        }
    }

    #[test]
    fn loss_decreases_on_a_learnable_sinusoid() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let corpus: Vec<CleanSeries> = (0..16)
            .map(|i| CleanSeries {
                values: multi_sine(400, &[(12.0, 1.0, i as f64 * 0.4)], 0.0, &mut rng),
                origin: Origin { domain: "sine".into(), ..Default::default() },
            })
            .collect();
        let store = SequenceStore::write(dir.path(), "s", &corpus).unwrap();
        let mut cfg = TrainConfig::new(200, 4, 96);
        cfg.warmup_steps = 20;
        cfg.lr = 3e-3;
        cfg.weight_decay = 0.0;
        cfg.domain_weights.insert("sine".into(), 1.0);
        let init = Model::<f32>::new(ModelConfig::tiny(), 7).unwrap();
        let mut t = Trainer::new(init, cfg).unwrap();
        let probe = t.batch_for(&store, 10_000).unwrap();
        let eval = |m: &Model<f32>| {
            let mut g = Graph::new();
            batch_objective(m, &mut g, &probe, 0.0, 1.0).unwrap().1.forecast
        };
        let before = eval(t.model());
        t.run(&store, 200, |_, _| Ok(())).unwrap();
        let after = eval(t.model());
        assert!(after < 0.5 * before, "{before} -> {after}");
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::new(1, 1, 8);
        c.delta = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::new(1, 1, 8);
        c.beta2 = 1.0;
        assert!(c.validate().is_err());
        let parsed: TrainConfig = serde_json::from_str(r#"{"steps": 3, "batch": 2, "context": 16}"#).unwrap();
        assert_eq!(parsed.alpha, 0.02);
        assert_eq!(parsed.warmup_steps, 10_000);
    }
}
