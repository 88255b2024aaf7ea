use std::ops::Range;
use std::path::PathBuf;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_csv, CsvSchema, Dataset, MultiSeries, PackedBatch, Splits, Standardizer};
use crate::error::{Error, Result};
use crate::heads::{autoregressive_forecast, ForecastOptions, Forecaster};
use crate::model::{Model, ModelConfig};
use crate::train::{TrainConfig, Trainer};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    #[default]
    ZeroShot,
    FineTune,
}

/// Settings of the single fine-tuning epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FineTuneConfig {
    pub lr: f64,
    pub batch: usize,
    /// Crop length over the train split.
    pub context: usize,
    pub weight_decay: f64,
    pub alpha: f64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch: 8,
            context: 512,
            weight_decay: 0.1,
            alpha: 0.02,
        }
    }
}

fn default_eval_horizons() -> Vec<usize> {
    vec![96, 192, 336, 720]
}
fn default_eval_contexts() -> Vec<usize> {
    vec![512, 1024, 2048, 3072]
}
fn default_true() -> bool {
    true
}
fn default_stride() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub dataset: PathBuf,
    /// Label used in the report; the file stem when absent.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub schema: CsvSchema,
    #[serde(default = "default_eval_horizons")]
    pub horizons: Vec<usize>,
    /// Context length paired with each horizon.
    #[serde(default = "default_eval_contexts")]
    pub contexts: Vec<usize>,
    #[serde(default)]
    pub mode: EvalMode,
    #[serde(default = "default_true")]
    pub standardize: bool,
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Keep at most this many evenly spaced windows per horizon.
    #[serde(default)]
    pub max_windows: Option<usize>,
    #[serde(default)]
    pub ensemble: bool,
    #[serde(default)]
    pub fine_tune: FineTuneConfig,
    #[serde(default)]
    pub seed: u64,
}

impl EvalSpec {
    pub fn new(dataset: impl Into<PathBuf>) -> Self {
        Self {
            dataset: dataset.into(),
            name: None,
            schema: CsvSchema::default(),
            horizons: default_eval_horizons(),
            contexts: default_eval_contexts(),
            mode: EvalMode::ZeroShot,
            standardize: true,
            stride: 1,
            max_windows: None,
            ensemble: false,
            fine_tune: FineTuneConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizons.len() != self.contexts.len() || self.horizons.is_empty() {
            return Err(Error::Config(format!(
                "{} horizons paired with {} contexts",
                self.horizons.len(),
                self.contexts.len()
            )));
        }
        if self.horizons.iter().chain(&self.contexts).any(|&v| v == 0) || self.stride == 0 {
            return Err(Error::Config("horizons, contexts and stride must be positive".into()));
        }
        if self.max_windows == Some(0) {
            return Err(Error::Config("max_windows must be positive".into()));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            self.dataset
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into())
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub dataset: String,
    pub horizon: usize,
    pub context: usize,
    pub windows: usize,
    pub mse: f64,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetAverage {
    pub dataset: String,
    pub mse: f64,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub model_hash: String,
    pub model: Option<ModelConfig>,
    pub seed: u64,
    pub mode: EvalMode,
    /// Whether metrics are on the train-standardized scale.
    pub standardized: bool,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub averages: Vec<DatasetAverage>,
    pub meta: RunMeta,
}

impl EvalReport {
    pub fn new(rows: Vec<EvalRow>, meta: RunMeta) -> Self {
        let mut names: Vec<&str> = Vec::new();
        for r in &rows {
            if !names.contains(&r.dataset.as_str()) {
                names.push(&r.dataset);
            }
        }
        let averages = names
            .iter()
            .map(|n| {
                let mine: Vec<&EvalRow> = rows.iter().filter(|r| r.dataset == *n).collect();
                let k = mine.len() as f64;
                DatasetAverage {
                    dataset: n.to_string(),
                    mse: mine.iter().map(|r| r.mse).sum::<f64>() / k,
                    mae: mine.iter().map(|r| r.mae).sum::<f64>() / k,
                }
            })
            .collect();
        Self { rows, averages, meta }
    }
}

/// One evaluation window: the model sees `context`, is scored on `target`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub context: Range<usize>,
    pub target: Range<usize>,
}

/// Windows whose targets start inside the test split every `stride` rows
/// and end inside it; each context is the `context` rows right before its
/// target.
pub fn rolling_windows(
    splits: &Splits,
    context: usize,
    horizon: usize,
    stride: usize,
    max_windows: Option<usize>,
) -> Result<Vec<Window>> {
    let test = &splits.test;
    if test.start < context {
        return Err(Error::Windowing(format!(
            "context {context} needs more history than the {} rows before the test split",
            test.start
        )));
    }
    if test.len() < horizon {
        return Err(Error::Windowing(format!(
            "horizon {horizon} longer than the {}-row test split",
            test.len()
        )));
    }
    let starts: Vec<usize> = (test.start..=test.end - horizon).step_by(stride.max(1)).collect();
    let picked: Vec<usize> = match max_windows {
        Some(k) if k < starts.len() => (0..k).map(|i| starts[i * starts.len() / k]).collect(),
        _ => starts,
    };
    Ok(picked
        .into_iter()
        .map(|s| Window {
            context: s - context..s,
            target: s..s + horizon,
        })
        .collect())
}

/// Checks that no context reaches into its own target and every target
/// lies inside the test split; returns the number of violations.
pub fn audit_windows(windows: &[Window], splits: &Splits) -> usize {
    windows
        .iter()
        .filter(|w| {
            w.context.end > w.target.start
                || w.target.start < splits.test.start
                || w.target.end > splits.test.end
                || w.context.is_empty()
        })
        .count()
}

/// Forecasts the last observed value for every future step.
#[derive(Clone, Copy, Debug, Default)]
pub struct LastValue;

impl Forecaster<f32> for LastValue {
    fn horizons(&self) -> &[usize] {
        &[1]
    }

    fn max_context(&self) -> usize {
        1
    }

    fn predict_last(&self, context: &[f32]) -> Result<Vec<Vec<f32>>> {
        let last = *context.last().ok_or_else(|| Error::Usage("empty context".into()))?;
        Ok(vec![vec![last]])
    }
}

/// SHA-256 over the configuration document and every named parameter.
pub fn model_hash(model: &Model<f32>) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(model.config()).unwrap_or_default());
    for (name, t) in model.params().iter() {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn scaled(series: &MultiSeries, splits: &Splits, standardize: bool) -> Result<MultiSeries> {
    if standardize {
        Ok(Standardizer::fit(series, splits.train.clone())?.apply(series))
    } else {
        Ok(series.clone())
    }
}

/// Squared and absolute error sums plus point count over the given windows.
fn score_windows<F: Forecaster<f32> + ?Sized>(
    f: &F,
    series: &MultiSeries,
    windows: &[Window],
    opts: ForecastOptions,
) -> Result<(f64, f64, usize)> {
    let c = series.channels();
    let mut sq = 0.0;
    let mut ab = 0.0;
    let mut n = 0;
    for w in windows {
        for ch in 0..c {
            let ctx: Vec<f32> = w.context.clone().map(|r| series.values[r * c + ch] as f32).collect();
            let pred = autoregressive_forecast(f, &ctx, w.target.len(), opts)?;
            for (k, r) in w.target.clone().enumerate() {
                let e = series.values[r * c + ch] - f64::from(pred[k]);
                sq += e * e;
                ab += e.abs();
                n += 1;
            }
        }
    }
    Ok((sq, ab, n))
}

/// Rolling evaluation of any forecaster over the test split, one row per
/// (horizon, context) pair. Windows are split across threads.
pub fn evaluate_forecaster<F: Forecaster<f32> + ?Sized>(
    f: &F,
    data: &Dataset,
    spec: &EvalSpec,
) -> Result<Vec<EvalRow>> {
    spec.validate()?;
    let series = scaled(&data.series, &data.splits, spec.standardize)?;
    let opts = ForecastOptions { ensemble: spec.ensemble };
    let mut rows = Vec::with_capacity(spec.horizons.len());
    for (&h, &ctx) in spec.horizons.iter().zip(&spec.contexts) {
        let windows = rolling_windows(&data.splits, ctx, h, spec.stride, spec.max_windows)?;
        debug_assert_eq!(audit_windows(&windows, &data.splits), 0);
        let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(windows.len()).max(1);
        let chunk = windows.len().div_ceil(workers);
        let parts: Vec<Result<(f64, f64, usize)>> = std::thread::scope(|s| {
            let handles: Vec<_> = windows
                .chunks(chunk)
                .map(|ws| {
                    let series = &series;
                    s.spawn(move || score_windows(f, series, ws, opts))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
        });
        let (mut sq, mut ab, mut n) = (0.0, 0.0, 0usize);
        for p in parts {
            let (a, b, c) = p?;
            sq += a;
            ab += b;
            n += c;
        }
        let row = EvalRow {
            dataset: spec.label(),
            horizon: h,
            context: ctx,
            windows: windows.len(),
            mse: sq / n as f64,
            mae: ab / n as f64,
        };
        info!("{} H={} ctx={} windows={} mse={:.4} mae={:.4}", row.dataset, h, ctx, row.windows, row.mse, row.mae);
        rows.push(row);
    }
    Ok(rows)
}

/// Train-split crops for fine-tuning: each channel cut into consecutive
/// pieces of `context` rows (the last one may be shorter; pieces under two
/// rows are dropped), channel by channel.
pub fn train_crops(series: &MultiSeries, train: Range<usize>, context: usize) -> Vec<Vec<f32>> {
    let c = series.channels();
    let mut out = Vec::new();
    for ch in 0..c {
        let mut s = train.start;
        while s < train.end {
            let e = (s + context).min(train.end);
            if e - s >= 2 {
                out.push((s..e).map(|r| series.values[r * c + ch] as f32).collect());
            }
            s = e;
        }
    }
    out
}

/// One deterministic pass over the train split, one crop per batch row.
pub fn fine_tune_epoch(model: Model<f32>, data: &Dataset, spec: &EvalSpec) -> Result<Model<f32>> {
    let ft = &spec.fine_tune;
    let series = scaled(&data.series, &data.splits, spec.standardize)?;
    let context = ft.context.min(model.config().max_context);
    let crops = train_crops(&series, data.splits.train.clone(), context);
    if crops.is_empty() {
        return Err(Error::Windowing("train split too short to fine-tune on".into()));
    }
    let batches: Vec<&[Vec<f32>]> = crops.chunks(ft.batch.max(1)).collect();
    let mut cfg = TrainConfig::new(batches.len() as u64, ft.batch.max(1), context);
    cfg.lr = ft.lr;
    cfg.warmup_steps = 0;
    cfg.weight_decay = ft.weight_decay;
    cfg.alpha = ft.alpha;
    cfg.seed = spec.seed;
    let horizons = model.config().head_horizons.clone();
    let mut trainer = Trainer::new(model, cfg)?;
    for rows in batches {
        let packed: Vec<Vec<Vec<f32>>> = rows.iter().map(|c| vec![c.clone()]).collect();
        let batch = PackedBatch::from_rows(&packed, context, &horizons)?;
        match trainer.step_on(&batch) {
            Ok(_) | Err(Error::DegenerateBatch(_)) => {}
            Err(e) => return Err(e),
        }
    }
    info!("fine-tuned for {} updates", trainer.step());
    Ok(trainer.into_model())
}

/// Full protocol on one dataset: ingest, optionally fine-tune for one epoch,
/// then rolling evaluation.
pub fn eval_model(model: &Model<f32>, spec: &EvalSpec) -> Result<EvalReport> {
    spec.validate()?;
    let data = load_csv(&spec.dataset, &spec.schema)?;
    eval_on(model, &data, spec)
}

pub fn eval_on(model: &Model<f32>, data: &Dataset, spec: &EvalSpec) -> Result<EvalReport> {
    let tuned;
    let used = match spec.mode {
        EvalMode::ZeroShot => model,
        EvalMode::FineTune => {
            tuned = fine_tune_epoch(model.clone(), data, spec)?;
            &tuned
        }
    };
    let rows = evaluate_forecaster(used, data, spec)?;
    Ok(EvalReport::new(
        rows,
        RunMeta {
            model_hash: model_hash(model),
            model: Some(model.config().clone()),
            seed: spec.seed,
            mode: spec.mode,
            standardized: spec.standardize,
            stride: spec.stride,
        },
    ))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::data::SplitSpec;

    fn dataset(rows: usize, channels: usize, f: impl Fn(usize, usize) -> f64, split: (usize, usize, usize)) -> Dataset {
        let values = (0..rows).flat_map(|r| (0..channels).map(move |c| (r, c))).map(|(r, c)| f(r, c)).collect();
        Dataset {
            series: MultiSeries {
                names: (0..channels).map(|c| format!("c{c}")).collect(),
                rows,
                values,
            },
            splits: Splits::resolve(
                &SplitSpec::Counts {
                    train: split.0,
                    val: split.1,
                    test: split.2,
                },
                rows,
            )
            .unwrap(),
        }
    }

    fn spec(horizons: Vec<usize>, contexts: Vec<usize>) -> EvalSpec {
        EvalSpec {
            horizons,
            contexts,
            ..EvalSpec::new("toy.csv")
        }
    }

    #[test]
    fn last_value_on_constant_series_is_exact() {
        let d = dataset(200, 2, |_, c| 3.0 + c as f64, (100, 20, 80));
        let mut s = spec(vec![8, 16], vec![10, 20]);
        s.standardize = false;
        let rows = evaluate_forecaster(&LastValue, &d, &s).unwrap();
        assert_eq!(rows.len(), 2);
        for r in &rows {
            assert_eq!((r.mse, r.mae), (0.0, 0.0));
        }
        assert_eq!(rows[0].windows, 80 - 8 + 1);
    }

    #[test]
    fn last_value_matches_closed_form_on_a_ramp() {
        // x_t = t: the error at lead k is k, so MSE = mean k², MAE = mean k
        let d = dataset(60, 1, |r, _| r as f64, (30, 10, 20));
        let mut s = spec(vec![4], vec![5]);
        s.standardize = false;
        let rows = evaluate_forecaster(&LastValue, &d, &s).unwrap();
        assert!((rows[0].mse - 7.5).abs() < 1e-6);
        assert!((rows[0].mae - 2.5).abs() < 1e-6);
    }

    #[test]
    fn windows_need_history_and_room() {
        let d = dataset(100, 1, |r, _| r as f64, (50, 10, 40));
        assert!(matches!(rolling_windows(&d.splits, 61, 4, 1, None), Err(Error::Windowing(_))));
        assert!(matches!(rolling_windows(&d.splits, 60, 41, 1, None), Err(Error::Windowing(_))));
        let w = rolling_windows(&d.splits, 60, 40, 1, None).unwrap();
        assert_eq!(w, vec![Window { context: 0..60, target: 60..100 }]);
        let s = spec(vec![8], vec![70]);
        assert!(matches!(evaluate_forecaster(&LastValue, &d, &s), Err(Error::Windowing(_))));
    }

    #[test]
    fn ett_sized_splits_never_leak() {
        let splits = Splits::resolve(&SplitSpec::Preset("ETTh1".into()), 14307).unwrap();
        for (h, c) in [(96, 512), (192, 1024), (336, 2048), (720, 2881)] {
            let w = rolling_windows(&splits, c, h, 1, None).unwrap();
            assert_eq!(w.len(), 2881 - h + 1);
            assert_eq!(audit_windows(&w, &splits), 0);
            assert!(w.iter().all(|x| x.context.end == x.target.start));
        }
    }

    proptest! {
        #[test]
        fn audited_windows_are_clean(train in 1usize..300, val in 0usize..100, test in 1usize..200,
                                     h in 1usize..50, ctx in 1usize..300, stride in 1usize..7, cap in prop::option::of(1usize..20)) {
            let splits = Splits::resolve(&SplitSpec::Counts { train, val, test }, train + val + test).unwrap();
            match rolling_windows(&splits, ctx, h, stride, cap) {
                Ok(w) => {
                    prop_assert!(!w.is_empty());
                    prop_assert_eq!(audit_windows(&w, &splits), 0);
                    if let Some(k) = cap { prop_assert!(w.len() <= k); }
                }
                Err(e) => prop_assert!(matches!(e, Error::Windowing(_))),
            }
        }
    }

    #[test]
    fn report_averages_are_row_means() {
        let rows = vec![
            EvalRow { dataset: "a".into(), horizon: 1, context: 1, windows: 1, mse: 1.0, mae: 0.5 },
            EvalRow { dataset: "a".into(), horizon: 2, context: 1, windows: 1, mse: 3.0, mae: 1.5 },
            EvalRow { dataset: "b".into(), horizon: 1, context: 1, windows: 1, mse: 2.0, mae: 2.0 },
        ];
        let meta = RunMeta { model_hash: String::new(), model: None, seed: 0, mode: EvalMode::ZeroShot, standardized: true, stride: 1 };
        let r = EvalReport::new(rows, meta);
        assert_eq!(r.averages.len(), 2);
        assert_eq!((r.averages[0].mse, r.averages[0].mae), (2.0, 1.0));
        let back: EvalReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn model_report_has_one_row_per_horizon_and_is_deterministic() {
        let d = dataset(240, 2, |r, c| ((r as f64) * 0.3 + c as f64).sin(), (120, 40, 80));
        let mut cfg = ModelConfig::tiny();
        cfg.max_context = 64;
        let m = Model::<f32>::new(cfg, 1).unwrap();
        let mut s = spec(vec![8, 24], vec![32, 48]);
        s.max_windows = Some(5);
        let a = eval_on(&m, &d, &s).unwrap();
        assert_eq!(a.rows.len(), 2);
        assert!(a.rows.iter().all(|r| r.mse.is_finite() && r.mse >= 0.0 && r.windows == 5));
        assert_eq!(a, eval_on(&m, &d, &s).unwrap());
        assert_eq!(a.meta.model_hash.len(), 64);

        s.mode = EvalMode::FineTune;
        s.fine_tune.context = 40;
        s.fine_tune.batch = 2;
        let tuned = eval_on(&m, &d, &s).unwrap();
        assert_eq!(tuned.rows.len(), 2);
        assert_ne!(tuned.rows, a.rows);
    }

    #[test]
    fn train_crops_cover_the_train_split_once() {
        let d = dataset(50, 2, |r, c| (r * 10 + c) as f64, (23, 7, 20));
        let crops = train_crops(&d.series, d.splits.train.clone(), 10);
        assert_eq!(crops.len(), 6);
        assert_eq!(crops.iter().map(Vec::len).sum::<usize>(), 46);
        assert_eq!(crops[3][0], 1.0);
    }
}
