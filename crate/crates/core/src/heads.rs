//! Multi-resolution output heads, greedy horizon scheduling and the
//! autoregressive forecasting loop.

use crate::error::{Error, Result};
use crate::model::{validate_horizons, Model};
use crate::numerics::{Graph, Real, Tensor};

/// One bias-free projection `[p_j×D]` per configured horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    pub horizons: Vec<usize>,
    pub weights: Vec<Tensor<T>>,
}

/// Applies every head to every position of `hidden[T×D]`; the j-th output is
/// `[T×p_j]` with row `t` forecasting steps `t+1..=t+p_j`.
pub fn head_forward<T: Real>(hidden: &Tensor<T>, heads: &HeadParams<T>) -> Result<Vec<Tensor<T>>> {
    if heads.horizons.len() != heads.weights.len() {
        return Err(Error::Config(format!(
            "{} horizons but {} head matrices",
            heads.horizons.len(),
            heads.weights.len()
        )));
    }
    let mut g = Graph::new();
    let h = g.input(hidden.clone());
    heads
        .weights
        .iter()
        .zip(&heads.horizons)
        .map(|(w, &p)| {
            if w.shape()[0] != p {
                return Err(Error::shape(format!("head for horizon {p} has shape {:?}", w.shape())));
            }
            let wn = g.leaf(w);
            let y = g.linear(h, wn)?;
            Ok(g.tensor(y))
        })
        .collect()
}

/// Ordered head horizons whose sum is the requested forecast length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ForecastPlan {
    pub picks: Vec<usize>,
}

impl ForecastPlan {
    pub fn total(&self) -> usize {
        self.picks.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.picks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.picks.is_empty()
    }
}

/// Greedy schedule: repeatedly take the largest horizon that still fits in
/// the remaining length. Terminates because the smallest horizon is 1.
pub fn plan_horizons(h: usize, horizons: &[usize]) -> Result<ForecastPlan> {
    if h < 1 {
        return Err(Error::Usage("forecast horizon must be at least 1".into()));
    }
    validate_horizons(horizons)?;
    let mut picks = Vec::new();
    let mut covered = 0;
    while covered < h {
        let p = *horizons
            .iter()
            .rev()
            .find(|&&p| covered + p <= h)
            .expect("horizon 1 always fits");
        covered += p;
        picks.push(p);
    }
    Ok(ForecastPlan { picks })
}

/// Anything that can produce per-head forecasts from the end of a context.
pub trait Forecaster<T: Real>: Sync {
    fn horizons(&self) -> &[usize];
    fn max_context(&self) -> usize;
    /// The j-th entry holds `horizons()[j]` values forecast from the last
    /// context position.
    fn predict_last(&self, context: &[T]) -> Result<Vec<Vec<T>>>;
}

impl<T: Real> Forecaster<T> for Model<T> {
    fn horizons(&self) -> &[usize] {
        &self.config().head_horizons
    }

    fn max_context(&self) -> usize {
        self.config().max_context
    }

    fn predict_last(&self, context: &[T]) -> Result<Vec<Vec<T>>> {
        Model::predict_last(self, context)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForecastOptions {
    /// Average the overlapping prefix of every head at least as long as the
    /// scheduled one instead of using the scheduled head alone.
    pub ensemble: bool,
}

/// Forecasts `h` future points of a univariate series.
///
/// Each plan step runs one forward pass on the current context, takes the
/// scheduled head's forecast from the last position and appends it to the
/// context. Contexts longer than the model's `max_context` keep only their
/// most recent points.
pub fn autoregressive_forecast<T: Real, F: Forecaster<T> + ?Sized>(
    model: &F,
    context: &[T],
    h: usize,
    opts: ForecastOptions,
) -> Result<Vec<T>> {
    if context.is_empty() {
        return Err(Error::Usage("empty forecasting context".into()));
    }
    let horizons = model.horizons().to_vec();
    let plan = plan_horizons(h, &horizons)?;
    let max_ctx = model.max_context();
    let mut ctx = context.to_vec();
    let mut out = Vec::with_capacity(h);
    for &pick in &plan.picks {
        let window = &ctx[ctx.len().saturating_sub(max_ctx)..];
        let preds = model.predict_last(window)?;
        let j = horizons.iter().position(|&p| p == pick).expect("plan uses configured horizons");
        let step: Vec<T> = if opts.ensemble {
            let members: Vec<&Vec<T>> = preds[j..].iter().collect();
            let n = T::of(members.len() as f64);
            (0..pick)
                .map(|i| members.iter().fold(T::zero(), |acc, m| acc + m[i]) / n)
                .collect()
        } else {
            preds[j][..pick].to_vec()
        };
        ctx.extend_from_slice(&step);
        out.extend(step);
    }
    Ok(out)
}

/// Channel-independent forecasting of `context[T×C]` into `[h×C]`.
/// Channels are forecast in parallel and never see each other.
pub fn forecast_multivariate<T: Real, F: Forecaster<T> + ?Sized>(
    model: &F,
    context: &Tensor<T>,
    h: usize,
    opts: ForecastOptions,
) -> Result<Tensor<T>> {
    let [t, c] = context.shape() else {
        return Err(Error::shape(format!("expected [T, C] context, got {:?}", context.shape())));
    };
    let (t, c) = (*t, *c);
    let channels: Vec<Vec<T>> = (0..c)
        .map(|j| (0..t).map(|i| context.data()[i * c + j]).collect())
        .collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(c);
    let mut results: Vec<Option<Result<Vec<T>>>> = (0..c).map(|_| None).collect();
    std::thread::scope(|s| {
        let chunk = c.div_ceil(workers);
        for (series, slots) in channels.chunks(chunk).zip(results.chunks_mut(chunk)) {
            s.spawn(move || {
                for (x, slot) in series.iter().zip(slots) {
                    *slot = Some(autoregressive_forecast(model, x, h, opts));
                }
            });
        }
    });
    let mut out = vec![T::zero(); h * c];
    for (j, r) in results.into_iter().enumerate() {
        let f = r.expect("every channel is forecast")?;
        for (i, v) in f.into_iter().enumerate() {
            out[i * c + j] = v;
        }
    }
    Tensor::new(out, &[h, c])
}
