use serde::{Deserialize, Serialize};

use crate::data::PackedBatch;
use crate::error::{Error, Result};
use crate::model::{ForwardOutput, Model, SeqLayout};
use crate::moe::RouterOutput;
use crate::numerics::{huber_value, Graph, NodeId, Real, Tensor};

pub const DEFAULT_DELTA: f64 = 1.0;

/// Huber loss of one prediction.
pub fn huber<T: Real>(x: T, x_hat: T, delta: T) -> T {
    huber_value(x - x_hat, delta)
}

/// Balance loss `N·Σ f_i·r_i` of one mixture layer.
pub fn aux_loss(f: &[f64], r: &[f64]) -> f64 {
    f.len() as f64 * f.iter().zip(r).map(|(a, b)| a * b).sum::<f64>()
}

/// Per-head Huber averaged over the `p` elements of every masked-in
/// position; `None` when the head has no valid position.
pub fn masked_huber_mean<T: Real>(pred: &[T], target: &[T], mask: &[bool], p: usize, delta: T) -> Option<f64> {
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return None;
    }
    let mut acc = 0.0;
    for (t, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for k in t * p..(t + 1) * p {
            acc += huber(target[k], pred[k], delta).f64();
        }
    }
    Some(acc / (n * p) as f64)
}

/// Components of the training objective for one batch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean over heads with at least one valid target.
    pub forecast: f64,
    /// Balance loss averaged over mixture layers, before scaling by alpha.
    pub aux: f64,
    pub per_head: Vec<Option<f64>>,
    /// Selection fractions per mixture layer.
    pub f: Vec<Vec<f64>>,
}

impl LossBreakdown {
    /// Smallest and largest selection fraction over all layers and experts.
    pub fn f_range(&self) -> (f64, f64) {
        let all = self.f.iter().flatten().copied();
        let lo = all.clone().fold(f64::INFINITY, f64::min);
        let hi = all.fold(f64::NEG_INFINITY, f64::max);
        if lo.is_finite() {
            (lo, hi)
        } else {
            (0.0, 0.0)
        }
    }
}

/// Objective from already computed predictions: the mean over heads of the
/// masked Huber loss plus `alpha` times the mean balance loss over layers.
/// `preds[j]` and `targets[j]` are `[T×p_j]` row-major.
pub fn total_loss<T: Real>(
    preds: &[Tensor<T>],
    targets: &[Vec<T>],
    masks: &[Vec<bool>],
    routing: &[RouterOutput<T>],
    alpha: f64,
    delta: f64,
) -> Result<LossBreakdown> {
    if preds.len() != targets.len() || preds.len() != masks.len() {
        return Err(Error::shape("one target and mask per head required"));
    }
    let mut per_head = Vec::with_capacity(preds.len());
    for ((p, t), m) in preds.iter().zip(targets).zip(masks) {
        let width = p.shape().last().copied().unwrap_or(1);
        if p.len() != t.len() || m.len() * width != p.len() {
            return Err(Error::shape("prediction, target and mask sizes disagree"));
        }
        per_head.push(masked_huber_mean(p.data(), t, m, width, T::of(delta)));
    }
    let used: Vec<f64> = per_head.iter().flatten().copied().collect();
    if used.is_empty() {
        return Err(Error::DegenerateBatch("no head has a valid target".into()));
    }
    let forecast = used.iter().sum::<f64>() / used.len() as f64;
    let aux = if routing.is_empty() {
        0.0
    } else {
        routing.iter().map(|r| aux_loss(&r.f, &r.r)).sum::<f64>() / routing.len() as f64
    };
    Ok(LossBreakdown {
        total: forecast + alpha * aux,
        forecast,
        aux,
        per_head,
        f: routing.iter().map(|r| r.f.clone()).collect(),
    })
}

/// Records the objective on top of a forward pass. `targets[j]` is
/// `[T×p_j]`, `masks[j]` has one flag per token, `valid` marks non-pad
/// tokens. Selection fractions enter as constants, so the balance term only
/// passes gradient through the router scores.
pub fn objective_graph<T: Real>(
    g: &mut Graph<'_, T>,
    out: &ForwardOutput<T>,
    targets: &[Vec<T>],
    masks: &[Vec<bool>],
    valid: &[bool],
    alpha: f64,
    delta: f64,
) -> Result<(NodeId, LossBreakdown)> {
    let mut terms = Vec::new();
    let mut per_head = Vec::with_capacity(out.heads.len());
    let counts: Vec<usize> = masks.iter().map(|m| m.iter().filter(|&&x| x).count()).collect();
    let used = counts.iter().filter(|&&c| c > 0).count();
    if used == 0 {
        return Err(Error::DegenerateBatch("no head has a valid target".into()));
    }
    for (j, &node) in out.heads.iter().enumerate() {
        let p = *g.shape(node).last().unwrap_or(&1);
        if counts[j] == 0 {
            per_head.push(None);
            continue;
        }
        let scale = T::of(1.0 / (counts[j] * p * used) as f64);
        let weight: Vec<T> = masks[j]
            .iter()
            .flat_map(|&m| std::iter::repeat_n(if m { scale } else { T::zero() }, p))
            .collect();
        let term = g.huber(node, &targets[j], weight, T::of(delta))?;
        per_head.push(Some(g.value(term)[0].f64() * used as f64));
        terms.push(term);
    }
    let forecast_node = g.add_n(&terms)?;
    let forecast = g.value(forecast_node)[0].f64();

    let n_valid = valid.iter().filter(|&&v| v).count().max(1) as f64;
    let layers = out.routing.len();
    let mut aux = 0.0;
    for lr in &out.routing {
        aux += aux_loss(&lr.output.f, &lr.output.r);
        if alpha > 0.0 {
            let n = lr.output.num_experts();
            let c = alpha / layers as f64 * n as f64 / n_valid;
            let w: Vec<T> = valid
                .iter()
                .flat_map(|&v| lr.output.f.iter().map(move |&fi| if v { T::of(c * fi) } else { T::zero() }))
                .collect();
            terms.push(g.weighted_sum(lr.scores, w)?);
        }
    }
    if layers > 0 {
        aux /= layers as f64;
    }
    let total = g.add_n(&terms)?;
    let breakdown = LossBreakdown {
        total: g.value(total)[0].f64(),
        forecast,
        aux,
        per_head,
        f: out.routing.iter().map(|r| r.output.f.clone()).collect(),
    };
    Ok((total, breakdown))
}

/// Forward pass plus objective over a packed batch; all rows are laid end to
/// end as one token stream with per-sequence attention windows.
pub fn batch_objective<'a, T: Real>(
    model: &'a Model<T>,
    g: &mut Graph<'a, T>,
    batch: &PackedBatch,
    alpha: f64,
    delta: f64,
) -> Result<(NodeId, LossBreakdown, ForwardOutput<T>)> {
    if batch.horizons != model.config().head_horizons {
        return Err(Error::Usage(format!(
            "batch targets horizons {:?}, model has {:?}",
            batch.horizons,
            model.config().head_horizons
        )));
    }
    let values: Vec<T> = batch.tokens.data().iter().map(|&v| T::of(f64::from(v))).collect();
    let layout = SeqLayout::from_ids(&batch.flat_ids())?;
    let valid = batch.valid();
    let out = model.forward_graph(g, &values, &layout, Some(&valid))?;
    let targets: Vec<Vec<T>> = (0..batch.horizons.len())
        .map(|j| batch.targets(j).into_iter().map(|v| T::of(f64::from(v))).collect())
        .collect();
    let (loss, parts) = objective_graph(g, &out, &targets, &batch.loss_masks, &valid, alpha, delta)?;
    Ok((loss, parts, out))
}
