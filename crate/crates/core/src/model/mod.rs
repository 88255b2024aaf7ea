//! Decoder-only backbone: point-wise SwiGLU embedding, pre-norm blocks with
//! rotary causal attention and a mixture (or dense) feed-forward, a final
//! RMSNorm and one linear head per forecast horizon.

pub mod config;
mod count;
pub mod layers;
pub mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{validate_horizons, ModelConfig, DEFAULT_HORIZONS};
pub use count::{count_params, flops_per_token, ParamCount};
pub use layers::{embed_points, rmsnorm, rope_apply, HiddenState, SeqLayout, RMS_EPS};
pub use params::{ParamId, ParamKind, Params};

use crate::error::{Error, Result};
use crate::heads::HeadParams;
use crate::moe::{self, ExpertParams, MixtureNodes, RouterOutput, SwiGlu, SwiGluNodes};
use crate::numerics::{Graph, NodeId, Real, Tensor};
use params::truncated_normal;

#[derive(Clone, Copy, Debug)]
pub struct SwiGluIds {
    pub gate: ParamId,
    pub up: ParamId,
    pub down: ParamId,
}

#[derive(Clone, Debug)]
pub enum FfnIds {
    Dense(SwiGluIds),
    Moe {
        router: ParamId,
        experts: Vec<SwiGluIds>,
        shared: SwiGluIds,
    },
}

#[derive(Clone, Debug)]
pub struct BlockIds {
    pub attn_norm: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub ffn_norm: ParamId,
    pub ffn: FfnIds,
}

/// Routing recorded for one mixture layer during a forward pass.
pub struct LayerRouting<T> {
    pub output: RouterOutput<T>,
    /// Softmax scores node, `[T×N]`; the balance loss differentiates through
    /// it.
    pub scores: NodeId,
}

pub struct ForwardOutput<T> {
    /// One `[T×p_j]` node per configured horizon.
    pub heads: Vec<NodeId>,
    /// Final-block hidden state before the output norm, `[T×D]`.
    pub hidden: NodeId,
    /// Empty for the dense variant.
    pub routing: Vec<LayerRouting<T>>,
    /// Token-expert evaluations across all mixture layers (shared included).
    pub expert_evaluations: usize,
    /// Leaf node of every parameter, indexed like `ParamId`.
    pub params: Vec<NodeId>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    config: ModelConfig,
    params: Params<T>,
    embed_w: ParamId,
    embed_v: ParamId,
    blocks: Vec<BlockIds>,
    final_norm: ParamId,
    heads: Vec<ParamId>,
}

fn add_swiglu<T: Real>(
    params: &mut Params<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d: usize,
    hidden: usize,
    std: f64,
) -> SwiGluIds {
    let w = SwiGlu::<T>::random(rng, d, hidden, std);
    SwiGluIds {
        gate: params.push(format!("{prefix}.gate"), ParamKind::Weight, w.gate),
        up: params.push(format!("{prefix}.up"), ParamKind::Weight, w.up),
        down: params.push(format!("{prefix}.down"), ParamKind::Weight, w.down),
    }
}

impl<T: Real> Model<T> {
    /// Builds a freshly initialised model: truncated-normal projections,
    /// unit norm gains, zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let std = config.init_std;
        let mut params = Params::default();
        let embed_w = params.push("embed.w", ParamKind::Weight, truncated_normal(&mut rng, &[d, 1], config.embed_init_std));
        let embed_v = params.push("embed.v", ParamKind::Weight, truncated_normal(&mut rng, &[d, 1], config.embed_init_std));
        let mut blocks = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let p = format!("layers.{l}");
            let mut proj = |params: &mut Params<T>, name: &str| {
                let w = params.push(format!("{p}.attn.{name}.weight"), ParamKind::Weight, truncated_normal(&mut rng, &[d, d], std));
                let b = params.push(format!("{p}.attn.{name}.bias"), ParamKind::Bias, Tensor::zeros(&[d]));
                (w, b)
            };
            let attn_norm = params.push(format!("{p}.attn_norm"), ParamKind::Norm, Tensor::full(&[d], T::one()));
            let (wq, bq) = proj(&mut params, "q");
            let (wk, bk) = proj(&mut params, "k");
            let (wv, bv) = proj(&mut params, "v");
            let wo = params.push(format!("{p}.attn.o.weight"), ParamKind::Weight, truncated_normal(&mut rng, &[d, d], std));
            let ffn_norm = params.push(format!("{p}.ffn_norm"), ParamKind::Norm, Tensor::full(&[d], T::one()));
            let ffn = if config.use_moe {
                let router = params.push(
                    format!("{p}.moe.router"),
                    ParamKind::Weight,
                    truncated_normal(&mut rng, &[config.num_experts + 1, d], std),
                );
                let experts = (0..config.num_experts)
                    .map(|i| add_swiglu(&mut params, &mut rng, &format!("{p}.moe.experts.{i}"), d, config.d_expert, std))
                    .collect();
                let shared = add_swiglu(&mut params, &mut rng, &format!("{p}.moe.shared"), d, config.d_expert, std);
                FfnIds::Moe { router, experts, shared }
            } else {
                FfnIds::Dense(add_swiglu(&mut params, &mut rng, &format!("{p}.ffn"), d, config.d_ff, std))
            };
            blocks.push(BlockIds {
                attn_norm,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                ffn_norm,
                ffn,
            });
        }
        let final_norm = params.push("final_norm", ParamKind::Norm, Tensor::full(&[d], T::one()));
        let heads = config
            .head_horizons
            .iter()
            .map(|&h| params.push(format!("heads.{h}"), ParamKind::Weight, truncated_normal(&mut rng, &[h, d], std)))
            .collect();
        Ok(Self {
            config,
            params,
            embed_w,
            embed_v,
            blocks,
            final_norm,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    pub fn block_ids(&self, layer: usize) -> &BlockIds {
        &self.blocks[layer]
    }

    pub fn embed_ids(&self) -> (ParamId, ParamId) {
        (self.embed_w, self.embed_v)
    }

    pub fn head_ids(&self) -> &[ParamId] {
        &self.heads
    }

    pub fn final_norm_id(&self) -> ParamId {
        self.final_norm
    }

    pub fn head_params(&self) -> HeadParams<T> {
        HeadParams {
            horizons: self.config.head_horizons.clone(),
            weights: self.heads.iter().map(|&id| self.params.get(id).clone()).collect(),
        }
    }

    /// Owned copy of a mixture layer's weights; `None` for dense layers.
    pub fn layer_experts(&self, layer: usize) -> Option<ExpertParams<T>> {
        let copy = |ids: &SwiGluIds| SwiGlu {
            gate: self.params.get(ids.gate).clone(),
            up: self.params.get(ids.up).clone(),
            down: self.params.get(ids.down).clone(),
        };
        match &self.blocks[layer].ffn {
            FfnIds::Dense(_) => None,
            FfnIds::Moe { router, experts, shared } => Some(ExpertParams {
                router: self.params.get(*router).clone(),
                experts: experts.iter().map(copy).collect(),
                shared: copy(shared),
            }),
        }
    }

    /// Records a full forward pass on `g`. `values` holds one scalar per
    /// token; `valid` marks the tokens that count towards routing
    /// statistics (padding excluded).
    pub fn forward_graph<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        values: &[T],
        layout: &SeqLayout,
        valid: Option<&[bool]>,
    ) -> Result<ForwardOutput<T>> {
        let t = values.len();
        if t == 0 {
            return Err(Error::Usage("forward on an empty sequence".into()));
        }
        if layout.len() != t || valid.is_some_and(|v| v.len() != t) {
            return Err(Error::shape(format!("layout of {} tokens for {t} values", layout.len())));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite input value at token {i}")));
        }
        if layout.max_run() > self.config.max_context {
            return Err(Error::Usage(format!(
                "sequence of {} tokens exceeds max_context {}",
                layout.max_run(),
                self.config.max_context
            )));
        }
        let p = self.params.bind(g);
        let x = g.input(Tensor::new(values.to_vec(), &[t, 1])?);
        let mut h = layers::embed_graph(g, x, p[self.embed_w.0], p[self.embed_v.0])?;
        let mut routing = Vec::new();
        let mut expert_evaluations = 0;
        for blk in &self.blocks {
            let out = self.block_graph(g, &p, blk, h, layout, valid)?;
            h = out.0;
            if let Some((r, evals)) = out.1 {
                routing.push(r);
                expert_evaluations += evals;
            }
        }
        let hn = g.rmsnorm(h, p[self.final_norm.0], T::of(RMS_EPS))?;
        let heads = self
            .heads
            .iter()
            .map(|id| g.linear(hn, p[id.0]))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardOutput {
            heads,
            hidden: h,
            routing,
            expert_evaluations,
            params: p,
        })
    }

    fn attention_graph(&self, g: &mut Graph<'_, T>, p: &[NodeId], blk: &BlockIds, x: NodeId, layout: &SeqLayout) -> Result<NodeId> {
        let heads = self.config.num_heads;
        let proj = |g: &mut Graph<'_, T>, w: ParamId, b: ParamId| -> Result<NodeId> {
            let y = g.linear(x, p[w.0])?;
            g.add_trailing(y, p[b.0])
        };
        let q = proj(g, blk.wq, blk.bq)?;
        let k = proj(g, blk.wk, blk.bk)?;
        let v = proj(g, blk.wv, blk.bv)?;
        let q = g.rope(q, heads, layout.positions(), self.config.rope_base)?;
        let k = g.rope(k, heads, layout.positions(), self.config.rope_base)?;
        let a = g.attention(q, k, v, heads, layout.starts())?;
        g.linear(a, p[blk.wo.0])
    }

    #[allow(clippy::type_complexity)]
    fn block_graph(
        &self,
        g: &mut Graph<'_, T>,
        p: &[NodeId],
        blk: &BlockIds,
        h: NodeId,
        layout: &SeqLayout,
        valid: Option<&[bool]>,
    ) -> Result<(NodeId, Option<(LayerRouting<T>, usize)>)> {
        let eps = T::of(RMS_EPS);
        let hn = g.rmsnorm(h, p[blk.attn_norm.0], eps)?;
        let sa = self.attention_graph(g, p, blk, hn, layout)?;
        let u = g.add(sa, h)?;
        let ubar = g.rmsnorm(u, p[blk.ffn_norm.0], eps)?;
        let node = |ids: &SwiGluIds| SwiGluNodes {
            gate: p[ids.gate.0],
            up: p[ids.up.0],
            down: p[ids.down.0],
        };
        match &blk.ffn {
            FfnIds::Dense(ids) => {
                let y = moe::swiglu(g, ubar, &node(ids))?;
                Ok((g.add(y, u)?, None))
            }
            FfnIds::Moe { router, experts, shared } => {
                let nodes = MixtureNodes {
                    router: p[router.0],
                    experts: experts.iter().map(node).collect(),
                    shared: node(shared),
                };
                let routed = moe::route_in_graph(g, ubar, nodes.router, self.config.top_k, valid)?;
                let (y, evals) = moe::mixture_in_graph(g, ubar, &nodes, &routed)?;
                let out = g.add(y, u)?;
                let lr = LayerRouting {
                    output: routed.output,
                    scores: routed.scores,
                };
                Ok((out, Some((lr, evals))))
            }
        }
    }

    /// Per-head forecasts at every position of a single sequence:
    /// the j-th tensor is `[T×p_j]`.
    pub fn head_predictions(&self, values: &[T]) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let layout = SeqLayout::single(values.len());
        let out = self.forward_graph(&mut g, values, &layout, None)?;
        Ok(out.heads.iter().map(|&h| g.tensor(h)).collect())
    }

    /// Per-head forecasts made from the last position of `context`.
    pub fn predict_last(&self, context: &[T]) -> Result<Vec<Vec<T>>> {
        let t = context.len();
        Ok(self
            .head_predictions(context)?
            .into_iter()
            .map(|h| h.row(t - 1).to_vec())
            .collect())
    }

    /// Multi-head causal self-attention of one layer (pre-norm input,
    /// projections, rotary positions, output projection); `seq_ids` isolates
    /// packed sequences.
    pub fn causal_self_attention(&self, layer: usize, x: &Tensor<T>, seq_ids: &[u64]) -> Result<Tensor<T>> {
        let layout = SeqLayout::from_ids(seq_ids)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let xn = g.input(x.clone());
        let y = self.attention_graph(&mut g, &p, &self.blocks[layer], xn, &layout)?;
        Ok(g.tensor(y))
    }

    /// One transformer block: `u = SA(norm(h)) + h`, `out = FFN(norm(u)) + u`.
    pub fn block_forward(&self, h: &HiddenState<T>) -> Result<HiddenState<T>> {
        if h.layer_index >= self.config.num_layers {
            return Err(Error::Usage(format!("layer {} of {}", h.layer_index, self.config.num_layers)));
        }
        let layout = SeqLayout::from_ids(&h.seq_ids)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = g.input(h.values.clone());
        let (y, _) = self.block_graph(&mut g, &p, &self.blocks[h.layer_index], x, &layout, None)?;
        Ok(HiddenState {
            values: g.tensor(y),
            layer_index: h.layer_index + 1,
            seq_ids: h.seq_ids.clone(),
        })
    }

    /// Replaces parameters from `(name, tensor)` pairs; every model
    /// parameter must be supplied exactly once with a matching shape.
    pub fn load_named(&mut self, named: Vec<(String, Tensor<T>)>) -> Result<()> {
        let mut seen = vec![false; self.params.len()];
        for (name, t) in named {
            let id = self
                .params
                .find(&name)
                .ok_or_else(|| Error::Compatibility(format!("unknown parameter {name}")))?;
            if self.params.get(id).shape() != t.shape() {
                return Err(Error::Compatibility(format!(
                    "parameter {name}: shape {:?} vs expected {:?}",
                    t.shape(),
                    self.params.get(id).shape()
                )));
            }
            *self.params.get_mut(id) = t.with_grad();
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Compatibility(format!(
                "missing parameter {}",
                self.params.name(ParamId(i))
            )));
        }
        Ok(())
    }

    /// Same model in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut m = Model::<U>::new(self.config.clone(), 0).expect("config already validated");
        let named = self.params.iter().map(|(n, t)| (n.to_string(), t.cast::<U>())).collect();
        m.load_named(named).expect("identical layout");
        m
    }
}

#[cfg(test)]
mod tests;
