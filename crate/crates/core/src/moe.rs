//! Sparse mixture layer: softmax top-K routing over `N` routed experts plus a
//! sigmoid-gated shared expert that sees every token.
//!
//! Gates keep the selected softmax scores as they are (no renormalisation
//! after the top-K cut), ties go to the lower expert index, and there is no
//! capacity limit: every token is processed by all of its selected experts.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::params::truncated_normal;
use crate::numerics::{Graph, NodeId, Real, Tensor};

/// Routing decision for a batch of `T` tokens over `N` experts.
#[derive(Clone, Debug)]
pub struct RouterOutput<T> {
    /// Row-stochastic softmax scores, `[T×N]`.
    pub scores: Tensor<T>,
    /// Scores kept on the top-K entries of each row, zero elsewhere.
    pub gates: Tensor<T>,
    /// Selected experts per token, highest score first.
    pub selected: Vec<Vec<usize>>,
    /// Shared-expert gate per token, in (0, 1).
    pub shared_gate: Vec<T>,
    /// Fraction of token selections landing on each expert.
    pub f: Vec<f64>,
    /// Mean routing probability of each expert.
    pub r: Vec<f64>,
}

impl<T: Real> RouterOutput<T> {
    pub fn num_experts(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn top_k(&self) -> usize {
        self.selected.first().map_or(0, Vec::len)
    }

    /// Token indices routed to expert `i`, in token order.
    pub fn tokens_for(&self, expert: usize) -> Vec<usize> {
        self.selected
            .iter()
            .enumerate()
            .filter(|(_, sel)| sel.contains(&expert))
            .map(|(t, _)| t)
            .collect()
    }
}

/// Indices of the `k` largest entries, highest first; ties keep the lower
/// index.
pub fn top_k_indices<T: Real>(row: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Selection fractions `f` and mean scores `r` over the tokens marked valid
/// (all tokens when `valid` is `None`).
pub fn load_stats<T: Real>(
    scores: &[T],
    selected: &[Vec<usize>],
    num_experts: usize,
    top_k: usize,
    valid: Option<&[bool]>,
) -> (Vec<f64>, Vec<f64>) {
    let mut f = vec![0.0; num_experts];
    let mut r = vec![0.0; num_experts];
    let mut count = 0usize;
    for (t, sel) in selected.iter().enumerate() {
        if valid.is_some_and(|v| !v[t]) {
            continue;
        }
        count += 1;
        for &i in sel {
            f[i] += 1.0;
        }
        for (ri, s) in r.iter_mut().zip(&scores[t * num_experts..(t + 1) * num_experts]) {
            *ri += s.f64();
        }
    }
    if count > 0 {
        let kt = (top_k * count) as f64;
        f.iter_mut().for_each(|x| *x /= kt);
        r.iter_mut().for_each(|x| *x /= count as f64);
    }
    (f, r)
}

/// Graph handles of one gated SwiGLU feed-forward block.
#[derive(Clone, Copy, Debug)]
pub(crate) struct SwiGluNodes {
    pub gate: NodeId,
    pub up: NodeId,
    pub down: NodeId,
}

/// `down(silu(gate·x) ⊙ up·x)`
pub(crate) fn swiglu<T: Real>(g: &mut Graph<'_, T>, x: NodeId, p: &SwiGluNodes) -> Result<NodeId> {
    let a = g.linear(x, p.gate)?;
    let a = g.silu(a)?;
    let b = g.linear(x, p.up)?;
    let h = g.mul(a, b)?;
    g.linear(h, p.down)
}

pub(crate) struct MixtureNodes {
    /// `[(N+1)×D]`; the last row drives the shared-expert gate.
    pub router: NodeId,
    pub experts: Vec<SwiGluNodes>,
    pub shared: SwiGluNodes,
}

/// Routing recorded on a tape: the host-side decision plus the nodes the
/// mixture and the balance loss differentiate through.
pub(crate) struct RoutedNodes<T> {
    pub output: RouterOutput<T>,
    pub scores: NodeId,
    pub shared_gate: NodeId,
}

pub(crate) fn route_in_graph<T: Real>(
    g: &mut Graph<'_, T>,
    ubar: NodeId,
    router: NodeId,
    top_k: usize,
    valid: Option<&[bool]>,
) -> Result<RoutedNodes<T>> {
    let logits = g.linear(ubar, router)?;
    let n = g.shape(logits)[1] - 1;
    if top_k == 0 || top_k > n {
        return Err(Error::Config(format!("top_k {top_k} outside 1..={n}")));
    }
    let routed = g.slice_cols(logits, 0, n)?;
    let scores = g.softmax_lastdim(routed)?;
    let shared_logit = g.slice_cols(logits, n, n + 1)?;
    let shared_gate = g.sigmoid(shared_logit)?;

    let sv = g.value(scores);
    let t = sv.len() / n;
    let mut gates = vec![T::zero(); sv.len()];
    let mut selected = Vec::with_capacity(t);
    for (row, grow) in sv.chunks(n).zip(gates.chunks_mut(n)) {
        let sel = top_k_indices(row, top_k);
        for &i in &sel {
            grow[i] = row[i];
        }
        selected.push(sel);
    }
    let (f, r) = load_stats(sv, &selected, n, top_k, valid);
    let output = RouterOutput {
        scores: g.tensor(scores),
        gates: Tensor::new(gates, &[t, n])?,
        selected,
        shared_gate: g.value(shared_gate).to_vec(),
        f,
        r,
    };
    Ok(RoutedNodes {
        output,
        scores,
        shared_gate,
    })
}

/// Applies the mixture. Unselected experts are never evaluated. Returns the
/// output node and the number of token-expert evaluations performed.
pub(crate) fn mixture_in_graph<T: Real>(
    g: &mut Graph<'_, T>,
    ubar: NodeId,
    nodes: &MixtureNodes,
    routed: &RoutedNodes<T>,
) -> Result<(NodeId, usize)> {
    let t = g.shape(ubar)[0];
    let n = nodes.experts.len();
    let shared = swiglu(g, ubar, &nodes.shared)?;
    let mut parts = vec![g.scale_rows(shared, routed.shared_gate)?];
    let mut evaluations = t;
    for (i, expert) in nodes.experts.iter().enumerate() {
        let idx = routed.output.tokens_for(i);
        if idx.is_empty() {
            continue;
        }
        evaluations += idx.len();
        let x = g.gather_rows(ubar, &idx)?;
        let y = swiglu(g, x, expert)?;
        let flat: Vec<usize> = idx.iter().map(|&tok| tok * n + i).collect();
        let gate = g.gather(routed.scores, &flat)?;
        let y = g.scale_rows(y, gate)?;
        parts.push(g.scatter_rows(y, &idx, t)?);
    }
    Ok((g.add_n(&parts)?, evaluations))
}

/// Owned weights of a gated SwiGLU block: `gate`, `up` are `[hidden×D]`,
/// `down` is `[D×hidden]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SwiGlu<T> {
    pub gate: Tensor<T>,
    pub up: Tensor<T>,
    pub down: Tensor<T>,
}

impl<T: Real> SwiGlu<T> {
    pub fn random<R: Rng>(rng: &mut R, d_model: usize, hidden: usize, std: f64) -> Self {
        Self {
            gate: truncated_normal(rng, &[hidden, d_model], std),
            up: truncated_normal(rng, &[hidden, d_model], std),
            down: truncated_normal(rng, &[d_model, hidden], std),
        }
    }

    pub fn hidden(&self) -> usize {
        self.gate.shape()[0]
    }

    fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> SwiGluNodes {
        SwiGluNodes {
            gate: g.leaf(&self.gate),
            up: g.leaf(&self.up),
            down: g.leaf(&self.down),
        }
    }

    /// Applies the block to every row of `x[T×D]`.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let nodes = self.bind(&mut g);
        let xn = g.input(x.clone());
        let y = swiglu(&mut g, xn, &nodes)?;
        Ok(g.tensor(y))
    }
}

/// Weights of one mixture layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertParams<T> {
    /// `[(N+1)×D]`: rows `0..N` score the routed experts, row `N` gates the
    /// shared expert.
    pub router: Tensor<T>,
    pub experts: Vec<SwiGlu<T>>,
    pub shared: SwiGlu<T>,
}

impl<T: Real> ExpertParams<T> {
    pub fn random<R: Rng>(rng: &mut R, d_model: usize, d_expert: usize, num_experts: usize, std: f64) -> Self {
        let router = truncated_normal(rng, &[num_experts + 1, d_model], std);
        let experts = (0..num_experts)
            .map(|_| SwiGlu::random(rng, d_model, d_expert, std))
            .collect();
        let shared = SwiGlu::random(rng, d_model, d_expert, std);
        Self { router, experts, shared }
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> MixtureNodes {
        MixtureNodes {
            router: g.leaf(&self.router),
            experts: self.experts.iter().map(|e| e.bind(g)).collect(),
            shared: self.shared.bind(g),
        }
    }

    /// Routes every row of `ubar[T×D]`.
    pub fn route_topk(&self, ubar: &Tensor<T>, top_k: usize) -> Result<RouterOutput<T>> {
        let mut g = Graph::new();
        let router = g.leaf(&self.router);
        let x = g.input(ubar.clone());
        Ok(route_in_graph(&mut g, x, router, top_k, None)?.output)
    }

    /// Mixture output for `ubar` under a routing computed from the same
    /// input.
    pub fn forward(&self, ubar: &Tensor<T>, routing: &RouterOutput<T>) -> Result<Tensor<T>> {
        Ok(self.forward_counted(ubar, routing)?.0)
    }

    /// Like [`forward`](Self::forward), also returning how many token-expert
    /// evaluations ran.
    pub fn forward_counted(&self, ubar: &Tensor<T>, routing: &RouterOutput<T>) -> Result<(Tensor<T>, usize)> {
        let t = ubar.shape()[0];
        if routing.selected.len() != t || routing.num_experts() != self.num_experts() {
            return Err(Error::shape(format!(
                "routing covers {} tokens over {} experts, input has {t} tokens and {} experts",
                routing.selected.len(),
                routing.num_experts(),
                self.num_experts()
            )));
        }
        let mut g = Graph::new();
        let nodes = self.bind(&mut g);
        let x = g.input(ubar.clone());
        let scores = g.input(routing.scores.clone());
        let sg = Tensor::new(routing.shared_gate.clone(), &[t])?;
        let shared_gate = g.input(sg);
        let routed = RoutedNodes {
            output: routing.clone(),
            scores,
            shared_gate,
        };
        let (y, evals) = mixture_in_graph(&mut g, x, &nodes, &routed)?;
        Ok((g.tensor(y), evals))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_input(t: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..t * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::new(data, &[t, d]).unwrap()
    }

    #[test]
    fn full_selection_keeps_all_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ExpertParams::<f64>::random(&mut rng, 6, 4, 4, 0.5);
        let r = p.route_topk(&random_input(10, 6, 2), 4).unwrap();
        assert_eq!(r.gates, r.scores);
    }

    #[test]
    fn monotone_topk() {
        assert_eq!(top_k_indices(&[2.0, 1.0, 0.0, -1.0], 2), vec![0, 1]);
        let scores = Tensor::<f64>::from_f64(&[2.0, 1.0, 0.0, -1.0], &[4]).unwrap().softmax_lastdim().unwrap();
        assert_eq!(top_k_indices(scores.data(), 2), vec![0, 1]);
    }

    #[test]
    fn ties_prefer_lower_index() {
        assert_eq!(top_k_indices(&[0.5, 1.0, 1.0, 0.5], 3), vec![1, 2, 0]);
        assert_eq!(top_k_indices(&[0.25f32; 4], 2), vec![0, 1]);
    }

    #[test]
    fn routing_matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ExpertParams::<f64>::random(&mut rng, 8, 4, 6, 0.5);
        let x = random_input(64, 8, 4);
        let r = p.route_topk(&x, 2).unwrap();
        for t in 0..64 {
            // oracle: recompute logits by hand and fully sort
            let logits: Vec<f64> = (0..6)
                .map(|i| (0..8).map(|j| x.row(t)[j] * p.router.row(i)[j]).sum())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            let probs: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
            let mut order: Vec<usize> = (0..6).collect();
            order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
            let mut want = order[..2].to_vec();
            let mut got = r.selected[t].clone();
            want.sort();
            got.sort();
            assert_eq!(got, want);
            for i in 0..6 {
                let g = r.gates.row(t)[i];
                if want.contains(&i) {
                    assert!((g - probs[i]).abs() < 1e-12);
                } else {
                    assert_eq!(g, 0.0);
                }
            }
        }
    }

    #[test]
    fn load_stats_examples() {
        let uniform = vec![0.25f64; 4 * 4];
        let sel = vec![vec![0], vec![1], vec![2], vec![3]];
        let (f, r) = load_stats(&uniform, &sel, 4, 1, None);
        assert_eq!(f, vec![0.25; 4]);
        assert_eq!(r, vec![0.25; 4]);

        let collapsed = vec![vec![0]; 5];
        let scores: Vec<f64> = (0..5).flat_map(|_| [0.7, 0.1, 0.1, 0.1]).collect();
        let (f, _) = load_stats(&scores, &collapsed, 4, 1, None);
        assert_eq!(f, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn load_stats_matches_counting_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ExpertParams::<f64>::random(&mut rng, 8, 4, 5, 1.0);
        let x = random_input(40, 8, 6);
        let r = p.route_topk(&x, 3).unwrap();
        let mut counts = [0usize; 5];
        for sel in &r.selected {
            for &i in sel {
                counts[i] += 1;
            }
        }
        for i in 0..5 {
            assert_eq!(r.f[i], counts[i] as f64 / 120.0);
            let mean: f64 = (0..40).map(|t| r.scores.row(t)[i]).sum::<f64>() / 40.0;
            assert!((r.r[i] - mean).abs() < 1e-15);
        }
        assert!((r.f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((r.r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_tokens_are_excluded_from_stats() {
        let scores = vec![1.0f64, 0.0, 0.0, 1.0];
        let sel = vec![vec![0], vec![1]];
        let (f, r) = load_stats(&scores, &sel, 2, 1, Some(&[true, false]));
        assert_eq!(f, vec![1.0, 0.0]);
        assert_eq!(r, vec![1.0, 0.0]);
    }

    /// Evaluates every expert on every token and weights by the (mostly zero)
    /// gates.
    fn dense_oracle(p: &ExpertParams<f64>, x: &Tensor<f64>, r: &RouterOutput<f64>) -> Vec<f64> {
        let t = x.shape()[0];
        let d = x.shape()[1];
        let shared = p.shared.apply(x).unwrap();
        let outs: Vec<_> = p.experts.iter().map(|e| e.apply(x).unwrap()).collect();
        let mut y = vec![0.0; t * d];
        for tok in 0..t {
            for j in 0..d {
                let mut acc = r.shared_gate[tok] * shared.row(tok)[j];
                for (i, o) in outs.iter().enumerate() {
                    acc += r.gates.row(tok)[i] * o.row(tok)[j];
                }
                y[tok * d + j] = acc;
            }
        }
        y
    }

    #[test]
    fn sparse_equals_dense_sum() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let p = ExpertParams::<f64>::random(&mut rng, 8, 12, 4, 0.3);
            let x = random_input(33, 8, 200 + seed);
            let r = p.route_topk(&x, 2).unwrap();
            let (y, evals) = p.forward_counted(&x, &r).unwrap();
            assert_eq!(evals, 33 * 3);
            for (a, b) in y.data().iter().zip(dense_oracle(&p, &x, &r)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_experts_leave_shared_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = ExpertParams::<f64>::random(&mut rng, 8, 8, 4, 0.3);
        for e in &mut p.experts {
            e.down = Tensor::zeros(&[8, 8]);
        }
        let x = random_input(9, 8, 8);
        let r = p.route_topk(&x, 2).unwrap();
        let y = p.forward(&x, &r).unwrap();
        let shared = p.shared.apply(&x).unwrap();
        for t in 0..9 {
            for j in 0..8 {
                let want = r.shared_gate[t] * shared.row(t)[j];
                assert!((y.row(t)[j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_experts_make_selection_irrelevant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = ExpertParams::<f64>::random(&mut rng, 8, 8, 4, 0.3);
        let proto = p.experts[0].clone();
        for e in &mut p.experts {
            *e = proto.clone();
        }
        let x = random_input(12, 8, 12);
        let r = p.route_topk(&x, 2).unwrap();
        let y = p.forward(&x, &r).unwrap();
        let shared = p.shared.apply(&x).unwrap();
        let single = proto.apply(&x).unwrap();
        for t in 0..12 {
            let gate_mass: f64 = r.gates.row(t).iter().sum();
            for j in 0..8 {
                let want = r.shared_gate[t] * shared.row(t)[j] + gate_mass * single.row(t)[j];
                assert!((y.row(t)[j] - want).abs() < 1e-12);
            }
        }
    }
}
