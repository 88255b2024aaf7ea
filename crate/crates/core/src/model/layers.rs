use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Real, Tensor};

pub const RMS_EPS: f64 = 1e-6;

/// Token layout of a (possibly packed) sequence: where each token's visible
/// window starts and its position within its own sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    starts: Vec<usize>,
    positions: Vec<usize>,
}

impl SeqLayout {
    pub fn single(len: usize) -> Self {
        Self {
            starts: vec![0; len],
            positions: (0..len).collect(),
        }
    }

    /// Each id must occupy one contiguous run of tokens; tokens attend only
    /// within their run and positions restart at every run.
    pub fn from_ids(ids: &[u64]) -> Result<Self> {
        let mut starts = Vec::with_capacity(ids.len());
        let mut positions = Vec::with_capacity(ids.len());
        let mut seen = std::collections::HashSet::new();
        let mut run_start = 0;
        for (t, &id) in ids.iter().enumerate() {
            if t == 0 || ids[t - 1] != id {
                if !seen.insert(id) {
                    return Err(Error::Usage(format!(
                        "sequence id {id} appears in two separate runs (token {t})"
                    )));
                }
                run_start = t;
            }
            starts.push(run_start);
            positions.push(t - run_start);
        }
        Ok(Self { starts, positions })
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Length of the longest run.
    pub fn max_run(&self) -> usize {
        self.positions.iter().map(|p| p + 1).max().unwrap_or(0)
    }
}

/// Hidden state flowing between blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState<T> {
    /// `[T×D]`
    pub values: Tensor<T>,
    pub layer_index: usize,
    pub seq_ids: Vec<u64>,
}

/// `silu(W x) ⊙ (V x)` for `x[T×1]`, `W`, `V` of shape `[D×1]`.
pub(crate) fn embed_graph<T: Real>(g: &mut Graph<'_, T>, x: NodeId, w: NodeId, v: NodeId) -> Result<NodeId> {
    let a = g.linear(x, w)?;
    let a = g.silu(a)?;
    let b = g.linear(x, v)?;
    g.mul(a, b)
}

/// Point-wise SwiGLU embedding of `x[T×1]` into `[T×D]`.
pub fn embed_points<T: Real>(x: &Tensor<T>, w: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    if !x.is_finite() {
        return Err(Error::Data("non-finite observation in embedding input".into()));
    }
    let mut g = Graph::new();
    let (xn, wn, vn) = (g.input(x.clone()), g.leaf(w), g.leaf(v));
    let y = embed_graph(&mut g, xn, wn, vn)?;
    Ok(g.tensor(y))
}

pub fn rmsnorm<T: Real>(x: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (xn, wn) = (g.input(x.clone()), g.leaf(weight));
    let y = g.rmsnorm(xn, wn, T::of(RMS_EPS))?;
    Ok(g.tensor(y))
}

/// Rotary embedding of `x[T×heads×d_head]` at the given token positions.
pub fn rope_apply<T: Real>(x: &Tensor<T>, positions: &[usize], base: f64) -> Result<Tensor<T>> {
    let [t, heads, d_head] = x.shape() else {
        return Err(Error::shape(format!("rope expects [T, heads, d_head], got {:?}", x.shape())));
    };
    let (t, heads, d_head) = (*t, *heads, *d_head);
    let flat = x.clone().reshape(&[t, heads * d_head])?;
    let mut g = Graph::new();
    let xn = g.input(flat);
    let y = g.rope(xn, heads, positions, base)?;
    g.tensor(y).reshape(&[t, heads, d_head])
}
