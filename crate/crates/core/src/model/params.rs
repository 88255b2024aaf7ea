use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::numerics::{Graph, NodeId, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Decides whether weight decay applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight)
    }
}

/// Flat, named parameter registry. Layers refer to entries by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Params<T> {
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for Params<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            kinds: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Real> Params<T> {
    pub fn push(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.kinds.push(kind);
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut()
    }

    /// Registers every parameter as a leaf; the returned vector maps
    /// `ParamId` to `NodeId`.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> Vec<NodeId> {
        self.tensors.iter().map(|t| g.leaf(t)).collect()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }
}

/// Normal samples truncated to two standard deviations.
pub(crate) fn truncated_normal<T: Real, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break T::of(z * std);
            }
        })
        .collect();
    Tensor::new(data, shape).expect("shape matches sample count")
}
