use crate::error::{Error, Result};

use super::kernels;
use super::real::Real;

/// Dense row-major n-dimensional array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        if data.len() != numel(shape) {
            return Err(Error::shape(format!(
                "data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension in {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(data.iter().map(|&x| T::of(x)).collect(), shape)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Row `i` of a tensor viewed as `[rows, last_dim]`.
    pub fn row(&self, i: usize) -> &[T] {
        let n = *self.shape.last().unwrap();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.f64()).collect()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|x| U::of(x.f64())).collect()),
        }
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = as_matrix(&self.shape)?;
        let (k2, n) = as_matrix(&other.shape)?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(&self.data, &other.data, &mut out, m, k, n);
        checked(out, &[m, n], "matmul")
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "add shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        checked(data, &self.shape, "add")
    }

    pub fn softmax_lastdim(&self) -> Result<Tensor<T>> {
        let n = *self.shape.last().unwrap();
        if self.data.iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let mut out = self.data.clone();
        for row in out.chunks_mut(n) {
            kernels::softmax_in_place(row);
        }
        checked(out, &self.shape, "softmax")
    }

    pub fn sigmoid(&self) -> Result<Tensor<T>> {
        let data = self.data.iter().map(|&x| kernels::sigmoid(x)).collect();
        checked(data, &self.shape, "sigmoid")
    }

    pub fn silu(&self) -> Result<Tensor<T>> {
        let data = self.data.iter().map(|&x| x * kernels::sigmoid(x)).collect();
        checked(data, &self.shape, "silu")
    }
}

pub(crate) fn as_matrix(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [m, n] => Ok((*m, *n)),
        _ => Err(Error::shape(format!("expected a matrix, got shape {shape:?}"))),
    }
}

pub(crate) fn checked<T: Real>(data: Vec<T>, shape: &[usize], op: &str) -> Result<Tensor<T>> {
    if let Some(i) = data.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("{op} produced a non-finite value at {i}")));
    }
    Ok(Tensor {
        shape: shape.to_vec(),
        data,
        requires_grad: false,
        grad: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    fn pseudo_random(n: usize, seed: u64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn identity_matmul() {
        let a = Tensor::<f32>::from_f64(&pseudo_random(9, 1), &[3, 3]).unwrap();
        assert_eq!(Tensor::eye(3).matmul(&a).unwrap().data(), a.data());
    }

    #[test]
    fn zero_annihilates() {
        let a = Tensor::<f32>::from_f64(&pseudo_random(9, 2), &[3, 3]).unwrap();
        let z = Tensor::zeros(&[3, 3]);
        assert!(a.matmul(&z).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = pseudo_random(20, 3);
        let b = pseudo_random(15, 4);
        let expected = naive_matmul(&a, &b, 4, 5, 3);
        let ta = Tensor::<f32>::from_f64(&a, &[4, 5]).unwrap();
        let tb = Tensor::<f32>::from_f64(&b, &[5, 3]).unwrap();
        let got = ta.matmul(&tb).unwrap();
        assert_eq!(got.shape(), &[4, 3]);
        for (g, e) in got.data().iter().zip(&expected) {
            assert!((*g as f64 - e).abs() < 1e-6, "{g} vs {e}");
        }
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_identity_and_distributivity() {
        let a = Tensor::<f32>::from_f64(&pseudo_random(64, 5), &[8, 8]).unwrap();
        let b = Tensor::<f32>::from_f64(&pseudo_random(64, 6), &[8, 8]).unwrap();
        let c = Tensor::<f32>::from_f64(&pseudo_random(64, 7), &[8, 8]).unwrap();
        let i = Tensor::eye(8);
        let ai = a.matmul(&i).unwrap();
        let ia = i.matmul(&a).unwrap();
        for ((x, y), z) in ai.data().iter().zip(ia.data()).zip(a.data()) {
            assert!((x - z).abs() < 1e-5 && (y - z).abs() < 1e-5);
        }
        let lhs = a.matmul(&b.add(&c).unwrap()).unwrap();
        let rhs = a.matmul(&b).unwrap().add(&a.matmul(&c).unwrap()).unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_examples() {
        let t = Tensor::<f32>::zeros(&[4]).softmax_lastdim().unwrap();
        assert!(t.data().iter().all(|&x| (x - 0.25).abs() < 1e-7));

        let t = Tensor::<f32>::from_f64(&[1000.0, 0.0], &[2]).unwrap();
        let s = t.softmax_lastdim().unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-7 && s.data()[1] < 1e-30);

        // high-precision reference evaluated directly in f64
        let xs = [2.0f64, 1.0, 0.0, -1.0];
        let z: f64 = xs.iter().map(|x| x.exp()).sum();
        let t = Tensor::<f64>::from_f64(&xs, &[4]).unwrap().softmax_lastdim().unwrap();
        for (got, x) in t.data().iter().zip(xs) {
            assert!((got - x.exp() / z).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let t = Tensor::<f32>::from_f64(&[0.0, f64::NAN], &[2]).unwrap();
        assert!(matches!(t.softmax_lastdim(), Err(Error::Numeric(_))));
    }

    #[test]
    fn sigmoid_and_silu() {
        let t = Tensor::<f64>::from_f64(&[0.0, 50.0, 1.0], &[3]).unwrap();
        let s = t.sigmoid().unwrap();
        assert_eq!(s.data()[0], 0.5);
        assert!((s.data()[1] - 1.0).abs() < 1e-12);
        let u = t.silu().unwrap();
        assert_eq!(u.data()[0], 0.0);
        let oracle = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((u.data()[2] - oracle).abs() < 1e-7);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(vec![0.0; 5], &[2, 3]).is_err());
        assert!(Tensor::<f32>::new(vec![], &[0]).is_err());
    }
}
