//! Dense f64 tensor with row-major flat storage.
//!
//! Tensors are plain values: cloning copies the data, and reading from
//! multiple threads is safe. Gradient participation is opt-in through
//! `requires_grad`; the `grad` buffer is populated by `Tape::backward`.

use rand_chacha::ChaCha8Rng;

use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![v; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(vec![1], vec![v])
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = rng::normal_vec(rng, numel).into_iter().map(|x| x * std).collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Zero the gradient buffer if present.
    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}
