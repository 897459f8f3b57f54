//! Dense row-major tensors (rank 1..=3) and trainable parameters.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Contiguous row-major tensor of f64 values, rank 1 to 3. Activations use
/// the layout batch x seq x feature; parameters are matrices (out x in) or
/// vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "element count must match shape"
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Gaussian-initialized tensor with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
        let normal = Normal::new(0.0, std).expect("std must be finite and positive");
        let len = shape.iter().product();
        let data = (0..len).map(|_| normal.sample(rng)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn elem_count(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    /// Last-dimension width; the feature count for activations.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has no dimensions")
    }

    /// Number of feature rows when the tensor is viewed as (rows, last_dim).
    pub fn n_rows(&self) -> usize {
        if self.shape.is_empty() {
            0
        } else {
            self.data.len() / self.last_dim()
        }
    }

    /// Feature row `r` of the flattened (rows, last_dim) view.
    pub fn row(&self, r: usize) -> &[f64] {
        let w = self.last_dim();
        &self.data[r * w..(r + 1) * w]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let w = self.last_dim();
        &mut self.data[r * w..(r + 1) * w]
    }

    /// Flat row index of position (b, s) for a rank-3 activation.
    pub fn flat_row(&self, b: usize, s: usize) -> usize {
        debug_assert_eq!(self.rank(), 3);
        b * self.shape[1] + s
    }

    /// Feature vector at (b, s) of a rank-3 activation.
    pub fn at(&self, b: usize, s: usize) -> &[f64] {
        self.row(self.flat_row(b, s))
    }

    pub fn at_mut(&mut self, b: usize, s: usize) -> &mut [f64] {
        let r = self.flat_row(b, s);
        self.row_mut(r)
    }

    /// Elementwise addition of a same-shape tensor.
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A named trainable tensor with its gradient accumulator.
///
/// `frozen` parameters receive no gradient and are skipped by the
/// optimizer; `decay` marks tensors subject to weight decay (matrices yes,
/// biases and normalization gains no).
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub frozen: bool,
    pub decay: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor, decay: bool) -> Param {
        let grad = Tensor::zeros(value.shape());
        Param {
            name: name.into(),
            value,
            grad,
            frozen: false,
            decay,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}
