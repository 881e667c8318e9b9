//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The submodules provide exactly the primitives the two-branch architecture
//! needs: a contiguous n-d value type, a recording tape with hand-derived
//! backward rules, deterministic parallel matmul/conv kernels, a parameter
//! store with freeze support, and a finite-difference gradient checker.

pub mod conv;
pub mod gemm;
pub mod gradcheck;
pub mod params;
pub mod scalar;
pub mod tape;

pub use params::{ParamId, ParamStore, Parameter};
pub use scalar::{Dtype, Scalar};
pub use tape::{Tape, ValueId};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::fmt;

pub type TensorResult<T> = Result<T, TensorError>;

/// Errors from tensor construction and tape operations.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Operands have incompatible shapes; names both sides.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Data buffer length does not match the product of extents.
    DataLength { expected: usize, got: usize },
    /// Invalid hyperparameter or structural configuration.
    Config(String),
    /// Non-finite value where a finite one is required.
    Numeric(String),
    /// Out-of-range index (e.g. class target beyond the logit width).
    Index { index: usize, bound: usize },
    /// API misuse, e.g. backward from a value that is not a scalar on this tape.
    Usage(String),
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            TensorError::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape product {expected}")
            }
            TensorError::Config(msg) => write!(f, "configuration error: {msg}"),
            TensorError::Numeric(msg) => write!(f, "numeric error: {msg}"),
            TensorError::Index { index, bound } => {
                write!(f, "index {index} out of range (bound {bound})")
            }
            TensorError::Usage(msg) => write!(f, "usage error: {msg}"),
        }
    }
}

impl std::error::Error for TensorError {}

/// Contiguous row-major n-dimensional array.
///
/// `grad` is populated only for leaves that request it; intermediate values
/// live on the tape and keep their gradients there.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    pub requires_grad: bool,
    pub grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> TensorResult<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(TensorError::Config(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        if data.len() != expected {
            return Err(TensorError::DataLength {
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![S::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_f64_slice(shape: Vec<usize>, values: &[f64]) -> TensorResult<Self> {
        Tensor::new(shape, values.iter().map(|&v| S::from_f64(v)).collect())
    }

    /// Uniform sample in `[lo, hi)`, drawn in f64 then narrowed, so the
    /// stream of draws is identical across precisions.
    pub fn rand_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| S::from_f64(rng.gen_range(lo..hi)))
            .collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        if self.grad.is_none() {
            self.grad = Some(vec![S::zero(); self.data.len()]);
        }
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = S::zero());
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> TensorResult<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::DataLength {
                expected,
                got: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Rows × last-axis view: product of leading extents and the last extent.
    pub fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().expect("tensor has at least one axis");
        (self.data.len() / cols, cols)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn new_validates_length() {
        let err = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert_eq!(
            err,
            TensorError::DataLength {
                expected: 6,
                got: 5
            }
        );
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(matches!(
            Tensor::<f32>::new(vec![2, 0], vec![]),
            Err(TensorError::Config(_))
        ));
    }

    #[test]
    fn grad_matches_shape() {
        let t = Tensor::<f32>::zeros(vec![2, 2]).with_grad();
        assert_eq!(t.grad.as_ref().unwrap().len(), t.numel());
    }

    #[test]
    fn rand_uniform_same_draws_across_precisions() {
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f32>::rand_uniform(&mut r1, vec![8], -1.0, 1.0);
        let b = Tensor::<f64>::rand_uniform(&mut r2, vec![8], -1.0, 1.0);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, *y as f32);
        }
    }
}
