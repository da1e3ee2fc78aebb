//! Dense row-major tensors.
//!
//! `Tensor` is a plain value: shape plus data. Gradients are tracked by the
//! recording tape in [`crate::tape`], not by the tensor itself, so tensors
//! stay immutable after construction.

use crate::scalar::Scalar;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, data has {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("dimension mismatch in {op}: {detail}")]
    DimMismatch { op: &'static str, detail: String },
    #[error("masked_softmax row {row} has every position masked; the distribution is undefined")]
    FullyMaskedRow { row: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense n-dimensional array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Tensor<T>> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor<T> {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::ZERO; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Tensor<T> {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Tensor<T> {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Identity matrix of side `n`.
    pub fn eye(n: usize) -> Tensor<T> {
        let mut data = vec![T::ZERO; n * n];
        for i in 0..n {
            data[i * n + i] = T::ONE;
        }
        Tensor {
            shape: vec![n, n],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as `[rows, cols]`; the last extent is the
    /// column width and everything before it is flattened into rows.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    /// Trailing extent, or 1 for a scalar.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<T>) {
        (self.shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Converts the element type, rounding through f64.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn from_rng(shape: Vec<usize>, mut gen: impl FnMut() -> f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(|_| T::from_f64(gen())).collect(),
        }
    }
}

/// Largest absolute elementwise difference between two same-shape tensors.
pub fn max_abs_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_abs_diff on mismatched shapes");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.to_f64() - y.to_f64()).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_agreement_enforced() {
        let err = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeDataMismatch { .. }));
        let ok = Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(ok.rows(), 2);
        assert_eq!(ok.cols(), 3);
    }

    #[test]
    fn scalar_has_rank_zero() {
        let s = Tensor::<f32>::scalar(2.5);
        assert!(s.shape().is_empty());
        assert_eq!(s.len(), 1);
        assert_eq!(s.rows(), 1);
        assert_eq!(s.cols(), 1);
    }

    #[test]
    fn eye_is_identity() {
        let i = Tensor::<f64>::eye(3);
        assert_eq!(i.data()[0], 1.0);
        assert_eq!(i.data()[4], 1.0);
        assert_eq!(i.data()[1], 0.0);
    }
}
