//! Dense N-D tensors in NCHW layout.
//!
//! Storage is always `f64`; `Precision::Single` rounds every stored scalar
//! through `f32` so that single-precision runs are reproducible while the
//! same code path can run in full double precision for gradient checks.
//! Tensors are immutable after creation and cheap to clone (shared storage).

use std::sync::Arc;

use crate::error::{Error, Result};

/// Compute precision for a tensor or graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    /// Values rounded through `f32` after every operation.
    Single,
    /// Full `f64` arithmetic, used for finite-difference verification.
    Double,
}

impl Precision {
    /// Round a scalar to this precision.
    #[inline]
    pub fn quantize(self, v: f64) -> f64 {
        match self {
            Precision::Single => v as f32 as f64,
            Precision::Double => v,
        }
    }
}

/// Dense tensor with shape metadata. The carrier for images, feature maps,
/// parameters and gradients. Images and feature maps use (N, C, H, W) order.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    precision: Precision,
}

impl Tensor {
    /// Build a tensor from raw data, quantizing to the requested precision.
    pub fn new(shape: Vec<usize>, mut data: Vec<f64>, precision: Precision) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor::new",
                format!("shape {:?} implies {} scalars, got {}", shape, n, data.len()),
            ));
        }
        if precision == Precision::Single {
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            precision,
        })
    }

    /// Build without the length check; callers guarantee `data.len() == product(shape)`.
    pub(crate) fn from_parts(shape: Vec<usize>, mut data: Vec<f64>, precision: Precision) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if precision == Precision::Single {
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        Tensor {
            shape,
            data: Arc::new(data),
            precision,
        }
    }

    pub fn zeros(shape: &[usize], precision: Precision) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; n]),
            precision,
        }
    }

    pub fn ones(shape: &[usize], precision: Precision) -> Self {
        Tensor::full(shape, 1.0, precision)
    }

    pub fn full(shape: &[usize], value: f64, precision: Precision) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![precision.quantize(value); n]),
            precision,
        }
    }

    /// Scalar (0-d is represented as shape `[1]`).
    pub fn scalar(value: f64, precision: Precision) -> Self {
        Tensor::full(&[1], value, precision)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Re-quantize into another precision mode.
    pub fn to_precision(&self, precision: Precision) -> Tensor {
        if precision == self.precision && precision == Precision::Double {
            return self.clone();
        }
        Tensor::from_parts(self.shape.clone(), self.data.to_vec(), precision)
    }

    /// True when every stored scalar is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// NCHW accessor helpers. Valid only for rank-4 tensors.
    #[inline]
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        let (_, cc, hh, ww) = self.dims4();
        self.data[((n * cc + c) * hh + h) * ww + w]
    }

    /// (N, C, H, W) extents of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "dims4 on rank-{} tensor", self.shape.len());
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    /// Global mean over all scalars.
    pub fn mean_all(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Global population standard deviation over all scalars.
    pub fn std_all(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let m = self.mean_all();
        let var = self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64;
        var.sqrt()
    }

    /// Maximum absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && *self.data == *other.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5], Precision::Double);
        assert!(err.is_err());
    }

    #[test]
    fn single_precision_rounds_through_f32() {
        let v = 0.1f64 + 1e-12;
        let t = Tensor::new(vec![1], vec![v], Precision::Single).unwrap();
        assert_eq!(t.data()[0], v as f32 as f64);
        let d = Tensor::new(vec![1], vec![v], Precision::Double).unwrap();
        assert_eq!(d.data()[0], v);
    }

    #[test]
    fn global_stats() {
        let t = Tensor::new(vec![4], vec![0.0, 2.0, 0.0, 2.0], Precision::Double).unwrap();
        assert_eq!(t.mean_all(), 1.0);
        assert_eq!(t.std_all(), 1.0);
    }
}
