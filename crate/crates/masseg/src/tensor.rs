//! Dense N-dimensional tensor used as the carrier for all network math.
//!
//! Layout is row-major with axis order (batch, channel, [depth,] height,
//! width). Rank is 4 in 2-D mode and 5 in 3-D mode; lower-level kernels
//! normalize both to an internal 5-D view with depth 1.

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{MassegError, Result};

/// Element trait for tensor math. Training runs in `f32`; the gradient
/// checks re-run every kernel in `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_real(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 conversion")
    }
    fn to_real(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(MassegError::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(MassegError::ShapeMismatch(format!(
                "all extents must be >= 1, got {:?}",
                shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Batch extent (axis 0).
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Channel extent (axis 1).
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    /// Spatial extents as (depth, height, width); depth is 1 for rank-4
    /// tensors.
    pub fn spatial(&self) -> (usize, usize, usize) {
        match self.shape.len() {
            4 => (1, self.shape[2], self.shape[3]),
            5 => (self.shape[2], self.shape[3], self.shape[4]),
            r => panic!("spatial() on rank-{r} tensor"),
        }
    }

    /// Number of voxels per (batch, channel) plane.
    pub fn spatial_len(&self) -> usize {
        let (d, h, w) = self.spatial();
        d * h * w
    }

    /// Rebuild a 5-D spatial shape into this tensor's rank convention.
    pub fn shape_like(&self, batch: usize, channels: usize, d: usize, h: usize, w: usize) -> Vec<usize> {
        if self.rank() == 4 {
            debug_assert_eq!(d, 1);
            vec![batch, channels, h, w]
        } else {
            vec![batch, channels, d, h, w]
        }
    }

    pub fn map<F: Fn(T) -> T>(&self, f: F) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, a: T) -> Tensor<T> {
        self.map(|x| x * a)
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape != other.shape {
            return Err(MassegError::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        })
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |a, &b| a + b)
    }

    /// Inner product, accumulated in f64.
    pub fn dot(&self, other: &Tensor<T>) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a.to_real() * b.to_real())
            .sum()
    }

    /// Element-wise cast between precisions.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_real(x.to_real())).collect(),
        }
    }
}

/// Validates the rank convention shared by all kernels.
pub fn check_rank<T: Scalar>(t: &Tensor<T>, ctx: &str) -> Result<()> {
    match t.rank() {
        4 | 5 => Ok(()),
        r => Err(MassegError::ShapeMismatch(format!(
            "{ctx}: expected rank 4 (2-D) or 5 (3-D), got rank {r}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_length_mismatch() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn from_vec_rejects_zero_extent() {
        assert!(Tensor::<f32>::from_vec(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn spatial_normalizes_rank4() {
        let t = Tensor::<f32>::zeros(&[1, 2, 5, 7]);
        assert_eq!(t.spatial(), (1, 5, 7));
        let t = Tensor::<f32>::zeros(&[1, 2, 3, 5, 7]);
        assert_eq!(t.spatial(), (3, 5, 7));
    }
}
