use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense n-dimensional array in row-major order over `dims`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::Shape(format!("invalid dims {dims:?}")));
        }
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} imply {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let len = dims.iter().product();
        Self::new(dims, vec![T::zero(); len])
    }

    pub fn full(dims: Vec<usize>, value: T) -> Result<Self> {
        let len = dims.iter().product();
        Self::new(dims, vec![value; len])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Flat row-major offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.dims.len());
        index
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        Self::new(dims, self.data)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossless()))
                .collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let x = v.to_f64_lossless();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    /// ||self - other||_F / ||other||_F (absolute when `other` is zero).
    pub fn relative_error(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.dims, other.dims, "relative_error on mismatched dims");
        let diff: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = a.to_f64_lossless() - b.to_f64_lossless();
                d * d
            })
            .sum::<f64>()
            .sqrt();
        let norm = other.frobenius_norm();
        if norm == 0.0 {
            diff
        } else {
            diff / norm
        }
    }

    /// Bitwise equality of every element, distinguishing -0.0 from 0.0.
    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_f64_lossless().to_bits() == b.to_f64_lossless().to_bits())
    }
}
