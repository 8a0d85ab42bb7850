use rand::RngCore;

use super::Real;
use crate::error::{Error, Result};
use crate::rng;

/// Dense row-major matrix. Vectors are `1 x n`, scalars `1 x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape { op: "tensor", left: vec![rows, cols], right: vec![data.len()] });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn scalar(v: T) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Self::new(rows, cols, data.iter().map(|&v| T::c(v)).collect())
    }

    /// I.i.d. normal entries with standard deviation `std`.
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut impl RngCore) -> Self {
        let data = (0..rows * cols).map(|_| T::c(std * rng::normal_f64(rng))).collect();
        Self { rows, cols, data }
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| U::c(v.f())).collect() }
    }
}
