//! Dense row-major f32 tensor.

use crate::error::{Error, Result};

/// Dense tensor with row-major layout and f32 storage.
///
/// The data length always equals the product of the dims. Ranks 1 to 4 are
/// used throughout: vectors, matrices, and NCHW activation blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "dims {:?} imply {} elements, got {}",
                dims,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let numel = dims.iter().product();
        Tensor { dims, data: vec![0.0; numel] }
    }

    pub fn full(dims: Vec<usize>, value: f32) -> Self {
        let numel = dims.iter().product();
        Tensor { dims, data: vec![value; numel] }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { dims: vec![1], data: vec![value] }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return Err(Error::Shape(format!("item() on tensor with dims {:?}", self.dims)));
        }
        Ok(self.data[0])
    }

    /// Same data under new dims; element count must match.
    pub fn reshape(&self, dims: Vec<usize>) -> Result<Self> {
        Tensor::new(dims, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Interprets dims as (N, C, H, W).
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.dims {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::Shape(format!("expected rank 4, got dims {:?}", self.dims))),
        }
    }

    /// Interprets dims as (rows, cols).
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match *self.dims {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape(format!("expected rank 2, got dims {:?}", self.dims))),
        }
    }
}
