//! Dense row-major tensors holding `f64` values.
//!
//! Shapes are kept as plain extent lists; in practice everything in this
//! crate is a vector (`[n]`), a matrix (`[rows, cols]`), or a scalar (`[]`).

use crate::error::{RaemepcError, Result};

/// A dense tensor: a shape plus row-major data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(RaemepcError::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `rows x cols` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from a slice of equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(RaemepcError::Shape(format!(
                    "ragged rows: expected {} columns, got {}",
                    cols,
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    /// Value of a scalar or single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        match self.shape.as_slice() {
            [r, _] => *r,
            _ => panic!("rows() on non-matrix shape {:?}", self.shape),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.as_slice() {
            [_, c] => *c,
            _ => panic!("cols() on non-matrix shape {:?}", self.shape),
        }
    }

    /// Row `i` of a matrix as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// True when every value is finite (no NaN or infinity).
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns a copy with rows in reverse order (matrices only).
    pub fn reverse_rows(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut data = Vec::with_capacity(self.data.len());
        for i in (0..r).rev() {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![r, c],
            data,
        }
    }
}
