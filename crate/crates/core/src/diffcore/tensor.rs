use std::fmt;

use super::TapeError;

/// Shape of a tape value: rank 0 (scalar), 1 (vector) or 2 (matrix).
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    dims: [usize; 2],
    rank: u8,
}

impl Shape {
    pub const fn scalar() -> Self {
        Shape { dims: [0, 0], rank: 0 }
    }

    pub const fn vector(n: usize) -> Self {
        Shape { dims: [n, 0], rank: 1 }
    }

    pub const fn matrix(rows: usize, cols: usize) -> Self {
        Shape { dims: [rows, cols], rank: 2 }
    }

    pub fn rank(&self) -> usize {
        self.rank as usize
    }

    pub fn numel(&self) -> usize {
        match self.rank {
            0 => 1,
            1 => self.dims[0],
            _ => self.dims[0] * self.dims[1],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.rank as usize]
    }

    /// Rows of a matrix, or length of a vector.
    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    pub fn cols(&self) -> usize {
        self.dims[1]
    }

    pub fn is_scalar(&self) -> bool {
        self.rank == 0
    }

    pub fn from_dims(dims: &[usize]) -> Result<Self, TapeError> {
        match dims {
            [] => Ok(Shape::scalar()),
            [n] => Ok(Shape::vector(*n)),
            [m, n] => Ok(Shape::matrix(*m, *n)),
            _ => Err(TapeError::UnsupportedRank { rank: dims.len() }),
        }
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.rank {
            0 => write!(f, "[]"),
            1 => write!(f, "[{}]", self.dims[0]),
            _ => write!(f, "[{}x{}]", self.dims[0], self.dims[1]),
        }
    }
}

/// Dense 64-bit float tensor. All tape values are flat `f64` arrays with an
/// attached shape; entries are expected to stay finite (see [`Tensor::is_finite`]).
#[derive(Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, TapeError> {
        let s = Shape::from_dims(&shape)?;
        if s.numel() != values.len() {
            return Err(TapeError::BadTensor {
                expected: s.numel(),
                got: values.len(),
            });
        }
        Ok(Tensor { shape, values })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], values: vec![v] }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor { shape: vec![values.len()], values }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, TapeError> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self, TapeError> {
        let s = Shape::from_dims(shape)?;
        Ok(Tensor { shape: shape.to_vec(), values: vec![0.0; s.numel()] })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn tape_shape(&self) -> Shape {
        Shape::from_dims(&self.shape).expect("tensor shape validated at construction")
    }

    /// True when every entry is a normal/subnormal number (no NaN or infinity).
    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.values)
    }
}
