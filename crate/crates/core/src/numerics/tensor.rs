use std::fmt;

use super::NumericsError;

/// Dense row-major array of `f64`.
///
/// Rank 0 and rank 1 tensors are viewed as `1 x n` matrices wherever a
/// matrix view is needed (see [`Tensor::dims2`]).
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) || expected != data.len() {
            return Err(NumericsError::ShapeMismatch {
                expected: shape,
                found: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "tensor must hold at least one value");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Builds a `rows x cols` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        Self::new(vec![rows, cols], data)
    }

    /// Stacks equally sized vectors as the rows of a matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(NumericsError::ShapeMismatch {
                    expected: vec![cols],
                    found: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Matrix view `(rows, cols)`.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => {
                let cols = *self.shape.last().unwrap();
                (self.data.len() / cols, cols)
            }
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, NumericsError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(NumericsError::ShapeMismatch {
                expected: shape,
                found: self.shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        let (_, cols) = self.dims2();
        self.data[row * cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let (_, cols) = self.dims2();
        &self.data[row * cols..(row + 1) * cols]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self, NumericsError> {
        self.expect_same_len(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self, NumericsError> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, NumericsError> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn dot(&self, other: &Self) -> Result<f64, NumericsError> {
        self.expect_same_len(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = self.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data: out,
        }
    }

    /// Matrix product over the [`dims2`](Self::dims2) views.
    pub fn matmul(&self, other: &Self) -> Result<Self, NumericsError> {
        let (m, k) = self.dims2();
        let (k2, n) = other.dims2();
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                expected: vec![k, n],
                found: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    fn expect_same_len(&self, other: &Self) -> Result<(), NumericsError> {
        if self.data.len() != other.data.len() {
            return Err(NumericsError::ShapeMismatch {
                expected: self.shape.clone(),
                found: other.shape.clone(),
            });
        }
        Ok(())
    }
}

/// `out += a (m x k) * b (k x n)`, accumulating each output row in a fixed order.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "[{} values]", self.data.len())
        }
    }
}
