//! Dense 64-bit tensors and a reverse-mode differentiation tape.
//!
//! Everything is stored row-major. A [`Tensor4`] with dims `(h, w, s, d)` is laid
//! out temporal-major: frame `k` outermost, then row `i`, then column `j`, then the
//! feature channel. Viewing it as a [`Matrix`] therefore gives one row per grid
//! position in canonical flattening order `k*h*w + i*w + j`.

mod gradcheck;
mod kernels;
mod tape;

pub use gradcheck::finite_diff_check;
pub use kernels::{cross_entropy_logits, gelu, gelu_grad, layer_norm, log_softmax, softmax_last};
pub use tape::{Gradients, Tape, Var};

use std::fmt;

use crate::error::{Error, Result};

/// Grid extents `(h, w, s)`: height, width and temporal length.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims3 {
    pub h: usize,
    pub w: usize,
    pub s: usize,
}

impl Dims3 {
    pub const fn new(h: usize, w: usize, s: usize) -> Self {
        Dims3 { h, w, s }
    }

    pub fn len(&self) -> usize {
        self.h * self.w * self.s
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Canonical flat index of `(i, j, k)`.
    #[inline]
    pub fn flat(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.h + i) * self.w + j
    }

    /// Inverse of [`Dims3::flat`].
    #[inline]
    pub fn unflat(&self, t: usize) -> (usize, usize, usize) {
        let j = t % self.w;
        let i = (t / self.w) % self.h;
        let k = t / (self.w * self.h);
        (i, j, k)
    }

    pub fn contains(&self, i: usize, j: usize, k: usize) -> bool {
        i < self.h && j < self.w && k < self.s
    }

    pub(crate) fn check_nonzero(&self, what: &str) -> Result<()> {
        if self.h == 0 || self.w == 0 || self.s == 0 {
            return Err(Error::contract(format!("{what} dims must be >= 1, got {self}")));
        }
        Ok(())
    }
}

impl fmt::Display for Dims3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.h, self.w, self.s)
    }
}

/// Row-major 2-D array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{rows}x{cols}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("row of {cols}"),
                    format!("row of {}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub(crate) fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    /// Standard matrix product `self * rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::shape("matmul", self.shape_str(), rhs.shape_str()));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            let a_row = self.row(r);
            let o_row = &mut out.data[r * rhs.cols..(r + 1) * rhs.cols];
            for (kk, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &rhs.data[kk * rhs.cols..(kk + 1) * rhs.cols];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub(crate) fn add_assign(&mut self, rhs: &Matrix) {
        debug_assert_eq!(self.shape(), rhs.shape());
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, rhs: &Matrix) -> f64 {
        assert_eq!(self.shape(), rhs.shape(), "max_abs_diff shape");
        self.data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Dense rank-4 array `(h, w, s, d)` in canonical temporal-major layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    dims: Dims3,
    d: usize,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(dims: Dims3, d: usize) -> Result<Self> {
        dims.check_nonzero("Tensor4")?;
        if d == 0 {
            return Err(Error::contract("Tensor4 feature width must be >= 1"));
        }
        Ok(Tensor4 {
            dims,
            d,
            data: vec![0.0; dims.len() * d],
        })
    }

    pub fn from_vec(dims: Dims3, d: usize, data: Vec<f64>) -> Result<Self> {
        dims.check_nonzero("Tensor4")?;
        if d == 0 {
            return Err(Error::contract("Tensor4 feature width must be >= 1"));
        }
        if data.len() != dims.len() * d {
            return Err(Error::shape(
                "Tensor4::from_vec",
                format!("{dims}x{d}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Tensor4 { dims, d, data })
    }

    /// Reinterpret a matrix with one row per grid position.
    pub fn from_matrix(dims: Dims3, m: Matrix) -> Result<Self> {
        if m.rows() != dims.len() {
            return Err(Error::shape(
                "Tensor4::from_matrix",
                format!("{dims}"),
                m.shape_str(),
            ));
        }
        let d = m.cols();
        Tensor4::from_vec(dims, d, m.into_data())
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn width(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Feature vector at grid position `(i, j, k)`.
    pub fn at(&self, i: usize, j: usize, k: usize) -> &[f64] {
        let t = self.dims.flat(i, j, k);
        &self.data[t * self.d..(t + 1) * self.d]
    }

    pub fn at_mut(&mut self, i: usize, j: usize, k: usize) -> &mut [f64] {
        let t = self.dims.flat(i, j, k);
        &mut self.data[t * self.d..(t + 1) * self.d]
    }

    /// Rows = positions in canonical order, columns = features.
    pub fn to_matrix(&self) -> Matrix {
        Matrix {
            rows: self.dims.len(),
            cols: self.d,
            data: self.data.clone(),
        }
    }

    pub fn into_matrix(self) -> Matrix {
        Matrix {
            rows: self.dims.len(),
            cols: self.d,
            data: self.data,
        }
    }

    pub fn max_abs_diff(&self, rhs: &Tensor4) -> f64 {
        assert_eq!((self.dims, self.d), (rhs.dims, rhs.d), "max_abs_diff dims");
        self.data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
