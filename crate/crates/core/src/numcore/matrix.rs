use std::ops::{Index, IndexMut};

use rayon::prelude::*;

use super::Real;
use crate::error::{Error, Result};

/// Work (multiply-adds) above which products are split across row blocks.
const PAR_THRESHOLD: usize = 1 << 18;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_diag(diag: &[T]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                op: "Matrix::from_vec",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: "Matrix::from_vec",
                index,
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Same as [`Matrix::from_vec`] without the finiteness scan; used for intermediates.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::LengthMismatch {
                    op: "Matrix::from_rows",
                    expected: cols,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn row_vector(values: &[T]) -> Self {
        Self::from_raw(1, values.len(), values.to_vec())
    }

    pub fn scalar(value: T) -> Self {
        Self::from_raw(1, 1, vec![value])
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

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                out.push(self.data[r * self.cols + c]);
            }
        }
        Self::from_raw(self.cols, self.rows, out)
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self::from_raw(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    /// First `k` columns as a new matrix.
    pub fn take_cols(&self, k: usize) -> Self {
        Self::from_fn(self.rows, k, |r, c| self[(r, c)])
    }

    /// Matrix product. Each output cell accumulates its terms in increasing inner index.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(self.matmul_unchecked(other))
    }

    pub(crate) fn matmul_unchecked(&self, other: &Self) -> Self {
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![T::zero(); m * n];
        if n == 0 {
            return Self::from_raw(m, n, out);
        }
        let row_kernel = |(i, out_row): (usize, &mut [T])| {
            let a_row = &self.data[i * k..(i + 1) * k];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        };
        if m * k * n >= PAR_THRESHOLD && m > 1 {
            out.par_chunks_mut(n).enumerate().for_each(row_kernel);
        } else {
            out.chunks_mut(n).enumerate().for_each(row_kernel);
        }
        Self::from_raw(m, n, out)
    }

    /// `self * other^T` without materializing the transpose.
    pub(crate) fn matmul_nt(&self, other: &Self) -> Self {
        debug_assert_eq!(self.cols, other.cols);
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = vec![T::zero(); m * n];
        if n == 0 {
            return Self::from_raw(m, n, out);
        }
        let row_kernel = |(i, out_row): (usize, &mut [T])| {
            let a_row = &self.data[i * k..(i + 1) * k];
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = &other.data[j * k..(j + 1) * k];
                let mut acc = T::zero();
                for (&a, &b) in a_row.iter().zip(b_row) {
                    acc = acc + a * b;
                }
                *o = acc;
            }
        };
        if m * k * n >= PAR_THRESHOLD && m > 1 {
            out.par_chunks_mut(n).enumerate().for_each(row_kernel);
        } else {
            out.chunks_mut(n).enumerate().for_each(row_kernel);
        }
        Self::from_raw(m, n, out)
    }

    /// `self^T * other` without materializing the transpose.
    pub(crate) fn matmul_tn(&self, other: &Self) -> Self {
        debug_assert_eq!(self.rows, other.rows);
        let (k, m, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![T::zero(); m * n];
        if n == 0 {
            return Self::from_raw(m, n, out);
        }
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let out_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        }
        Self::from_raw(m, n, out)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_raw(self.rows, self.cols, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(self.zip_map_unchecked(other, f))
    }

    pub(crate) fn zip_map_unchecked(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        Self::from_raw(
            self.rows,
            self.cols,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }

    pub fn frobenius_norm(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &x| acc + x * x)
            .sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &x| if x.abs() > acc { x.abs() } else { acc })
    }

    /// Column sums as a `1 x cols` matrix.
    pub fn column_sums(&self) -> Self {
        let mut out = vec![T::zero(); self.cols];
        for r in 0..self.rows {
            for (o, &x) in out.iter_mut().zip(self.row(r)) {
                *o = *o + x;
            }
        }
        Self::from_raw(1, self.cols, out)
    }

    /// Multiplies column `c` by `scales[c]`.
    pub fn scale_columns(&self, scales: &[T]) -> Self {
        let mut out = self.clone();
        for r in 0..self.rows {
            for (x, &s) in out.row_mut(r).iter_mut().zip(scales) {
                *x = *x * s;
            }
        }
        out
    }

    /// `max |A^T A - I|` over all entries: deviation of the columns from orthonormality.
    pub fn orthonormality_error(&self) -> T {
        let gram = self.matmul_tn(self);
        let mut worst = T::zero();
        for i in 0..gram.rows {
            for j in 0..gram.cols {
                let target = if i == j { T::one() } else { T::zero() };
                worst = worst.max((gram[(i, j)] - target).abs());
            }
        }
        worst
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    fn index(&self, (r, c): (usize, usize)) -> &T {
        &self.data[r * self.cols + c]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        &mut self.data[r * self.cols + c]
    }
}

/// Free-function form of [`Matrix::matmul`].
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    a.matmul(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_times_a_is_a() {
        let a = Matrix::from_fn(3, 4, |r, c| (r * 4 + c) as f64 - 5.5);
        assert_eq!(matmul(&Matrix::identity(3), &a).unwrap(), a);
    }

    #[test]
    fn times_zero_is_zero() {
        let a = Matrix::from_fn(3, 3, |r, c| (r + 2 * c) as f64);
        let z = Matrix::<f64>::zeros(3, 2);
        assert_eq!(matmul(&a, &z).unwrap(), Matrix::zeros(3, 2));
    }

    #[test]
    fn small_product() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.as_slice(), &[17.0, 39.0]);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = Matrix::<f64>::zeros(2, 3);
        let b = Matrix::<f64>::zeros(2, 3);
        assert!(matches!(
            matmul(&a, &b),
            Err(Error::DimensionMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn repeated_products_are_bit_identical() {
        let a = Matrix::from_fn(300, 200, |r, c| ((r * 31 + c * 17) % 97) as f64 / 7.3 - 6.0);
        let b = Matrix::from_fn(200, 150, |r, c| ((r * 13 + c * 7) % 89) as f64 / 3.1 - 14.0);
        let first = matmul(&a, &b).unwrap();
        for _ in 0..3 {
            assert_eq!(matmul(&a, &b).unwrap().as_slice(), first.as_slice());
        }
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = Matrix::from_fn(5, 4, |r, c| (r as f64 - c as f64 * 0.5).sin());
        let b = Matrix::from_fn(6, 4, |r, c| (r as f64 * 0.3 + c as f64).cos());
        let nt = a.matmul_nt(&b);
        let explicit = a.matmul(&b.transpose()).unwrap();
        assert!(nt.sub(&explicit).unwrap().max_abs() < 1e-14);
        let c = Matrix::from_fn(5, 3, |r, c| (r * c) as f64 * 0.1);
        let tn = a.matmul_tn(&c);
        let explicit = a.transpose().matmul(&c).unwrap();
        assert!(tn.sub(&explicit).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        let err = Matrix::from_vec(1, 3, vec![1.0, f64::NAN, 2.0]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }));
    }
}
