//! Small dense linear algebra used for the K x K local systems.
//!
//! Everything here is row-major and sized for neighborhoods of a few dozen
//! points, plus the occasional full N x N factorization when sampling an
//! exact prior.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
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

    /// Builds from row-major data. Panics if the length does not match.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "row-major buffer has wrong length");
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(r, k)];
                if a == T::zero() {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        (0..self.rows).map(|r| dot(self.row(r), v)).collect()
    }

    /// In-place lower Cholesky factorization of a symmetric positive definite
    /// matrix. Only the lower triangle is read; the strict upper triangle is
    /// zeroed. On failure returns the index of the first non-positive pivot.
    pub fn cholesky_in_place(&mut self) -> Result<(), usize> {
        assert_eq!(self.rows, self.cols, "cholesky needs a square matrix");
        let n = self.rows;
        for j in 0..n {
            let mut d = self[(j, j)];
            for k in 0..j {
                let l = self[(j, k)];
                d -= l * l;
            }
            if !(d > T::zero()) || !d.is_finite() {
                return Err(j);
            }
            let d = d.sqrt();
            self[(j, j)] = d;
            for i in (j + 1)..n {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s -= self[(i, k)] * self[(j, k)];
                }
                self[(i, j)] = s / d;
            }
            for c in (j + 1)..n {
                self[(j, c)] = T::zero();
            }
        }
        Ok(())
    }

    pub fn cholesky(&self) -> Result<Self, usize> {
        let mut m = self.clone();
        m.cholesky_in_place()?;
        Ok(m)
    }

    /// Solves `L x = b` for lower-triangular `self`.
    pub fn solve_lower(&self, b: &[T]) -> Vec<T> {
        let n = self.rows;
        let mut x = b.to_vec();
        for i in 0..n {
            let mut s = x[i];
            for k in 0..i {
                s -= self[(i, k)] * x[k];
            }
            x[i] = s / self[(i, i)];
        }
        x
    }

    /// Solves `L^T x = b` for lower-triangular `self`.
    pub fn solve_lower_transpose(&self, b: &[T]) -> Vec<T> {
        let n = self.rows;
        let mut x = b.to_vec();
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self[(k, i)] * x[k];
            }
            x[i] = s / self[(i, i)];
        }
        x
    }

    /// Solves `(L L^T) x = b` given the Cholesky factor `self`.
    pub fn cholesky_solve(&self, b: &[T]) -> Vec<T> {
        self.solve_lower_transpose(&self.solve_lower(b))
    }

    /// `log det(L L^T)` from a Cholesky factor.
    pub fn cholesky_log_det(&self) -> T {
        let two = T::of(2.0);
        (0..self.rows).map(|i| two * self[(i, i)].ln()).sum()
    }
}

impl<T> std::ops::Index<(usize, usize)> for DenseMatrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &T {
        &self.data[r * self.cols + c]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for DenseMatrix<T> {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_two_by_two() {
        let m = DenseMatrix::from_row_major(2, 2, vec![4.0_f64, 2.0, 2.0, 5.0]);
        let l = m.cholesky().unwrap();
        assert_eq!(l[(0, 0)], 2.0);
        assert_eq!(l[(1, 0)], 1.0);
        assert_eq!(l[(1, 1)], 2.0);
        assert_eq!(l[(0, 1)], 0.0);
        let x = l.cholesky_solve(&[6.0, 9.0]);
        assert!((x[0] - 0.75).abs() < 1e-14 && (x[1] - 1.5).abs() < 1e-14);
        assert!((l.cholesky_log_det() - 16f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn cholesky_reports_failing_pivot() {
        let m = DenseMatrix::from_row_major(2, 2, vec![1.0_f64, 1.0, 1.0, 1.0]);
        assert_eq!(m.cholesky(), Err(1));
    }

    #[test]
    fn matmul_against_hand_product() {
        let a = DenseMatrix::from_row_major(2, 3, vec![1.0_f64, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = a.transpose();
        let c = a.matmul(&b);
        assert_eq!(c.as_slice(), &[14.0, 32.0, 32.0, 77.0]);
    }
}
