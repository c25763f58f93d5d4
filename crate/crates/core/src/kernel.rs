//! RBF covariance function and covariance (sub)matrix assembly.

use serde::{Deserialize, Serialize};

use crate::error::{NpviError, Result};
use crate::linalg::DenseMatrix;
use crate::scalar::Scalar;

/// A set of `n` points in `R^d`, stored contiguously.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Points<T> {
    dim: usize,
    coords: Vec<T>,
}

impl<T: Scalar> Points<T> {
    pub fn new(dim: usize, coords: Vec<T>) -> Result<Self> {
        if dim == 0 {
            return Err(NpviError::input("points must have dimension >= 1"));
        }
        if coords.len() % dim != 0 {
            return Err(NpviError::input(format!(
                "coordinate buffer of length {} is not a multiple of dimension {dim}",
                coords.len()
            )));
        }
        Ok(Self { dim, coords })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != dim) {
            return Err(NpviError::input(format!(
                "point {i} has dimension {} but point 0 has {dim}",
                r.len()
            )));
        }
        Self::new(dim, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[T] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn coords(&self) -> &[T] {
        &self.coords
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[T]> + '_ {
        self.coords.chunks_exact(self.dim)
    }

    /// New point set holding the points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut coords = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            coords.extend_from_slice(self.point(i));
        }
        Self {
            dim: self.dim,
            coords,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.coords.iter().all(|c| c.is_finite())
    }
}

#[inline]
pub fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| {
        let d = x - y;
        acc + d * d
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig<T> {
    pub length_scale: T,
    pub signal_variance: T,
    /// Added to the diagonal of every covariance matrix built on one point set.
    pub jitter: T,
}

impl<T: Scalar> KernelConfig<T> {
    /// Unit signal variance and jitter `1e-6 * signal_variance`.
    pub fn new(length_scale: T) -> Result<Self> {
        Self::with_variance(length_scale, T::one())
    }

    pub fn with_variance(length_scale: T, signal_variance: T) -> Result<Self> {
        let cfg = Self {
            length_scale,
            signal_variance,
            jitter: T::of(1e-6) * signal_variance,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_jitter(mut self, jitter: T) -> Result<Self> {
        self.jitter = jitter;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length_scale > T::zero()) || !self.length_scale.is_finite() {
            return Err(NpviError::input(format!(
                "length_scale must be positive and finite, got {}",
                self.length_scale
            )));
        }
        if !(self.signal_variance > T::zero()) || !self.signal_variance.is_finite() {
            return Err(NpviError::input(format!(
                "signal_variance must be positive and finite, got {}",
                self.signal_variance
            )));
        }
        if !(self.jitter >= T::zero()) || !self.jitter.is_finite() {
            return Err(NpviError::input(format!(
                "jitter must be non-negative, got {}",
                self.jitter
            )));
        }
        Ok(())
    }

    /// Covariance between two distinct points. Panics on dimension mismatch;
    /// use [`KernelConfig::rbf`] for checked evaluation.
    #[inline]
    pub fn cov(&self, x: &[T], x2: &[T]) -> T {
        debug_assert_eq!(x.len(), x2.len());
        let two = T::of(2.0);
        let d2 = squared_distance(x, x2);
        self.signal_variance * (-d2 / (two * self.length_scale * self.length_scale)).exp()
    }

    /// `kappa(x, x)` including jitter.
    #[inline]
    pub fn self_cov(&self) -> T {
        self.signal_variance + self.jitter
    }

    /// Checked RBF evaluation. Jitter is added only when `x` and `x2` are the
    /// same slice in memory (the diagonal of a covariance matrix).
    pub fn rbf(&self, x: &[T], x2: &[T]) -> Result<T> {
        if x.len() != x2.len() || x.is_empty() {
            return Err(NpviError::input(format!(
                "rbf dimension mismatch: {} vs {}",
                x.len(),
                x2.len()
            )));
        }
        let same = std::ptr::eq(x.as_ptr(), x2.as_ptr());
        let k = self.cov(x, x2);
        Ok(if same { k + self.jitter } else { k })
    }

    /// Cross-covariance matrix between two point sets. If `a` and `b` are the
    /// same object the result gets jitter on the diagonal and is symmetric.
    pub fn kernel_matrix(&self, a: &Points<T>, b: &Points<T>) -> Result<DenseMatrix<T>> {
        if a.dim() != b.dim() {
            return Err(NpviError::input(format!(
                "kernel_matrix dimension mismatch: {} vs {}",
                a.dim(),
                b.dim()
            )));
        }
        if std::ptr::eq(a, b) {
            return Ok(self.gram(a));
        }
        Ok(DenseMatrix::from_fn(a.len(), b.len(), |i, j| {
            self.cov(a.point(i), b.point(j))
        }))
    }

    /// Symmetric covariance matrix of one point set, jitter on the diagonal.
    pub fn gram(&self, a: &Points<T>) -> DenseMatrix<T> {
        let n = a.len();
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = self.self_cov();
            for j in 0..i {
                let v = self.cov(a.point(i), a.point(j));
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    /// Covariance matrix of the subset `idx` of `points`, jittered diagonal.
    pub fn gram_subset(&self, points: &Points<T>, idx: &[usize]) -> DenseMatrix<T> {
        let m = idx.len();
        let mut out = DenseMatrix::zeros(m, m);
        for a in 0..m {
            out[(a, a)] = self.self_cov();
            for b in 0..a {
                let v = self.cov(points.point(idx[a]), points.point(idx[b]));
                out[(a, b)] = v;
                out[(b, a)] = v;
            }
        }
        out
    }
}
