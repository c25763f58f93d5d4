//! Gaussian variational family `q(f) = N(mu, L L^T)` with `L` sparse lower
//! triangular, row `i` supported on `beta(i) = alpha(i) + {i}`.

use serde::{Deserialize, Serialize};

use crate::error::{NpviError, Result};
use crate::graph::{NeighborGraph, VecchiaConditionals};
use crate::linalg::{dot, DenseMatrix};
use crate::scalar::Scalar;

/// Read access to the mean and factor rows of a variational distribution,
/// whether stored directly or produced by an inference network.
pub trait FactorRows<T: Scalar> {
    fn mean(&self, i: usize) -> T;
    /// `L_ii`, always positive.
    fn diag(&self, i: usize) -> T;
    /// `L_{i, alpha(i)}` in parent order.
    fn offdiag(&self, i: usize) -> &[T];
}

/// Directly parameterized variational state.
///
/// `L` lives in an `n x (k+1)` row table: row `i` holds its off-diagonals in
/// the first `|alpha(i)|` slots (the rest of the first `k` stay zero) and
/// `log L_ii` in the last slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalParams<T> {
    k: usize,
    pub mu: Vec<T>,
    table: Vec<T>,
}

impl<T: Scalar> VariationalParams<T> {
    /// `mu = 0`, `L = I`.
    pub fn identity(graph: &NeighborGraph) -> Self {
        let n = graph.n();
        let k = graph.k();
        Self {
            k,
            mu: vec![T::zero(); n],
            table: vec![T::zero(); n * (k + 1)],
        }
    }

    /// Zero mean, zero off-diagonals, `L_ii = sqrt(cond_var_i)`.
    pub fn prior_init(graph: &NeighborGraph, cond: &VecchiaConditionals<T>) -> Self {
        let mut p = Self::identity(graph);
        let half = T::of(0.5);
        for i in 0..p.n() {
            *p.logdiag_mut(i) = half * cond.cond_var(i).ln();
        }
        p
    }

    pub fn n(&self) -> usize {
        self.mu.len()
    }

    /// Width of the off-diagonal table.
    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    fn row_start(&self, i: usize) -> usize {
        i * (self.k + 1)
    }

    /// `log L_ii`.
    #[inline]
    pub fn logdiag(&self, i: usize) -> T {
        self.table[self.row_start(i) + self.k]
    }

    #[inline]
    pub fn logdiag_mut(&mut self, i: usize) -> &mut T {
        let at = self.row_start(i) + self.k;
        &mut self.table[at]
    }

    #[inline]
    pub fn offdiag_row(&self, i: usize, len: usize) -> &[T] {
        let start = self.row_start(i);
        &self.table[start..start + len]
    }

    #[inline]
    pub fn offdiag_row_mut(&mut self, i: usize, len: usize) -> &mut [T] {
        let start = self.row_start(i);
        &mut self.table[start..start + len]
    }

    /// The whole `n x (k+1)` factor table, row-major.
    pub fn factor_table(&self) -> &[T] {
        &self.table
    }

    /// Binds the parameters to a graph for row access.
    pub fn rows<'a>(&'a self, graph: &'a NeighborGraph) -> ParamRows<'a, T> {
        ParamRows {
            params: self,
            graph,
        }
    }

    /// Number of free parameters: means plus active factor entries,
    /// `n + n(k+1) - k(k+1)/2` when `n > k`.
    pub fn active_parameter_count(graph: &NeighborGraph) -> usize {
        graph.n()
            + (0..graph.n())
                .map(|i| graph.num_parents(i) + 1)
                .sum::<usize>()
    }

    pub fn check_against(&self, graph: &NeighborGraph) -> Result<()> {
        let n = graph.n();
        if self.k != graph.k() || self.mu.len() != n || self.table.len() != n * (self.k + 1) {
            return Err(NpviError::input(
                "variational parameters do not match the neighbor graph",
            ));
        }
        for i in 0..n {
            let used = graph.num_parents(i);
            let start = self.row_start(i);
            if self.table[start + used..start + self.k]
                .iter()
                .any(|&v| v != T::zero())
            {
                return Err(NpviError::input(format!(
                    "padded factor slots of row {i} are not zero"
                )));
            }
        }
        Ok(())
    }

    /// Constructs `L` row by row so that `(L L^T)_{ij} = target_{ij}` for
    /// every `i` and `j` in `beta(i)`. The mean is set to zero.
    pub fn match_posterior_rows(target: &DenseMatrix<T>, graph: &NeighborGraph) -> Result<Self> {
        let n = graph.n();
        if target.rows() != n || target.cols() != n {
            return Err(NpviError::input(format!(
                "target covariance is {}x{}, graph has {n} points",
                target.rows(),
                target.cols()
            )));
        }
        let mut p = Self::identity(graph);
        for i in 0..n {
            let alpha = graph.parents(i);
            let m = alpha.len();
            // L restricted to rows and columns alpha(i): lower triangular
            // because alpha(i) is sorted and rows only reach lower columns.
            let mut block = DenseMatrix::zeros(m, m);
            for (a, &row) in alpha.iter().enumerate() {
                let rp = graph.parents(row);
                let vals = p.offdiag_row(row, rp.len());
                for (b, &col) in alpha.iter().enumerate().take(a + 1) {
                    block[(a, b)] = if col == row {
                        p.logdiag(row).exp()
                    } else {
                        rp.binary_search(&col).map_or(T::zero(), |s| vals[s])
                    };
                }
            }
            let rhs: Vec<T> = alpha.iter().map(|&j| target[(j, i)]).collect();
            let x = block.solve_lower(&rhs);
            let d2 = target[(i, i)] - dot(&x, &x);
            if !(d2 > T::zero()) || x.iter().any(|v| !v.is_finite()) {
                return Err(NpviError::numerical(format!(
                    "row {i}: target variance {} is not reachable by the sparse factor (residual {d2})",
                    target[(i, i)]
                )));
            }
            p.offdiag_row_mut(i, m).copy_from_slice(&x);
            *p.logdiag_mut(i) = T::of(0.5) * d2.ln();
        }
        Ok(p)
    }
}

/// Parameters bound to their graph.
#[derive(Clone, Copy)]
pub struct ParamRows<'a, T> {
    params: &'a VariationalParams<T>,
    graph: &'a NeighborGraph,
}

impl<T: Scalar> FactorRows<T> for ParamRows<'_, T> {
    #[inline]
    fn mean(&self, i: usize) -> T {
        self.params.mu[i]
    }

    #[inline]
    fn diag(&self, i: usize) -> T {
        self.params.logdiag(i).exp()
    }

    #[inline]
    fn offdiag(&self, i: usize) -> &[T] {
        self.params.offdiag_row(i, self.graph.num_parents(i))
    }
}

/// One draw from the marginal `q(f_i)`. `eps` holds one standard normal per
/// parent (in parent order) followed by one for `i` itself.
pub fn sample_marginal<T: Scalar>(rows: &impl FactorRows<T>, i: usize, eps: &[T]) -> T {
    let off = rows.offdiag(i);
    assert_eq!(
        eps.len(),
        off.len() + 1,
        "marginal sample needs |alpha(i)| + 1 draws"
    );
    rows.mean(i) + dot(off, &eps[..off.len()]) + rows.diag(i) * eps[off.len()]
}

/// `f = mu + L eps` over all points.
pub fn sample_joint<T: Scalar>(
    rows: &impl FactorRows<T>,
    graph: &NeighborGraph,
    eps: &[T],
) -> Vec<T> {
    assert_eq!(
        eps.len(),
        graph.n(),
        "joint sample needs one draw per point"
    );
    (0..graph.n())
        .map(|i| {
            let p = graph.parents(i);
            let off = rows.offdiag(i);
            let s = p
                .iter()
                .zip(off)
                .fold(T::zero(), |acc, (&j, &l)| acc + l * eps[j]);
            rows.mean(i) + s + rows.diag(i) * eps[i]
        })
        .collect()
}

/// `V_ij = L_i . L_j`, summed over the shared support of the two rows.
pub fn covariance_entry<T: Scalar>(
    rows: &impl FactorRows<T>,
    graph: &NeighborGraph,
    i: usize,
    j: usize,
) -> T {
    let (pi, pj) = (graph.parents(i), graph.parents(j));
    let (li, lj) = (rows.offdiag(i), rows.offdiag(j));
    let at = |p: &[usize], l: &[T], row: usize, t: usize| -> (usize, T) {
        if t < p.len() {
            (p[t], l[t])
        } else {
            (row, rows.diag(row))
        }
    };
    let (mut a, mut b) = (0, 0);
    let mut acc = T::zero();
    while a <= pi.len() && b <= pj.len() {
        let (ca, va) = at(pi, li, i, a);
        let (cb, vb) = at(pj, lj, j, b);
        match ca.cmp(&cb) {
            std::cmp::Ordering::Less => a += 1,
            std::cmp::Ordering::Greater => b += 1,
            std::cmp::Ordering::Equal => {
                acc += va * vb;
                a += 1;
                b += 1;
            }
        }
    }
    acc
}

/// Dense copy of `L`, for diagnostics and tests.
pub fn dense_factor<T: Scalar>(rows: &impl FactorRows<T>, graph: &NeighborGraph) -> DenseMatrix<T> {
    let n = graph.n();
    let mut l = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for (&j, &v) in graph.parents(i).iter().zip(rows.offdiag(i)) {
            l[(i, j)] = v;
        }
        l[(i, i)] = rows.diag(i);
    }
    l
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(n: usize) -> NeighborGraph {
        NeighborGraph::from_parents(
            1,
            (0..n)
                .map(|i| if i == 0 { vec![] } else { vec![i - 1] })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_noise_returns_mean() {
        let g = chain(3);
        let mut p = VariationalParams::<f64>::identity(&g);
        p.mu = vec![0.5, -1.0, 2.0];
        p.offdiag_row_mut(2, 1)[0] = 0.3;
        let rows = p.rows(&g);
        assert_eq!(sample_marginal(&rows, 2, &[0.0, 0.0]), 2.0);
        assert_eq!(sample_joint(&rows, &g, &[0.0; 3]), p.mu);
    }

    #[test]
    fn marginal_sample_by_hand() {
        let g = chain(2);
        let mut p = VariationalParams::<f64>::identity(&g);
        assert_eq!(sample_marginal(&p.rows(&g), 0, &[1.5]), 1.5);
        p.offdiag_row_mut(1, 1)[0] = 0.3;
        *p.logdiag_mut(1) = 0.4f64.ln();
        let f = sample_marginal(&p.rows(&g), 1, &[1.0, 1.0]);
        assert!((f - 0.7).abs() < 1e-15);
    }

    #[test]
    fn identity_factor() {
        let g = chain(4);
        let p = VariationalParams::<f64>::identity(&g);
        let rows = p.rows(&g);
        let eps = [0.1, -0.2, 0.3, 0.9];
        assert_eq!(sample_joint(&rows, &g, &eps), eps.to_vec());
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(
                    covariance_entry(&rows, &g, i, j),
                    if i == j { 1.0 } else { 0.0 }
                );
            }
        }
    }

    #[test]
    fn disjoint_support_is_zero() {
        let g = chain(4);
        let mut p = VariationalParams::<f64>::identity(&g);
        for i in 1..4 {
            p.offdiag_row_mut(i, 1)[0] = 0.7;
        }
        let rows = p.rows(&g);
        // beta(0) = {0}, beta(3) = {2, 3}
        assert_eq!(covariance_entry(&rows, &g, 0, 3), 0.0);
        assert!(covariance_entry(&rows, &g, 1, 2) != 0.0);
    }

    #[test]
    fn two_by_two_match() {
        let g = NeighborGraph::full(2);
        let target = DenseMatrix::from_row_major(2, 2, vec![1.0_f64, 0.3, 0.3, 1.0]);
        let p = VariationalParams::match_posterior_rows(&target, &g).unwrap();
        let l = dense_factor(&p.rows(&g), &g);
        assert!((l[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((l[(1, 0)] - 0.3).abs() < 1e-15);
        assert!((l[(1, 1)] - 0.91f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn identity_target_gives_identity_factor() {
        let g = chain(5);
        let p =
            VariationalParams::match_posterior_rows(&DenseMatrix::<f64>::identity(5), &g).unwrap();
        assert!(p.factor_table().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unreachable_target_is_reported() {
        let g = NeighborGraph::full(2);
        let target = DenseMatrix::from_row_major(2, 2, vec![1.0, 2.0, 2.0, 1.0]);
        assert!(VariationalParams::match_posterior_rows(&target, &g).is_err());
    }

    #[test]
    fn parameter_count() {
        // n = 6, k = 2: 6 means + 6*3 - 3 factor entries.
        let g = NeighborGraph::from_parents(
            2,
            vec![
                vec![],
                vec![0],
                vec![0, 1],
                vec![1, 2],
                vec![2, 3],
                vec![0, 4],
            ],
        )
        .unwrap();
        assert_eq!(
            VariationalParams::<f64>::active_parameter_count(&g),
            6 + 18 - 3
        );
    }
}
