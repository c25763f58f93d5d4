//! Parent DAG over the data points and the Vecchia prior conditionals it
//! induces.
//!
//! Point `i` (0-based) conditions on a parent set `alpha(i)` of exactly
//! `min(k, i)` lower-indexed points chosen by spatial proximity. The same
//! sets define the sparsity of the variational factor.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NpviError, Result};
use crate::kernel::{KernelConfig, Points};
use crate::knn::{brute_force_nearest, KdTree};
use crate::linalg::dot;
use crate::scalar::Scalar;

/// Below this index a deficit is filled by scanning `0..i` directly; the
/// filtered tree search degrades when few stored points pass the filter.
const BRUTE_FILL_LIMIT: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborGraph {
    n: usize,
    k: usize,
    /// Row `i` holds `min(k, i)` entries starting at `row_start(k, i)`.
    parents: Vec<usize>,
    /// `order[p]` is the caller's row index of the point at graph position `p`.
    order: Vec<usize>,
}

impl NeighborGraph {
    /// Builds the DAG over `points` in their given order.
    pub fn build<T: Scalar>(points: &Points<T>, k: usize) -> Result<Self> {
        let tree = KdTree::build(points)?;
        Self::build_with_tree(points, &tree, k)
    }

    /// Builds the DAG over `points` visited in `order`. Graph index `p` then
    /// refers to `points[order[p]]`.
    pub fn build_in_order<T: Scalar>(
        points: &Points<T>,
        k: usize,
        order: Vec<usize>,
    ) -> Result<Self> {
        check_permutation(&order, points.len())?;
        let permuted = points.select(&order);
        let mut g = Self::build(&permuted, k)?;
        g.order = order;
        Ok(g)
    }

    /// Records that graph position `p` holds the caller's row `order[p]`.
    pub fn with_order(mut self, order: Vec<usize>) -> Result<Self> {
        check_permutation(&order, self.n)?;
        self.order = order;
        Ok(self)
    }

    /// Three-step construction: symmetric kNN edges, orientation from lower
    /// to higher index, then trimming or filling each parent set to exactly
    /// `min(k, i)` entries.
    pub fn build_with_tree<T: Scalar>(
        points: &Points<T>,
        tree: &KdTree<T>,
        k: usize,
    ) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(NpviError::input(
                "cannot build a neighbor graph on zero points",
            ));
        }
        if k == 0 {
            return Err(NpviError::input("neighbor budget k must be >= 1"));
        }
        if !points.all_finite() {
            return Err(NpviError::input("point coordinates must be finite"));
        }
        if tree.len() != n {
            return Err(NpviError::input(
                "k-d tree was built on a different point set",
            ));
        }

        // Step 1: undirected kNN edges.
        let knn: Vec<Vec<usize>> = (0..n)
            .into_par_iter()
            .map(|i| {
                tree.nearest_filtered(points.point(i), k, |j| j != i)
                    .into_iter()
                    .map(|nb| nb.index)
                    .collect()
            })
            .collect();

        // Step 2: orient every edge toward the larger index.
        let mut candidates: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, nbrs) in knn.iter().enumerate() {
            for &j in nbrs {
                let (lo, hi) = if j < i { (j, i) } else { (i, j) };
                candidates[hi].push(lo);
            }
        }

        // Step 3: trim surplus by dropping the largest indices, fill deficits
        // with the nearest lower-index points not yet present.
        let rows: Vec<Vec<usize>> = candidates
            .into_par_iter()
            .enumerate()
            .map(|(i, mut cand)| {
                cand.sort_unstable();
                cand.dedup();
                let target = k.min(i);
                if cand.len() > target {
                    cand.truncate(target);
                } else if cand.len() < target {
                    let missing = target - cand.len();
                    let present = cand.clone();
                    let accept = |j: usize| j < i && present.binary_search(&j).is_err();
                    let extra = if i <= BRUTE_FILL_LIMIT {
                        brute_force_nearest(points, points.point(i), missing, accept)
                    } else {
                        tree.nearest_filtered(points.point(i), missing, accept)
                    };
                    cand.extend(extra.into_iter().map(|nb| nb.index));
                    cand.sort_unstable();
                }
                cand
            })
            .collect();

        let mut parents = Vec::with_capacity(row_start(k, n));
        for row in rows {
            parents.extend(row);
        }
        Ok(Self {
            n,
            k,
            parents,
            order: (0..n).collect(),
        })
    }

    /// Graph from explicit parent lists, validated against the structural
    /// invariants.
    pub fn from_parents(k: usize, rows: Vec<Vec<usize>>) -> Result<Self> {
        if k == 0 {
            return Err(NpviError::input("neighbor budget k must be >= 1"));
        }
        let n = rows.len();
        let mut parents = Vec::with_capacity(row_start(k, n));
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != k.min(i) {
                return Err(NpviError::input(format!(
                    "point {i} has {} parents, expected {}",
                    row.len(),
                    k.min(i)
                )));
            }
            if row.iter().any(|&j| j >= i) || row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(NpviError::input(format!(
                    "parents of point {i} must be strictly increasing and below {i}"
                )));
            }
            parents.extend(row);
        }
        Ok(Self {
            n,
            k,
            parents,
            order: (0..n).collect(),
        })
    }

    /// Every lower-index point is a parent (the dense lower-triangular case).
    pub fn full(n: usize) -> Self {
        let k = n.saturating_sub(1).max(1);
        Self::from_parents(k, (0..n).map(|i| (0..i).collect()).collect())
            .expect("full graph is valid")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    #[inline]
    pub fn parents(&self, i: usize) -> &[usize] {
        let start = row_start(self.k, i);
        &self.parents[start..start + self.k.min(i)]
    }

    #[inline]
    pub fn num_parents(&self, i: usize) -> usize {
        self.k.min(i)
    }

    /// Structural checks: parent counts, ordering, no duplicates.
    pub fn validate(&self) -> Result<()> {
        if self.k == 0
            || self.parents.len() != row_start(self.k, self.n)
            || self.order.len() != self.n
        {
            return Err(NpviError::input("graph arrays have inconsistent lengths"));
        }
        check_permutation(&self.order, self.n)?;
        for i in 0..self.n {
            let p = self.parents(i);
            if p.iter().any(|&j| j >= i) || p.windows(2).any(|w| w[0] >= w[1]) {
                return Err(NpviError::input(format!(
                    "parents of point {i} are not sorted lower indices"
                )));
            }
        }
        Ok(())
    }
}

/// Start of row `i` in the parent table, where row `i` has `min(k, i)`
/// entries; `row_start(k, n)` is the table length.
#[inline]
fn row_start(k: usize, i: usize) -> usize {
    if i <= k {
        i * i.saturating_sub(1) / 2
    } else {
        k * k.saturating_sub(1) / 2 + (i - k) * k
    }
}

fn check_permutation(order: &[usize], n: usize) -> Result<()> {
    if order.len() != n {
        return Err(NpviError::input(format!(
            "ordering has length {} but there are {n} points",
            order.len()
        )));
    }
    let mut seen = vec![false; n];
    for &o in order {
        if o >= n || std::mem::replace(&mut seen[o], true) {
            return Err(NpviError::input("ordering is not a permutation"));
        }
    }
    Ok(())
}

/// Regression weights `b = Sigma_{t,A} Sigma_{A,A}^{-1}` and conditional
/// variance of a target point given the conditioning set `cond`.
///
/// `self_cov` is the target's prior variance. Errors carry nothing; callers
/// attach the context.
pub fn condition_on<T: Scalar>(
    cfg: &KernelConfig<T>,
    points: &Points<T>,
    cond: &[usize],
    target: &[T],
    self_cov: T,
) -> std::result::Result<(Vec<T>, T), ()> {
    if cond.is_empty() {
        return Ok((Vec::new(), self_cov));
    }
    let block = cfg.gram_subset(points, cond);
    let chol = block.cholesky().map_err(|_| ())?;
    let cross: Vec<T> = cond
        .iter()
        .map(|&j| cfg.cov(target, points.point(j)))
        .collect();
    let b = chol.cholesky_solve(&cross);
    let var = self_cov - dot(&cross, &b);
    if !(var > T::zero()) || !var.is_finite() || b.iter().any(|v| !v.is_finite()) {
        return Err(());
    }
    Ok((b, var))
}

/// Per-point prior conditionals `f_i | f_alpha(i) ~ N(b_i^T f_alpha(i), cond_var_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VecchiaConditionals<T> {
    /// Parent budget of the graph; `b` shares its row layout.
    k: usize,
    b: Vec<T>,
    cond_var: Vec<T>,
}

impl<T: Scalar> VecchiaConditionals<T> {
    /// Solves one `|alpha(i)|`-sized system per point. `points` must be in
    /// graph order.
    pub fn compute(
        graph: &NeighborGraph,
        points: &Points<T>,
        cfg: &KernelConfig<T>,
    ) -> Result<Self> {
        if points.len() != graph.n() {
            return Err(NpviError::input(format!(
                "graph has {} points but {} coordinates were given",
                graph.n(),
                points.len()
            )));
        }
        cfg.validate()?;
        let rows: Vec<(Vec<T>, T)> = (0..graph.n())
            .into_par_iter()
            .map(|i| {
                condition_on(cfg, points, graph.parents(i), points.point(i), cfg.self_cov()).map_err(|_| {
                    NpviError::numerical(format!(
                        "prior covariance block of the parents of point {i} is not positive definite"
                    ))
                })
            })
            .collect::<Result<_>>()?;
        let mut b = Vec::with_capacity(graph.parents.len());
        let mut cond_var = Vec::with_capacity(graph.n());
        for (bi, vi) in rows {
            b.extend(bi);
            cond_var.push(vi);
        }
        Ok(Self {
            k: graph.k(),
            b,
            cond_var,
        })
    }

    #[inline]
    pub fn b(&self, i: usize) -> &[T] {
        let start = row_start(self.k, i);
        &self.b[start..start + self.k.min(i)]
    }

    #[inline]
    pub fn cond_var(&self, i: usize) -> T {
        self.cond_var[i]
    }

    pub fn len(&self) -> usize {
        self.cond_var.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cond_var.is_empty()
    }

    /// Conditional mean `b_i^T f_alpha(i)`.
    pub fn cond_mean(&self, graph: &NeighborGraph, i: usize, f: &[T]) -> T {
        self.b(i)
            .iter()
            .zip(graph.parents(i))
            .fold(T::zero(), |acc, (&w, &j)| acc + w * f[j])
    }

    /// `log det` of the implied prior covariance, `sum_i log cond_var_i`.
    pub fn log_det(&self) -> T {
        self.cond_var.iter().map(|v| v.ln()).sum()
    }

    /// Shape agreement with a graph (used when loading checkpoints).
    pub fn check_against(&self, graph: &NeighborGraph) -> Result<()> {
        let ok = self.cond_var.len() == graph.n()
            && self.k == graph.k()
            && self.b.len() == row_start(graph.k(), graph.n())
            && self.cond_var.iter().all(|&v| v > T::zero());
        if ok {
            Ok(())
        } else {
            Err(NpviError::input(
                "prior conditionals do not match the neighbor graph",
            ))
        }
    }
}

/// Log density of `f` under the factorized prior
/// `prod_i N(f_i; b_i^T f_alpha(i), cond_var_i)`.
pub fn vecchia_log_prior<T: Scalar>(
    f: &[T],
    graph: &NeighborGraph,
    cond: &VecchiaConditionals<T>,
) -> Result<T> {
    if f.len() != graph.n() {
        return Err(NpviError::input(
            "latent vector length does not match the graph",
        ));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(NpviError::input("latent vector contains non-finite values"));
    }
    let half = T::of(0.5);
    let log_2pi = (T::of(2.0) * T::PI()).ln();
    let mut total = T::zero();
    for i in 0..graph.n() {
        let r = f[i] - cond.cond_mean(graph, i, f);
        let v = cond.cond_var(i);
        total -= half * (log_2pi + v.ln() + r * r / v);
    }
    Ok(total)
}
