//! Unbiased minibatch estimates of the three ELBO terms and their gradients.
//!
//! For a batch `S` drawn from `n` points every term is scaled by `n / |S|`:
//!
//! * expected log-likelihood: one reparameterized draw `f_i = mu_i + L_i eps`
//!   per point and Monte Carlo sample;
//! * cross entropy against the factorized prior, in closed form:
//!   `-0.5 log(2 pi c_i) - 0.5 (Q Q^T + r_i^2) / c_i` with
//!   `Q = L_i - b_i^T L_alpha(i)` and `r_i = mu_i - b_i^T mu_alpha(i)`;
//! * entropy: `0.5 (n log(2 pi e) + sum_i log L_ii^2)`.
//!
//! Gradients are taken with respect to `mu`, the raw diagonal `L_ii` and the
//! off-diagonal slots, so both the log-parameterized direct model and the
//! inference network can chain from them.

use std::cell::RefCell;

use rand::Rng;
use rustc_hash::FxHashMap;

use crate::graph::{NeighborGraph, VecchiaConditionals};
use crate::likelihood::Likelihood;
use crate::scalar::Scalar;
use crate::variational::{sample_marginal, FactorRows};

/// Up to this many touched rows are found by a linear scan.
const LINEAR_ROWS: usize = 32;

/// Sparse gradient accumulator keyed by factor row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowGrads<T> {
    k: usize,
    /// Row index lookup, built once more than `LINEAR_ROWS` rows are touched.
    slots: FxHashMap<usize, usize>,
    /// Touched rows in first-touch order.
    pub rows: Vec<usize>,
    pub mu: Vec<T>,
    /// Derivative with respect to `L_ii` itself.
    pub diag: Vec<T>,
    /// `k` entries per touched row, aligned with the parent list.
    pub offdiag: Vec<T>,
}

impl<T: Scalar> RowGrads<T> {
    pub fn new(k: usize) -> Self {
        Self::with_capacity(k, 0)
    }

    /// Room for `rows` touched rows without reallocation.
    pub fn with_capacity(k: usize, rows: usize) -> Self {
        Self {
            k,
            slots: FxHashMap::default(),
            rows: Vec::with_capacity(rows),
            mu: Vec::with_capacity(rows),
            diag: Vec::with_capacity(rows),
            offdiag: Vec::with_capacity(rows * k),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn slot(&mut self, row: usize) -> usize {
        if let Some(s) = self.find(row) {
            return s;
        }
        let s = self.rows.len();
        self.rows.push(row);
        if !self.slots.is_empty() {
            self.slots.insert(row, s);
        } else if self.rows.len() > LINEAR_ROWS {
            self.slots
                .extend(self.rows.iter().enumerate().map(|(s, &r)| (r, s)));
        }
        self.mu.push(T::zero());
        self.diag.push(T::zero());
        self.offdiag.extend(std::iter::repeat_n(T::zero(), self.k));
        s
    }

    pub fn find(&self, row: usize) -> Option<usize> {
        if self.slots.is_empty() {
            self.rows.iter().position(|&r| r == row)
        } else {
            self.slots.get(&row).copied()
        }
    }

    #[inline]
    pub fn offdiag_slot(&self, slot: usize) -> &[T] {
        &self.offdiag[slot * self.k..(slot + 1) * self.k]
    }

    #[inline]
    fn offdiag_slot_mut(&mut self, slot: usize) -> &mut [T] {
        &mut self.offdiag[slot * self.k..(slot + 1) * self.k]
    }

    /// Gradient for `mu_row` (zero if untouched).
    pub fn mu_of(&self, row: usize) -> T {
        self.find(row).map_or(T::zero(), |s| self.mu[s])
    }

    pub fn diag_of(&self, row: usize) -> T {
        self.find(row).map_or(T::zero(), |s| self.diag[s])
    }

    pub fn offdiag_of(&self, row: usize, parent_slot: usize) -> T {
        self.find(row)
            .map_or(T::zero(), |s| self.offdiag_slot(s)[parent_slot])
    }

    pub fn all_finite(&self) -> bool {
        self.mu
            .iter()
            .chain(&self.diag)
            .chain(&self.offdiag)
            .all(|v| v.is_finite())
    }

    /// Adds `other` into `self`.
    pub fn merge(&mut self, other: &RowGrads<T>) {
        for (s, &row) in other.rows.iter().enumerate() {
            let d = self.slot(row);
            self.mu[d] += other.mu[s];
            self.diag[d] += other.diag[s];
            let src = other.offdiag_slot(s).to_vec();
            for (a, b) in self.offdiag_slot_mut(d).iter_mut().zip(src) {
                *a += b;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TermBreakdown<T> {
    pub ell: T,
    pub cross: T,
    pub ent: T,
}

#[derive(Debug, Clone)]
pub struct BatchEstimate<T> {
    pub value: T,
    pub terms: TermBreakdown<T>,
    pub grads: RowGrads<T>,
}

/// Standard normal draws for the likelihood term: for batch position `b`,
/// `mc` consecutive blocks of `|alpha(i)| + 1` values.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNoise<T> {
    pub mc: usize,
    pub draws: Vec<Vec<T>>,
}

impl<T: Scalar> BatchNoise<T> {
    pub fn draw<R: Rng + ?Sized>(
        rng: &mut R,
        batch: &[usize],
        graph: &NeighborGraph,
        mc: usize,
    ) -> Self {
        let draws = batch
            .iter()
            .map(|&i| {
                (0..mc * (graph.num_parents(i) + 1))
                    .map(|_| T::standard_normal(rng))
                    .collect()
            })
            .collect();
        Self { mc, draws }
    }

    pub fn zeros(batch: &[usize], graph: &NeighborGraph, mc: usize) -> Self {
        Self {
            mc,
            draws: batch
                .iter()
                .map(|&i| vec![T::zero(); mc * (graph.num_parents(i) + 1)])
                .collect(),
        }
    }
}

#[inline]
fn batch_scale<T: Scalar>(graph: &NeighborGraph, batch: &[usize]) -> T {
    T::of_usize(graph.n()) / T::of_usize(batch.len())
}

fn ell_into<T: Scalar>(
    batch: &[usize],
    rows: &impl FactorRows<T>,
    graph: &NeighborGraph,
    lik: &Likelihood<T>,
    y: &[T],
    noise: &BatchNoise<T>,
    grads: &mut RowGrads<T>,
) -> T {
    assert_eq!(
        noise.draws.len(),
        batch.len(),
        "one noise block per batch point"
    );
    let w = batch_scale::<T>(graph, batch) / T::of_usize(noise.mc);
    let mut value = T::zero();
    for (&i, draws) in batch.iter().zip(&noise.draws) {
        let m = graph.num_parents(i);
        assert_eq!(
            draws.len(),
            noise.mc * (m + 1),
            "noise block has the wrong length"
        );
        let slot = grads.slot(i);
        for eps in draws.chunks_exact(m + 1) {
            let f = sample_marginal(rows, i, eps);
            let (lp, d) = lik.value_and_derivative(y[i], f);
            value += w * lp;
            let g = w * d;
            grads.mu[slot] += g;
            grads.diag[slot] += g * eps[m];
            for (acc, &e) in grads.offdiag_slot_mut(slot)[..m].iter_mut().zip(&eps[..m]) {
                *acc += g * e;
            }
        }
    }
    value
}

fn entropy_into<T: Scalar>(
    batch: &[usize],
    rows: &impl FactorRows<T>,
    n: usize,
    grads: &mut RowGrads<T>,
) -> T {
    let s = T::of_usize(n) / T::of_usize(batch.len());
    let two = T::of(2.0);
    let half = T::of(0.5);
    let log_2pi_e = (two * T::PI()).ln() + T::one();
    let mut acc = T::zero();
    for &i in batch {
        let d = rows.diag(i);
        acc += two * d.ln();
        let slot = grads.slot(i);
        grads.diag[slot] += s / d;
    }
    half * (T::of_usize(n) * log_2pi_e + s * acc)
}

thread_local! {
    /// Column to position map for `Q`, `u32::MAX` where unused. Kept per
    /// thread and sized to the largest graph seen; four bytes per point so
    /// that it stays cache resident on large graphs.
    static COLUMN_POS: RefCell<Vec<u32>> = const { RefCell::new(Vec::new()) };
}

/// The sparse row combination `Q` on the union of its row supports, in
/// first-touch column order.
struct QScratch<'a, T> {
    pos: &'a mut [u32],
    cols: Vec<usize>,
    vals: Vec<T>,
    /// Position in `vals` of every added entry, in order of addition.
    entries: Vec<u32>,
}

impl<'a, T: Scalar> QScratch<'a, T> {
    fn new(pos: &'a mut [u32], support: usize, entries: usize) -> Self {
        Self {
            pos,
            cols: Vec::with_capacity(support),
            vals: Vec::with_capacity(support),
            entries: Vec::with_capacity(entries),
        }
    }

    /// Adds `w * row_j`, where a row lists its parents then itself.
    fn add_row(&mut self, parents: &[usize], offdiag: &[T], node: usize, diag: T, w: T) {
        for (&col, &v) in parents.iter().zip(offdiag) {
            self.add(col, w * v);
        }
        self.add(node, w * diag);
    }

    #[inline]
    fn add(&mut self, col: usize, v: T) {
        let p = match self.pos[col] {
            u32::MAX => {
                let p = self.vals.len() as u32;
                self.pos[col] = p;
                self.cols.push(col);
                self.vals.push(v);
                p
            }
            p => {
                self.vals[p as usize] += v;
                p
            }
        };
        self.entries.push(p);
    }

    /// `Q` at the columns of every added entry, in order of addition.
    fn entry_values(&self) -> impl Iterator<Item = T> + '_ {
        self.entries.iter().map(|&p| self.vals[p as usize])
    }

    fn clear(&mut self) {
        for &c in &self.cols {
            self.pos[c] = u32::MAX;
        }
        self.cols.clear();
        self.vals.clear();
        self.entries.clear();
    }
}

fn cross_into<T: Scalar>(
    batch: &[usize],
    rows: &impl FactorRows<T>,
    graph: &NeighborGraph,
    cond: &VecchiaConditionals<T>,
    grads: &mut RowGrads<T>,
) -> T {
    COLUMN_POS.with_borrow_mut(|pos| {
        if pos.len() < graph.n() {
            pos.resize(graph.n(), u32::MAX);
        }
        let entries = (graph.k() + 1) * (graph.k() + 1);
        let q = QScratch::new(&mut pos[..], graph.n().min(entries), entries);
        cross_with(q, batch, rows, graph, cond, grads)
    })
}

fn cross_with<T: Scalar>(
    mut q: QScratch<'_, T>,
    batch: &[usize],
    rows: &impl FactorRows<T>,
    graph: &NeighborGraph,
    cond: &VecchiaConditionals<T>,
    grads: &mut RowGrads<T>,
) -> T {
    let s = batch_scale::<T>(graph, batch);
    let half = T::of(0.5);
    let log_2pi = (T::of(2.0) * T::PI()).ln();
    let mut value = T::zero();
    for &i in batch {
        let alpha = graph.parents(i);
        let b = cond.b(i);
        let c = cond.cond_var(i);

        // Q over the union of the supports of rows beta(i).
        q.add_row(alpha, rows.offdiag(i), i, rows.diag(i), T::one());
        for (&j, &bj) in alpha.iter().zip(b) {
            q.add_row(graph.parents(j), rows.offdiag(j), j, rows.diag(j), -bj);
        }
        let qq: T = q.vals.iter().map(|&v| v * v).sum();
        let r = rows.mean(i)
            - alpha
                .iter()
                .zip(b)
                .fold(T::zero(), |acc, (&j, &bj)| acc + bj * rows.mean(j));

        value += s * (-half * (log_2pi + c.ln()) - half * (qq + r * r) / c);

        // d/dmu and d/dL of -0.5 (QQ^T + r^2) / c, scaled by s. Rows
        // are visited in the order they were added to Q, so the entry
        // values line up with the factor slots.
        {
            let g = s / c;
            let mut qe = q.entry_values();
            let mut next = || qe.next().expect("one entry per factor value");
            let si = grads.slot(i);
            grads.mu[si] -= g * r;
            for a in 0..alpha.len() {
                grads.offdiag_slot_mut(si)[a] -= g * next();
            }
            grads.diag[si] -= g * next();
            for (&j, &bj) in alpha.iter().zip(b) {
                let sj = grads.slot(j);
                let gj = g * bj;
                grads.mu[sj] += gj * r;
                for a in 0..graph.num_parents(j) {
                    grads.offdiag_slot_mut(sj)[a] += gj * next();
                }
                grads.diag[sj] += gj * next();
            }
        }
        q.clear();
    }
    value
}

fn finish<T: Scalar>(terms: TermBreakdown<T>, grads: RowGrads<T>) -> BatchEstimate<T> {
    BatchEstimate {
        value: terms.ell + terms.cross + terms.ent,
        terms,
        grads,
    }
}

/// Likelihood term `(n/|S|) sum_{i in S} log p(y_i | f_i)` with reparameterized
/// draws. `y` is indexed like the graph.
pub fn estimate_ell<T: Scalar>(
    batch: &[usize],
    rows: &impl FactorRows<T>,
    graph: &NeighborGraph,
    lik: &Likelihood<T>,
    y: &[T],
    noise: &BatchNoise<T>,
) -> BatchEstimate<T> {
    let mut grads = RowGrads::with_capacity(graph.k(), batch.len());
    let ell = ell_into(batch, rows, graph, lik, y, noise, &mut grads);
    finish(
        TermBreakdown {
            ell,
            ..Default::default()
        },
        grads,
    )
}

pub fn estimate_entropy<T: Scalar>(
    batch: &[usize],
    rows: &impl FactorRows<T>,
    graph: &NeighborGraph,
) -> BatchEstimate<T> {
    let mut grads = RowGrads::with_capacity(graph.k(), batch.len());
    let ent = entropy_into(batch, rows, graph.n(), &mut grads);
    finish(
        TermBreakdown {
            ent,
            ..Default::default()
        },
        grads,
    )
}

pub fn estimate_cross<T: Scalar>(
    batch: &[usize],
    rows: &impl FactorRows<T>,
    graph: &NeighborGraph,
    cond: &VecchiaConditionals<T>,
) -> BatchEstimate<T> {
    let mut grads = RowGrads::with_capacity(graph.k(), batch.len() * (graph.k() + 1));
    let cross = cross_into(batch, rows, graph, cond, &mut grads);
    finish(
        TermBreakdown {
            cross,
            ..Default::default()
        },
        grads,
    )
}

/// Sum of the three estimators over one batch.
pub fn estimate_elbo<T: Scalar>(
    batch: &[usize],
    rows: &impl FactorRows<T>,
    graph: &NeighborGraph,
    cond: &VecchiaConditionals<T>,
    lik: &Likelihood<T>,
    y: &[T],
    noise: &BatchNoise<T>,
) -> BatchEstimate<T> {
    let mut grads = RowGrads::with_capacity(graph.k(), batch.len() * (graph.k() + 1));
    let ell = ell_into(batch, rows, graph, lik, y, noise, &mut grads);
    let cross = cross_into(batch, rows, graph, cond, &mut grads);
    let ent = entropy_into(batch, rows, graph.n(), &mut grads);
    finish(TermBreakdown { ell, cross, ent }, grads)
}
