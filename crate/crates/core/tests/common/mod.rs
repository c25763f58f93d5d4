//! Fixtures and dense oracles shared by the integration tests.
#![allow(dead_code)]

pub mod gradcheck;

use nalgebra::{DMatrix, DVector};
use npvi::graph::{NeighborGraph, VecchiaConditionals};
use npvi::kernel::{KernelConfig, Points};
use npvi::variational::{dense_factor, VariationalParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform_points(n: usize, d: usize, seed: u64) -> Points<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Points::new(d, (0..n * d).map(|_| rng.random::<f64>()).collect()).unwrap()
}

pub fn to_dmatrix(m: &npvi::linalg::DenseMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

/// Dense prior covariance (with jitter on the diagonal).
pub fn dense_prior(points: &Points<f64>, cfg: &KernelConfig<f64>) -> DMatrix<f64> {
    to_dmatrix(&cfg.gram(points))
}

/// `log N(f; 0, sigma)` by a dense Cholesky.
pub fn dense_log_density(f: &[f64], sigma: &DMatrix<f64>) -> f64 {
    let n = f.len();
    let chol = sigma.clone().cholesky().expect("SPD covariance");
    let fv = DVector::from_column_slice(f);
    let alpha = chol.solve(&fv);
    let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + fv.dot(&alpha))
}

/// Exact posterior of a GP with Gaussian noise: mean and covariance.
pub fn exact_gaussian_posterior(
    sigma: &DMatrix<f64>,
    y: &[f64],
    noise: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = y.len();
    let a = sigma + DMatrix::identity(n, n) * noise;
    let chol = a.cholesky().expect("SPD");
    let yv = DVector::from_column_slice(y);
    let mean = sigma * chol.solve(&yv);
    let cov = sigma - sigma * chol.solve(sigma);
    (mean, cov)
}

/// `log N(y; 0, sigma + noise I)`.
pub fn exact_log_marginal(sigma: &DMatrix<f64>, y: &[f64], noise: f64) -> f64 {
    let n = y.len();
    dense_log_density(y, &(sigma + DMatrix::identity(n, n) * noise))
}

pub fn graph_and_cond(
    points: &Points<f64>,
    k: usize,
    cfg: &KernelConfig<f64>,
) -> (NeighborGraph, VecchiaConditionals<f64>) {
    let g = NeighborGraph::build(points, k).unwrap();
    let c = VecchiaConditionals::compute(&g, points, cfg).unwrap();
    (g, c)
}

/// Random SPD matrix `B B^T / n + n I`-style, well conditioned.
pub fn random_spd(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &b * b.transpose() / n as f64 + DMatrix::identity(n, n)
}

/// `|a - b| / max(|a|, |b|)`, zero when both are exactly zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let s = a.abs().max(b.abs());
    if s == 0.0 {
        0.0
    } else {
        (a - b).abs() / s
    }
}

pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
}

/// Random state around the prior initialization: `mu ~ U(-1, 1)`, `log L_ii`
/// jittered by up to 0.5 and off-diagonals on the scale of `sqrt(cond_var_i)`,
/// which keeps the cross term moderate.
pub fn random_params(
    graph: &NeighborGraph,
    cond: &VecchiaConditionals<f64>,
    rng: &mut impl Rng,
) -> VariationalParams<f64> {
    let mut p = VariationalParams::prior_init(graph, cond);
    for v in &mut p.mu {
        *v = rng.random_range(-1.0..1.0);
    }
    for i in 0..graph.n() {
        *p.logdiag_mut(i) += rng.random_range(-0.5..0.5);
    }
    for i in 0..graph.n() {
        let m = graph.num_parents(i);
        let scale = cond.cond_var(i).sqrt();
        for v in p.offdiag_row_mut(i, m) {
            *v = scale * rng.random_range(-1.0..1.0);
        }
    }
    p
}

/// Dense `V = L L^T` of a directly parameterized state.
pub fn dense_covariance(p: &VariationalParams<f64>, graph: &NeighborGraph) -> DMatrix<f64> {
    let l = to_dmatrix(&dense_factor(&p.rows(graph), graph));
    &l * l.transpose()
}

/// Precision of the factorized prior, `(I - B)^T D^{-1} (I - B)`.
pub fn vecchia_precision(graph: &NeighborGraph, cond: &VecchiaConditionals<f64>) -> DMatrix<f64> {
    let n = graph.n();
    let mut r = DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        for (&j, &b) in graph.parents(i).iter().zip(cond.b(i)) {
            r[(i, j)] -= b;
        }
        let s = cond.cond_var(i).sqrt();
        for j in 0..n {
            r[(i, j)] /= s;
        }
    }
    r.transpose() * r
}

/// DAG with `min(k, i)` parents per row drawn uniformly from `0..i`.
pub fn random_graph(n: usize, k: usize, rng: &mut impl Rng) -> NeighborGraph {
    let rows = (0..n)
        .map(|i| {
            let mut p = rand::seq::index::sample(rng, i.max(1), k.min(i)).into_vec();
            p.sort_unstable();
            p
        })
        .collect();
    NeighborGraph::from_parents(k, rows).unwrap()
}

/// Largest `|(L L^T)_ij - target_ij|` over the diagonal and the graph edges
/// after matching `target`.
pub fn match_edge_error(target: &DMatrix<f64>, graph: &NeighborGraph) -> f64 {
    let n = graph.n();
    let t = npvi::linalg::DenseMatrix::from_fn(n, n, |i, j| target[(i, j)]);
    let p = VariationalParams::match_posterior_rows(&t, graph).unwrap();
    let v = dense_covariance(&p, graph);
    let mut worst = 0.0f64;
    for i in 0..n {
        worst = worst.max((v[(i, i)] - target[(i, i)]).abs());
        for &j in graph.parents(i) {
            worst = worst.max((v[(i, j)] - target[(i, j)]).abs());
        }
    }
    worst
}
