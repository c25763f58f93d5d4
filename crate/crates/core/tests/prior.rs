//! Kernel, neighbor search, DAG construction and factorized prior against
//! dense and brute-force oracles.

mod common;

use common::{dense_log_density, dense_prior, graph_and_cond, rel_err, uniform_points};
use nalgebra::DMatrix;
use npvi::graph::{vecchia_log_prior, NeighborGraph, VecchiaConditionals};
use npvi::kernel::{squared_distance, KernelConfig, Points};
use npvi::knn::{brute_force_nearest, KdTree};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn gram_matrix_is_positive_definite() {
    for (seed, ls) in [(0, 0.05), (1, 0.3), (2, 2.5)] {
        let pts = uniform_points(80, 2, seed);
        let cfg = KernelConfig::new(ls).unwrap();
        let sigma = dense_prior(&pts, &cfg);
        let eig = sigma.symmetric_eigenvalues();
        let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(min > 0.0, "ls {ls}: smallest eigenvalue {min}");
        assert!((sigma.clone() - sigma.transpose()).abs().max() == 0.0);
    }
}

#[test]
fn kernel_matches_closed_form() {
    let cfg = KernelConfig::with_variance(0.7, 1.3).unwrap();
    let a = [0.1, 0.4, -0.2];
    let b = [0.5, -0.3, 0.0];
    let d2: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
    let want = 1.3 * (-d2 / (2.0 * 0.49)).exp();
    assert!(rel_err(cfg.cov(&a, &b), want) < 1e-14);
    let block = cfg
        .kernel_matrix(
            &Points::from_rows(&[a.to_vec()]).unwrap(),
            &Points::from_rows(&[b.to_vec()]).unwrap(),
        )
        .unwrap();
    assert!(rel_err(block[(0, 0)], want) < 1e-14);
}

#[test]
fn kd_tree_matches_linear_scan() {
    for (n, d, seed) in [
        (1, 2, 0),
        (50, 1, 1),
        (500, 2, 2),
        (2000, 3, 3),
        (2000, 8, 4),
    ] {
        let pts = uniform_points(n, d, seed);
        let tree = KdTree::build(&pts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for _ in 0..50 {
            let q: Vec<f64> = (0..d).map(|_| rng.random_range(-0.2..1.2)).collect();
            for k in [1, 5, 10, 2 * n] {
                let got = tree.nearest(&q, k);
                let want = brute_force_nearest(&pts, &q, k, |_| true);
                assert_eq!(got.len(), want.len());
                for (g, w) in got.iter().zip(&want) {
                    assert_eq!(g.dist2, w.dist2);
                    assert_eq!(g.dist2, squared_distance(&q, pts.point(g.index)));
                }
            }
        }
    }
}

#[test]
fn full_conditioning_reproduces_dense_prior() {
    let n = 25;
    for seed in 0..5 {
        let pts = uniform_points(n, 2, seed);
        let cfg = KernelConfig::new(0.3).unwrap();
        let (g, cond) = graph_and_cond(&pts, n - 1, &cfg);
        let sigma = dense_prior(&pts, &cfg);
        let chol = sigma.clone().cholesky().unwrap();
        let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        assert!(rel_err(cond.log_det(), log_det) < 1e-8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10 {
            let z = nalgebra::DVector::from_fn(n, |_, _| common::standard_normal(&mut rng));
            let f = (chol.l() * z).as_slice().to_vec();
            let got = vecchia_log_prior(&f, &g, &cond).unwrap();
            let want = dense_log_density(&f, &sigma);
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }
}

#[test]
fn conditional_variance_shrinks_with_nested_parent_sets() {
    let n = 40;
    let pts = uniform_points(n, 2, 9);
    let cfg = KernelConfig::new(0.4).unwrap();
    let base = NeighborGraph::build(&pts, 8).unwrap();
    let mut prev = vec![cfg.self_cov(); n];
    for m in 1..=8 {
        let rows = (0..n)
            .map(|i| base.parents(i)[..m.min(i)].to_vec())
            .collect();
        let g = NeighborGraph::from_parents(m, rows).unwrap();
        let c = VecchiaConditionals::compute(&g, &pts, &cfg).unwrap();
        for (i, p) in prev.iter_mut().enumerate() {
            assert!(c.cond_var(i) <= *p * (1.0 + 1e-12), "row {i}, {m} parents");
            *p = c.cond_var(i);
        }
    }
}

#[test]
fn conditional_coefficients_match_dense_solve() {
    let pts = uniform_points(60, 3, 5);
    let cfg = KernelConfig::new(0.5).unwrap();
    let (g, cond) = graph_and_cond(&pts, 6, &cfg);
    let sigma = dense_prior(&pts, &cfg);
    for i in 0..g.n() {
        let p = g.parents(i);
        if p.is_empty() {
            assert!(rel_err(cond.cond_var(i), sigma[(i, i)]) < 1e-14);
            continue;
        }
        let saa = DMatrix::from_fn(p.len(), p.len(), |a, b| sigma[(p[a], p[b])]);
        let sai = nalgebra::DVector::from_fn(p.len(), |a, _| sigma[(p[a], i)]);
        let b = saa.clone().cholesky().unwrap().solve(&sai);
        for (got, want) in cond.b(i).iter().zip(b.iter()) {
            assert!((got - want).abs() < 1e-6 * want.abs().max(1.0));
        }
        let var = sigma[(i, i)] - sai.dot(&b);
        assert!((cond.cond_var(i) - var).abs() < 1e-9);
    }
}

fn points_strategy() -> impl Strategy<Value = (Points<f64>, usize)> {
    (1usize..120, 1usize..4, 1usize..12, any::<u64>())
        .prop_map(|(n, d, k, seed)| (uniform_points(n, d, seed), k))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parent_sets_have_exact_size_and_point_backwards((pts, k) in points_strategy()) {
        let g = NeighborGraph::build(&pts, k).unwrap();
        g.validate().unwrap();
        for i in 0..g.n() {
            let p = g.parents(i);
            prop_assert_eq!(p.len(), k.min(i));
            prop_assert!(p.iter().all(|&j| j < i));
            prop_assert!(p.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn lower_kernel_neighbors_are_always_kept((pts, k) in points_strategy()) {
        // Any lower-index point among i's k nearest neighbors is an edge, and
        // is kept unless row i was over-full, in which case the smallest
        // indices survive.
        let g = NeighborGraph::build(&pts, k).unwrap();
        let tree = KdTree::build(&pts).unwrap();
        for i in 0..g.n() {
            let near: Vec<usize> = tree.nearest_filtered(pts.point(i), k, |j| j != i).into_iter().map(|nb| nb.index).collect();
            let p = g.parents(i);
            let max_kept = p.last().copied().unwrap_or(0);
            for &j in near.iter().filter(|&&j| j < i) {
                prop_assert!(p.contains(&j) || j > max_kept);
            }
        }
    }

    #[test]
    fn conditionals_are_positive(seed in any::<u64>(), ls in 0.05f64..3.0, k in 1usize..10) {
        let pts = uniform_points(100, 2, seed);
        let cfg = KernelConfig::new(ls).unwrap();
        let (_, c) = graph_and_cond(&pts, k, &cfg);
        for i in 0..c.len() {
            prop_assert!(c.cond_var(i) > 0.0 && c.cond_var(i) <= cfg.self_cov() * (1.0 + 1e-12));
        }
    }
}
