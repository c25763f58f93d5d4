//! Analytic ELBO gradients against central finite differences, with the
//! Monte Carlo noise held fixed.

use nalgebra::DMatrix;
use npvi::elbo::{
    estimate_cross, estimate_elbo, estimate_ell, estimate_entropy, BatchNoise, RowGrads,
    TermBreakdown,
};
use npvi::gcn::{build_all_contexts, GcnWeights, LocalContext, NetworkRows};
use npvi::graph::{NeighborGraph, VecchiaConditionals};
use npvi::kernel::KernelConfig;
use npvi::likelihood::Likelihood;
use npvi::variational::FactorRows;
use npvi::variational::VariationalParams;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{graph_and_cond, rel_err, to_dmatrix, uniform_points};

const N: usize = 30;
const K: usize = 5;
/// Absolute floor below which a partial counts as zero on both sides.
const ZERO: f64 = 1e-9;

pub struct Instance {
    pub graph: NeighborGraph,
    pub cond: VecchiaConditionals<f64>,
    pub points: npvi::kernel::Points<f64>,
    pub kernel: KernelConfig<f64>,
    pub lik: Likelihood<f64>,
    pub y: Vec<f64>,
    pub batch: Vec<usize>,
    pub noise: BatchNoise<f64>,
}

fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = uniform_points(N, 2, seed);
    let kernel = KernelConfig::new(rng.random_range(0.1..0.3)).unwrap();
    let (graph, cond) = graph_and_cond(&points, K, &kernel);
    let lik = match seed % 3 {
        0 => Likelihood::poisson(),
        1 => Likelihood::lognormal(0.3).unwrap(),
        _ => Likelihood::gaussian(0.5).unwrap(),
    };
    let y: Vec<f64> = (0..N)
        .map(|_| match seed % 3 {
            0 => rng.random_range(0..5) as f64,
            1 => rng.random_range(0.2..3.0),
            _ => rng.random_range(-2.0..2.0),
        })
        .collect();
    let batch = sample(&mut rng, N, 8).into_vec();
    let noise = BatchNoise::draw(&mut rng, &batch, &graph, 2);
    Instance {
        graph,
        cond,
        points,
        kernel,
        lik,
        y,
        batch,
        noise,
    }
}

fn random_params(inst: &Instance, rng: &mut ChaCha8Rng) -> VariationalParams<f64> {
    super::random_params(&inst.graph, &inst.cond, rng)
}

/// Likelihood, cross and entropy values.
type Terms = [f64; 3];

/// Contribution of each batch point to the three batch terms (the entropy
/// without its parameter-free constant). Differencing per point keeps the
/// rounding error at the scale of the affected terms only.
fn point_terms<R: FactorRows<f64>>(inst: &Instance, rows: &R) -> Vec<Terms> {
    let share = 1.0 / inst.batch.len() as f64;
    let ent_const =
        0.5 * inst.graph.n() as f64 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    inst.batch
        .iter()
        .enumerate()
        .map(|(p, &i)| {
            let one = [i];
            let noise = BatchNoise {
                mc: inst.noise.mc,
                draws: vec![inst.noise.draws[p].clone()],
            };
            [
                share * estimate_ell(&one, rows, &inst.graph, &inst.lik, &inst.y, &noise).value,
                share * estimate_cross(&one, rows, &inst.graph, &inst.cond).value,
                share * (estimate_entropy(&one, rows, &inst.graph).value - ent_const),
            ]
        })
        .collect()
}

/// Per-point contributions add up to the batch estimate.
fn assert_decomposition(inst: &Instance, total: &TermBreakdown<f64>, points: &[Terms]) {
    let ent_const =
        0.5 * inst.graph.n() as f64 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    let sum = |t: usize| points.iter().map(|p| p[t]).sum::<f64>();
    for (t, want) in [total.ell, total.cross, total.ent - ent_const]
        .into_iter()
        .enumerate()
    {
        assert!(
            rel_err(sum(t), want) < 1e-10,
            "term {t}: {} vs {want}",
            sum(t)
        );
    }
}

/// Step per term: the cross term is exactly quadratic in every raw
/// parameter, so a large step is exact; the others use an extrapolated
/// central difference.
const STEPS: [f64; 3] = [1e-4, 0.5, 1e-4];
const TERM_NAMES: [&str; 3] = ["likelihood", "cross", "entropy"];

fn check(
    label: &str,
    analytic: Terms,
    f: impl Fn(f64) -> Vec<Terms>,
    steps: [f64; 3],
    richardson: [bool; 3],
    worst: &mut f64,
) {
    for t in 0..3 {
        let h = steps[t];
        let central = |h: f64| {
            let (up, down) = (f(h), f(-h));
            up.iter().zip(&down).map(|(u, d)| u[t] - d[t]).sum::<f64>() / (2.0 * h)
        };
        let fd = if richardson[t] {
            (4.0 * central(h / 2.0) - central(h)) / 3.0
        } else {
            central(h)
        };
        let a = analytic[t];
        if a.abs() < ZERO && fd.abs() < ZERO {
            continue;
        }
        let e = rel_err(a, fd);
        assert!(
            e <= 1e-4,
            "{label} ({} term): analytic {a:e} vs finite difference {fd:e} (rel {e:e})",
            TERM_NAMES[t]
        );
        *worst = worst.max(e);
    }
}

fn per_term_grads<R: npvi::variational::FactorRows<f64>>(
    inst: &Instance,
    rows: &R,
) -> [RowGrads<f64>; 3] {
    let ell = estimate_ell(
        &inst.batch,
        rows,
        &inst.graph,
        &inst.lik,
        &inst.y,
        &inst.noise,
    )
    .grads;
    let cross = estimate_cross(&inst.batch, rows, &inst.graph, &inst.cond).grads;
    let ent = estimate_entropy(&inst.batch, rows, &inst.graph).grads;
    [ell, cross, ent]
}

/// The full estimate's gradient is the sum of the per-term gradients.
fn assert_sum(total: &RowGrads<f64>, parts: &[RowGrads<f64>; 3]) {
    let mut sum = RowGrads::new(total.k());
    for p in parts {
        sum.merge(p);
    }
    for &row in &total.rows {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()));
        assert!(close(total.mu_of(row), sum.mu_of(row)));
        assert!(close(total.diag_of(row), sum.diag_of(row)));
        for a in 0..total.k() {
            assert!(close(total.offdiag_of(row, a), sum.offdiag_of(row, a)));
        }
    }
    assert_eq!(total.rows.len(), sum.rows.len());
}

/// Every partial of the direct-parameter ELBO; returns the worst relative error.
pub fn npvi_gradient_check(seed: u64) -> f64 {
    let inst = instance(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let p = random_params(&inst, &mut rng);
    let terms = |q: &VariationalParams<f64>| point_terms(&inst, &q.rows(&inst.graph));
    let rows = p.rows(&inst.graph);
    let total = estimate_elbo(
        &inst.batch,
        &rows,
        &inst.graph,
        &inst.cond,
        &inst.lik,
        &inst.y,
        &inst.noise,
    );
    assert_decomposition(&inst, &total.terms, &terms(&p));
    let parts = per_term_grads(&inst, &rows);
    assert_sum(&total.grads, &parts);
    let rich = [true, false, true];
    let mut worst = 0.0f64;
    for i in 0..N {
        check(
            &format!("mu[{i}]"),
            parts.each_ref().map(|g| g.mu_of(i)),
            |h| {
                let mut q = p.clone();
                q.mu[i] += h;
                terms(&q)
            },
            STEPS,
            rich,
            &mut worst,
        );
        // The entropy's log is only defined for positive L_ii, so the
        // diagonal uses small steps on every term.
        let d = p.logdiag(i).exp();
        check(
            &format!("L[{i},{i}]"),
            parts.each_ref().map(|g| g.diag_of(i)),
            |h| {
                let mut q = p.clone();
                *q.logdiag_mut(i) = (d + h).ln();
                terms(&q)
            },
            [1e-4, 1e-4 * d, 1e-4 * d],
            [true; 3],
            &mut worst,
        );
        let m = inst.graph.num_parents(i);
        for a in 0..m {
            check(
                &format!("L[{i},parent {a}]"),
                parts.each_ref().map(|g| g.offdiag_of(i, a)),
                |h| {
                    let mut q = p.clone();
                    q.offdiag_row_mut(i, m)[a] += h;
                    terms(&q)
                },
                STEPS,
                rich,
                &mut worst,
            );
        }
    }
    worst
}

/// Signs of every hidden pre-activation of both networks over `rows`,
/// from an independent forward pass.
fn relu_pattern(w: &GcnWeights<f64>, ctx: &[LocalContext<f64>], rows: &[usize]) -> Vec<bool> {
    let mut signs = Vec::new();
    for net in [&w.mu_net, &w.l_net] {
        for &i in rows {
            let c = to_dmatrix(&ctx[i].adj_norm);
            let mut h = DMatrix::from_column_slice(ctx[i].size(), 1, &ctx[i].y_local);
            let last = net.layers.len() - 1;
            for layer in &net.layers[..last] {
                let z = &c * &h * to_dmatrix(layer);
                signs.extend(z.iter().map(|&v| v > 0.0));
                h = z.map(|v| v.max(0.0));
            }
        }
    }
    signs
}

/// Every weight partial of the network ELBO; returns the worst relative error.
pub fn network_gradient_check(seed: u64) -> f64 {
    let inst = instance(seed);
    let ctx = build_all_contexts(&inst.graph, &inst.points, &inst.kernel, &inst.y).unwrap();
    let mut w = GcnWeights::init(&[20, 10, 1], seed);
    // Smaller factor rows keep the cross term, and its rounding error, moderate.
    for v in w.l_net.layers.last_mut().unwrap().as_mut_slice() {
        *v *= 0.1;
    }
    let terms = |w: &GcnWeights<f64>| {
        point_terms(
            &inst,
            &NetworkRows::for_batch(w, &ctx, &inst.graph, &inst.batch),
        )
    };
    let rows = NetworkRows::for_batch(&w, &ctx, &inst.graph, &inst.batch);
    let total = estimate_elbo(
        &inst.batch,
        &rows,
        &inst.graph,
        &inst.cond,
        &inst.lik,
        &inst.y,
        &inst.noise,
    );
    assert_decomposition(&inst, &total.terms, &terms(&w));
    let parts = per_term_grads(&inst, &rows);
    assert_sum(&total.grads, &parts);
    let weight_grads: Vec<Vec<Vec<f64>>> = parts
        .iter()
        .map(|g| {
            rows.backward(&w, &ctx, g)
                .blocks()
                .map(<[f64]>::to_vec)
                .collect()
        })
        .collect();
    let mut touched: Vec<usize> = inst
        .batch
        .iter()
        .flat_map(|&i| std::iter::once(i).chain(inst.graph.parents(i).iter().copied()))
        .collect();
    touched.sort_unstable();
    touched.dedup();
    let base = relu_pattern(&w, &ctx, &touched);
    let perturbed = |b: usize, e: usize, h: f64| {
        let mut q = w.clone();
        q.blocks_mut().nth(b).unwrap().1[e] += h;
        q
    };
    let mut worst = 0.0f64;
    let n_blocks = weight_grads[0].len();
    for b in 0..n_blocks {
        for e in 0..weight_grads[0][b].len() {
            let analytic = [
                weight_grads[0][b][e],
                weight_grads[1][b][e],
                weight_grads[2][b][e],
            ];
            // Largest step whose evaluations all keep every ReLU on the
            // same side of its kink.
            let step = [1e-3, 1e-4, 1e-5, 1e-6]
                .into_iter()
                .find(|&h| {
                    [h, -h, h / 2.0, -h / 2.0]
                        .iter()
                        .all(|&d| relu_pattern(&perturbed(b, e, d), &ctx, &touched) == base)
                })
                .unwrap_or(1e-6);
            check(
                &format!("block {b} weight {e}"),
                analytic,
                |h| terms(&perturbed(b, e, h)),
                [step; 3],
                [true; 3],
                &mut worst,
            );
        }
    }
    worst
}
