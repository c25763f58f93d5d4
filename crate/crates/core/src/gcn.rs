//! Amortized inference: two graph convolutional networks map the local
//! neighborhood of a point (observations plus prior covariance) to its
//! variational mean and factor row.
//!
//! Each network applies `H' = act(A_hat H W)` with ReLU on hidden layers and
//! identity on the last, where `A_hat = D^{-1/2} A D^{-1/2}` and `A` is the
//! local prior covariance with the row of the target point masked so that
//! the target is distinguishable from its parents.

use rustc_hash::FxHashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::elbo::RowGrads;
use crate::error::{NpviError, Result};
use crate::graph::NeighborGraph;
use crate::kernel::{KernelConfig, Points};
use crate::likelihood::{sigmoid, softplus};
use crate::linalg::DenseMatrix;
use crate::scalar::Scalar;
use crate::variational::FactorRows;

/// Layer widths after the scalar input: hidden 20, hidden 10, output 1.
pub const DEFAULT_WIDTHS: [usize; 3] = [20, 10, 1];

/// Normalized adjacency and node values for one point and its parents.
/// Node 0 is the point itself; nodes `1..` follow the parent order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalContext<T> {
    pub adj_norm: DenseMatrix<T>,
    pub y_local: Vec<T>,
}

impl<T: Scalar> LocalContext<T> {
    pub fn size(&self) -> usize {
        self.y_local.len()
    }
}

/// `points` and `y` are in graph order.
pub fn build_local_context<T: Scalar>(
    i: usize,
    graph: &NeighborGraph,
    points: &Points<T>,
    cfg: &KernelConfig<T>,
    y: &[T],
) -> Result<LocalContext<T>> {
    let alpha = graph.parents(i);
    let m = alpha.len() + 1;
    let node = |a: usize| if a == 0 { i } else { alpha[a - 1] };
    let mut adj = DenseMatrix::zeros(m, m);
    adj[(0, 0)] = cfg.self_cov();
    for a in 1..m {
        for b in 0..m {
            adj[(a, b)] = if a == b {
                cfg.self_cov()
            } else {
                cfg.cov(points.point(node(a)), points.point(node(b)))
            };
        }
    }
    let mut degree = Vec::with_capacity(m);
    for a in 0..m {
        let d: T = adj.row(a).iter().copied().sum();
        if !(d > T::zero()) {
            return Err(NpviError::numerical(format!(
                "local adjacency of point {i} has a non-positive row sum"
            )));
        }
        degree.push(d);
    }
    for a in 0..m {
        for b in 0..m {
            // sqrt(d * d) == d exactly, so a lone node normalizes to 1.
            adj[(a, b)] = adj[(a, b)] / (degree[a] * degree[b]).sqrt();
        }
    }
    Ok(LocalContext {
        adj_norm: adj,
        y_local: (0..m).map(|a| y[node(a)]).collect(),
    })
}

/// Contexts for every point; they depend only on data and kernel.
pub fn build_all_contexts<T: Scalar>(
    graph: &NeighborGraph,
    points: &Points<T>,
    cfg: &KernelConfig<T>,
    y: &[T],
) -> Result<Vec<LocalContext<T>>> {
    use rayon::prelude::*;
    (0..graph.n())
        .into_par_iter()
        .map(|i| build_local_context(i, graph, points, cfg, y))
        .collect()
}

/// One GCN: a stack of weight matrices, no biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnNet<T> {
    pub layers: Vec<DenseMatrix<T>>,
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    /// Input to each layer (`H^(l)`), then the final output.
    activations: Vec<DenseMatrix<T>>,
    /// `A_hat H^(l) W^(l)` before the nonlinearity.
    pre: Vec<DenseMatrix<T>>,
}

impl<T> ForwardCache<T> {
    pub fn output(&self) -> &DenseMatrix<T> {
        self.activations
            .last()
            .expect("forward cache is never empty")
    }
}

impl<T: Scalar> GcnNet<T> {
    /// Glorot-uniform weights for widths `1 -> widths[0] -> ... -> widths[last]`.
    pub fn init<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Self {
        let mut fan_in = 1;
        let layers = widths
            .iter()
            .map(|&fan_out| {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let w = DenseMatrix::from_fn(fan_in, fan_out, |_, _| {
                    T::of(rng.random_range(-bound..bound))
                });
                fan_in = fan_out;
                w
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|w| DenseMatrix::zeros(w.rows(), w.cols()))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut width = 1;
        for (l, w) in self.layers.iter().enumerate() {
            if w.rows() != width {
                return Err(NpviError::input(format!(
                    "layer {l} expects input width {width}, has {}",
                    w.rows()
                )));
            }
            if w.as_slice().iter().any(|v| !v.is_finite()) {
                return Err(NpviError::input(format!(
                    "layer {l} has non-finite weights"
                )));
            }
            width = w.cols();
        }
        if width != 1 || self.layers.is_empty() {
            return Err(NpviError::input(
                "network must end in a single output channel",
            ));
        }
        Ok(())
    }

    pub fn forward(&self, ctx: &LocalContext<T>) -> ForwardCache<T> {
        let m = ctx.size();
        let mut h = DenseMatrix::from_row_major(m, 1, ctx.y_local.clone());
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (l, w) in self.layers.iter().enumerate() {
            let z = ctx.adj_norm.matmul(&h.matmul(w));
            let out = if l == last {
                z.clone()
            } else {
                DenseMatrix::from_fn(z.rows(), z.cols(), |r, c| z[(r, c)].max(T::zero()))
            };
            activations.push(std::mem::replace(&mut h, out));
            pre.push(z);
        }
        activations.push(h);
        ForwardCache { activations, pre }
    }

    /// Output column of the last layer, one value per node.
    pub fn output(&self, ctx: &LocalContext<T>) -> Vec<T> {
        self.forward(ctx).output().as_slice().to_vec()
    }

    /// Accumulates `d loss / d W` into `grads` given `d loss / d output`.
    pub fn backward(
        &self,
        ctx: &LocalContext<T>,
        cache: &ForwardCache<T>,
        d_out: &[T],
        grads: &mut GcnNet<T>,
    ) {
        let m = ctx.size();
        let adj_t = ctx.adj_norm.transpose();
        let mut g = DenseMatrix::from_row_major(m, 1, d_out.to_vec());
        for l in (0..self.layers.len()).rev() {
            if l != self.layers.len() - 1 {
                let z = &cache.pre[l];
                g = DenseMatrix::from_fn(m, g.cols(), |r, c| {
                    if z[(r, c)] > T::zero() {
                        g[(r, c)]
                    } else {
                        T::zero()
                    }
                });
            }
            // pre = A_hat (H W): dW = H^T (A_hat^T G), dH = (A_hat^T G) W^T.
            let ag = adj_t.matmul(&g);
            let h = &cache.activations[l];
            let dw = h.transpose().matmul(&ag);
            for (acc, v) in grads.layers[l].as_mut_slice().iter_mut().zip(dw.as_slice()) {
                *acc += *v;
            }
            if l > 0 {
                g = ag.matmul(&self.layers[l].transpose());
            }
        }
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut [T]> {
        self.layers.iter_mut().map(|w| w.as_mut_slice())
    }

    pub fn params(&self) -> impl Iterator<Item = &[T]> {
        self.layers.iter().map(|w| w.as_slice())
    }
}

/// The mean network and the factor network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnWeights<T> {
    pub mu_net: GcnNet<T>,
    pub l_net: GcnNet<T>,
}

impl<T: Scalar> GcnWeights<T> {
    pub fn init(widths: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mu_net = GcnNet::init(widths, &mut rng);
        let l_net = GcnNet::init(widths, &mut rng);
        Self { mu_net, l_net }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            mu_net: self.mu_net.zeros_like(),
            l_net: self.l_net.zeros_like(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mu_net.validate()?;
        self.l_net.validate()
    }

    /// Named parameter blocks, for the optimizer.
    pub fn blocks_mut(&mut self) -> impl Iterator<Item = (String, &mut [T])> {
        let mu = self
            .mu_net
            .params_mut()
            .enumerate()
            .map(|(l, p)| (format!("mu_net.layer{l}"), p));
        let lf = self
            .l_net
            .params_mut()
            .enumerate()
            .map(|(l, p)| (format!("l_net.layer{l}"), p));
        mu.chain(lf)
    }

    pub fn blocks(&self) -> impl Iterator<Item = &[T]> {
        self.mu_net.params().chain(self.l_net.params())
    }
}

/// Variational parameters of one point produced by the networks.
#[derive(Debug, Clone, PartialEq)]
pub struct InferredRow<T> {
    pub mu: T,
    pub diag: T,
    pub offdiag: Vec<T>,
}

/// `mu_i` is the mean of the mean-network output; the factor-network output
/// is read node by node, softplus on node 0 for `L_ii`, the rest as
/// `L_{i, alpha(i)}`.
pub fn infer_params<T: Scalar>(weights: &GcnWeights<T>, ctx: &LocalContext<T>) -> InferredRow<T> {
    let mu_out = weights.mu_net.output(ctx);
    let l_out = weights.l_net.output(ctx);
    row_from_outputs(&mu_out, &l_out)
}

fn row_from_outputs<T: Scalar>(mu_out: &[T], l_out: &[T]) -> InferredRow<T> {
    let mu = mu_out.iter().copied().sum::<T>() / T::of_usize(mu_out.len());
    InferredRow {
        mu,
        diag: softplus(l_out[0]),
        offdiag: l_out[1..].to_vec(),
    }
}

/// Network outputs for a set of rows, with forward caches for backprop.
pub struct NetworkRows<T> {
    k: usize,
    slots: FxHashMap<usize, usize>,
    rows: Vec<usize>,
    mu: Vec<T>,
    diag: Vec<T>,
    offdiag: Vec<T>,
    caches: Vec<(ForwardCache<T>, ForwardCache<T>)>,
}

impl<T: Scalar> NetworkRows<T> {
    /// Runs both networks for each distinct index in `needed`.
    pub fn materialize(
        weights: &GcnWeights<T>,
        contexts: &[LocalContext<T>],
        k: usize,
        needed: impl IntoIterator<Item = usize>,
    ) -> Self {
        let mut out = Self {
            k,
            slots: FxHashMap::default(),
            rows: Vec::new(),
            mu: Vec::new(),
            diag: Vec::new(),
            offdiag: Vec::new(),
            caches: Vec::new(),
        };
        for i in needed {
            if out.slots.contains_key(&i) {
                continue;
            }
            let ctx = &contexts[i];
            let cm = weights.mu_net.forward(ctx);
            let cl = weights.l_net.forward(ctx);
            let row = row_from_outputs(cm.output().as_slice(), cl.output().as_slice());
            out.slots.insert(i, out.rows.len());
            out.rows.push(i);
            out.mu.push(row.mu);
            out.diag.push(row.diag);
            let mut padded = row.offdiag;
            padded.resize(k, T::zero());
            out.offdiag.extend(padded);
            out.caches.push((cm, cl));
        }
        out
    }

    /// Rows for a batch plus everything the cross term reads (their parents).
    pub fn for_batch(
        weights: &GcnWeights<T>,
        contexts: &[LocalContext<T>],
        graph: &NeighborGraph,
        batch: &[usize],
    ) -> Self {
        let needed = batch
            .iter()
            .flat_map(|&i| std::iter::once(i).chain(graph.parents(i).iter().copied()));
        Self::materialize(weights, contexts, graph.k(), needed)
    }

    pub fn contains(&self, i: usize) -> bool {
        self.slots.contains_key(&i)
    }

    fn slot(&self, i: usize) -> usize {
        *self
            .slots
            .get(&i)
            .unwrap_or_else(|| panic!("row {i} was not materialized"))
    }

    /// Chains row gradients through the output maps and both networks.
    pub fn backward(
        &self,
        weights: &GcnWeights<T>,
        contexts: &[LocalContext<T>],
        row_grads: &RowGrads<T>,
    ) -> GcnWeights<T> {
        let mut grads = weights.zeros_like();
        for (gs, &i) in row_grads.rows.iter().enumerate() {
            let s = self.slot(i);
            let ctx = &contexts[i];
            let (cm, cl) = &self.caches[s];
            let m = ctx.size();

            let dmu = row_grads.mu[gs] / T::of_usize(m);
            let d_mu_out = vec![dmu; m];
            weights
                .mu_net
                .backward(ctx, cm, &d_mu_out, &mut grads.mu_net);

            let l_out = cl.output().as_slice();
            let mut d_l_out = Vec::with_capacity(m);
            d_l_out.push(row_grads.diag[gs] * sigmoid(l_out[0]));
            d_l_out.extend_from_slice(&row_grads.offdiag_slot(gs)[..m - 1]);
            weights.l_net.backward(ctx, cl, &d_l_out, &mut grads.l_net);
        }
        grads
    }
}

impl<T: Scalar> FactorRows<T> for NetworkRows<T> {
    fn mean(&self, i: usize) -> T {
        self.mu[self.slot(i)]
    }

    fn diag(&self, i: usize) -> T {
        self.diag[self.slot(i)]
    }

    fn offdiag(&self, i: usize) -> &[T] {
        let s = self.slot(i);
        let m = self.caches[s].1.output().rows() - 1;
        &self.offdiag[s * self.k..s * self.k + m]
    }
}
