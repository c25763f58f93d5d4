//! Predictive distribution of the latent value at new inputs and its Monte
//! Carlo predictive log-likelihood.
//!
//! A test point conditions on its `k` nearest training points `A`, mirroring
//! the factorized training prior: with `b = Sigma_{*A} Sigma_{AA}^{-1}` and
//! conditional variance `s2`, the latent predictive is
//! `N(b^T mu_A, s2 + b^T V_AA b)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NpviError, Result};
use crate::gcn::{GcnWeights, LocalContext, NetworkRows};
use crate::graph::{condition_on, NeighborGraph};
use crate::kernel::{KernelConfig, Points};
use crate::knn::KdTree;
use crate::likelihood::Likelihood;
use crate::scalar::{log_sum_exp, Scalar};
use crate::variational::{covariance_entry, FactorRows, VariationalParams};

pub const DEFAULT_PREDICTIVE_SAMPLES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveLatent<T> {
    pub mean: T,
    pub variance: T,
    /// Training indices (graph order) conditioned on.
    pub neighbors: Vec<usize>,
}

/// Variational state of a model: direct parameters or network weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum ModelState<T> {
    Npvi { params: VariationalParams<T> },
    NpviNn { weights: GcnWeights<T> },
}

/// Everything prediction needs, borrowed from a trainer or a fitted model.
/// Training arrays are in graph order.
#[derive(Clone, Copy)]
pub struct ModelView<'a, T> {
    pub kernel: &'a KernelConfig<T>,
    pub likelihood: &'a Likelihood<T>,
    pub train_x: &'a Points<T>,
    pub graph: &'a NeighborGraph,
    pub tree: &'a KdTree<T>,
    pub state: &'a ModelState<T>,
    /// Required for network models.
    pub contexts: Option<&'a [LocalContext<T>]>,
}

impl<'a, T: Scalar> ModelView<'a, T> {
    fn neighbors(&self, x: &[T]) -> Result<Vec<usize>> {
        if x.len() != self.train_x.dim() {
            return Err(NpviError::input(format!(
                "test point has dimension {} but the model was trained on dimension {}",
                x.len(),
                self.train_x.dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(NpviError::input("test point has non-finite coordinates"));
        }
        let k = self.graph.k().min(self.train_x.len());
        let mut nb: Vec<usize> = self
            .tree
            .nearest(x, k)
            .into_iter()
            .map(|n| n.index)
            .collect();
        nb.sort_unstable();
        Ok(nb)
    }

    fn latent_from_rows(
        &self,
        x: &[T],
        neighbors: Vec<usize>,
        rows: &impl FactorRows<T>,
    ) -> Result<PredictiveLatent<T>> {
        let (b, s2) = condition_on(
            self.kernel,
            self.train_x,
            &neighbors,
            x,
            self.kernel.self_cov(),
        )
        .map_err(|_| {
            NpviError::numerical(
                "prior covariance of the test point's neighbors is not positive definite",
            )
        })?;
        let mean = b
            .iter()
            .zip(&neighbors)
            .fold(T::zero(), |acc, (&w, &j)| acc + w * rows.mean(j));
        let mut quad = T::zero();
        for (a, &ja) in neighbors.iter().enumerate() {
            quad += b[a] * b[a] * covariance_entry(rows, self.graph, ja, ja);
            for (c, &jc) in neighbors.iter().enumerate().take(a) {
                quad += T::of(2.0) * b[a] * b[c] * covariance_entry(rows, self.graph, ja, jc);
            }
        }
        Ok(PredictiveLatent {
            mean,
            variance: s2 + quad,
            neighbors,
        })
    }

    fn check_fitted(&self) -> Result<()> {
        if self.train_x.is_empty() || self.graph.n() != self.train_x.len() {
            return Err(NpviError::State("model has no usable training set".into()));
        }
        if matches!(self.state, ModelState::NpviNn { .. }) && self.contexts.is_none() {
            return Err(NpviError::State(
                "network model has no local contexts".into(),
            ));
        }
        Ok(())
    }

    pub fn predict_latent(&self, x: &[T]) -> Result<PredictiveLatent<T>> {
        Ok(self.predict_many(&[x])?.remove(0))
    }

    /// Latent predictives for several points. Network rows are materialized
    /// once for the union of all neighbor sets.
    pub fn predict_many(&self, xs: &[&[T]]) -> Result<Vec<PredictiveLatent<T>>> {
        self.check_fitted()?;
        let neighbor_sets: Vec<Vec<usize>> = xs
            .par_iter()
            .map(|x| self.neighbors(x))
            .collect::<Result<_>>()?;
        match self.state {
            ModelState::Npvi { params } => {
                let rows = params.rows(self.graph);
                xs.par_iter()
                    .zip(neighbor_sets)
                    .map(|(x, nb)| self.latent_from_rows(x, nb, &rows))
                    .collect()
            }
            ModelState::NpviNn { weights } => {
                let contexts = self.contexts.expect("checked above");
                let mut needed: Vec<usize> = neighbor_sets.iter().flatten().copied().collect();
                needed.sort_unstable();
                needed.dedup();
                let rows = NetworkRows::materialize(weights, contexts, self.graph.k(), needed);
                xs.iter()
                    .zip(neighbor_sets)
                    .map(|(x, nb)| self.latent_from_rows(x, nb, &rows))
                    .collect()
            }
        }
    }

    /// Mean negative predictive log-likelihood over a labelled set. Point `i`
    /// uses its own random stream derived from `seed`.
    pub fn mean_nll(&self, x: &Points<T>, y: &[T], n_samples: usize, seed: u64) -> Result<T> {
        let (nll, _) = self.nll_per_point(x, y, n_samples, seed)?;
        Ok(nll)
    }

    /// Mean NLL and the per-point values.
    pub fn nll_per_point(
        &self,
        x: &Points<T>,
        y: &[T],
        n_samples: usize,
        seed: u64,
    ) -> Result<(T, Vec<T>)> {
        if x.len() != y.len() || x.is_empty() {
            return Err(NpviError::input(
                "evaluation set is empty or has mismatched lengths",
            ));
        }
        let pts: Vec<&[T]> = x.iter().collect();
        let latents = self.predict_many(&pts)?;
        let per_point: Vec<T> = latents
            .par_iter()
            .zip(y.par_iter())
            .enumerate()
            .map(|(i, (lat, &yi))| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                predictive_log_prob(lat, yi, self.likelihood, n_samples, &mut rng).map(|v| -v)
            })
            .collect::<Result<_>>()?;
        let mean = per_point.iter().copied().sum::<T>() / T::of_usize(per_point.len());
        Ok((mean, per_point))
    }
}

/// `log((1/S) sum_s p(y | f_s))` with `f_s ~ N(mean, variance)`.
pub fn predictive_log_prob<T: Scalar, R: rand::Rng + ?Sized>(
    latent: &PredictiveLatent<T>,
    y: T,
    lik: &Likelihood<T>,
    n_samples: usize,
    rng: &mut R,
) -> Result<T> {
    if n_samples == 0 {
        return Err(NpviError::input(
            "predictive log-likelihood needs at least one sample",
        ));
    }
    lik.check_target(y)?;
    if latent.variance <= T::zero() {
        return Ok(lik.log_prob_unchecked(y, latent.mean));
    }
    let sd = latent.variance.sqrt();
    let terms: Vec<T> = (0..n_samples)
        .map(|_| lik.log_prob_unchecked(y, latent.mean + sd * T::standard_normal(rng)))
        .collect();
    Ok(log_sum_exp(&terms) - T::of_usize(n_samples).ln())
}
