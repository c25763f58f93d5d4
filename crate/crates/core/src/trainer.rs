//! Stochastic ELBO maximization with AdaGrad, for direct variational
//! parameters (`npvi`) and for the amortized network (`npvi_nn`).

use std::borrow::Cow;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{permutation, Dataset, Preprocessing};
use crate::elbo::{estimate_elbo, BatchNoise};
use crate::error::{NpviError, Result};
use crate::gcn::{
    build_all_contexts, infer_params, GcnWeights, LocalContext, NetworkRows, DEFAULT_WIDTHS,
};
use crate::graph::{NeighborGraph, VecchiaConditionals};
use crate::kernel::{KernelConfig, Points};
use crate::knn::KdTree;
use crate::likelihood::Likelihood;
use crate::optim::adagrad_step;
use crate::predictor::{ModelState, ModelView, DEFAULT_PREDICTIVE_SAMPLES};
use crate::scalar::Scalar;
use crate::variational::VariationalParams;

/// Offset mixed into the seed for validation Monte Carlo draws.
const EVAL_SEED_OFFSET: u64 = 0x5eed_0f_e7a1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Npvi,
    NpviNn,
}

impl std::str::FromStr for Method {
    type Err = NpviError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "npvi" => Ok(Method::Npvi),
            "npvi-nn" | "npvi_nn" => Ok(Method::NpviNn),
            other => Err(NpviError::input(format!(
                "unknown method '{other}' (expected npvi or npvi-nn)"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Npvi => "npvi",
            Method::NpviNn => "npvi-nn",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct TrainConfig<T> {
    pub method: Method,
    pub k: usize,
    pub learning_rate: T,
    pub batch_size: usize,
    /// Wall-clock budget for the whole run.
    pub max_seconds: f64,
    pub max_epochs: Option<usize>,
    pub max_steps: Option<usize>,
    /// Steps between validation evaluations.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Monte Carlo draws per point for the likelihood term.
    pub mc_samples: usize,
    /// Monte Carlo draws per point for validation NLL.
    pub val_samples: usize,
    /// Shuffle the training points with this seed before building the graph.
    pub order_seed: Option<u64>,
    pub gcn_widths: Vec<usize>,
}

impl<T: Scalar> TrainConfig<T> {
    /// Defaults: learning rate 0.2 (`npvi`) or 0.1 (`npvi_nn`), batches of 50,
    /// one likelihood sample per point, evaluation every 200 steps with
    /// patience 10, one hour budget.
    pub fn new(method: Method, k: usize) -> Self {
        Self {
            method,
            k,
            learning_rate: T::of(match method {
                Method::Npvi => 0.2,
                Method::NpviNn => 0.1,
            }),
            batch_size: 50,
            max_seconds: 3600.0,
            max_epochs: None,
            max_steps: None,
            eval_every: 200,
            patience: 10,
            seed: 0,
            mc_samples: 1,
            val_samples: 200,
            order_seed: None,
            gcn_widths: DEFAULT_WIDTHS.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NpviError::input(m.to_owned()));
        if self.k == 0 {
            return bad("k must be >= 1");
        }
        if !(self.learning_rate >= T::zero()) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be non-negative and finite");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.mc_samples == 0 || self.val_samples == 0 {
            return bad("sample counts must be >= 1");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1");
        }
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        if !(self.max_seconds > 0.0) {
            return bad("max_seconds must be positive");
        }
        if self.gcn_widths.last() != Some(&1) {
            return bad("the last GCN layer must have width 1");
        }
        if self.gcn_widths.contains(&0) {
            return bad("GCN layer widths must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub seconds: f64,
    /// Mean batch ELBO estimate since the previous record.
    pub elbo_estimate: Option<f64>,
    pub val_nll: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
    pub steps: usize,
    pub epochs: f64,
    /// Time spent inside optimization steps, excluding evaluation.
    pub step_seconds: f64,
    pub best_step: usize,
    pub best_val_nll: f64,
    pub stop_reason: String,
    /// Per-step batch ELBO estimates.
    #[serde(skip)]
    pub step_elbo: Vec<f64>,
}

impl TrainingLog {
    /// One JSON object per line: step, seconds, elbo_estimate, val_nll.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| NpviError::input(e.to_string()))?;
            writeln!(out, "{line}")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Training points in graph order, with the DAG and a spatial index.
/// Depends only on the inputs, `k` and the ordering, so it can be shared
/// across kernel settings.
#[derive(Debug, Clone)]
pub struct PreparedData<T> {
    pub x: Points<T>,
    pub y: Vec<T>,
    pub graph: NeighborGraph,
    pub tree: KdTree<T>,
}

impl<T: Scalar> PreparedData<T> {
    pub fn new(train: &Dataset<T>, k: usize, order_seed: Option<u64>) -> Result<Self> {
        train.validate()?;
        if train.is_empty() {
            return Err(NpviError::input("training set is empty"));
        }
        let order = match order_seed {
            Some(s) => permutation(train.len(), s),
            None => (0..train.len()).collect(),
        };
        let x = train.x.select(&order);
        let y: Vec<T> = order.iter().map(|&i| train.y[i]).collect();
        let tree = KdTree::build(&x)?;
        let mut graph = NeighborGraph::build_with_tree(&x, &tree, k)?;
        if order_seed.is_some() {
            graph = graph.with_order(order)?;
        }
        Ok(Self { x, y, graph, tree })
    }
}

#[derive(Debug, Clone)]
struct Best<T> {
    val_nll: T,
    step: usize,
    state: ModelState<T>,
}

/// Training state that can be advanced one step at a time.
pub struct Trainer<T: Scalar> {
    cfg: TrainConfig<T>,
    kernel: KernelConfig<T>,
    lik: Likelihood<T>,
    data: PreparedData<T>,
    cond: VecchiaConditionals<T>,
    contexts: Option<Vec<LocalContext<T>>>,
    state: ModelState<T>,
    accum: ModelState<T>,
    val_x: Points<T>,
    val_y: Vec<T>,
    rng: ChaCha8Rng,
    epoch_order: Vec<usize>,
    cursor: usize,
    steps: usize,
    epochs_done: usize,
    log: TrainingLog,
    elbo_since_record: (f64, usize),
    best: Option<Best<T>>,
    evals_since_best: usize,
    step_time: Duration,
    started: Instant,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(
        train: &Dataset<T>,
        val: &Dataset<T>,
        cfg: TrainConfig<T>,
        kernel: KernelConfig<T>,
        lik: Likelihood<T>,
    ) -> Result<Self> {
        cfg.validate()?;
        let data = PreparedData::new(train, cfg.k, cfg.order_seed)?;
        Self::from_prepared(data, val, cfg, kernel, lik)
    }

    /// Starts from an already built graph; `data` must match `cfg.k` and
    /// `cfg.order_seed`.
    pub fn from_prepared(
        data: PreparedData<T>,
        val: &Dataset<T>,
        cfg: TrainConfig<T>,
        kernel: KernelConfig<T>,
        lik: Likelihood<T>,
    ) -> Result<Self> {
        cfg.validate()?;
        kernel.validate()?;
        lik.validate()?;
        if data.graph.k() != cfg.k {
            return Err(NpviError::input(
                "prepared graph was built with a different k",
            ));
        }
        lik.check_targets(&data.y)?;
        val.validate()?;
        if val.is_empty() {
            return Err(NpviError::input("validation set is empty"));
        }
        if val.dim() != data.x.dim() {
            return Err(NpviError::input(
                "validation and training dimensions differ",
            ));
        }
        lik.check_targets(&val.y)?;

        let cond = VecchiaConditionals::compute(&data.graph, &data.x, &kernel)?;
        let (state, accum, contexts) = match cfg.method {
            Method::Npvi => {
                let p = VariationalParams::prior_init(&data.graph, &cond);
                let acc = VariationalParams::identity(&data.graph);
                (
                    ModelState::Npvi { params: p },
                    ModelState::Npvi { params: acc },
                    None,
                )
            }
            Method::NpviNn => {
                let w = GcnWeights::init(&cfg.gcn_widths, cfg.seed);
                let acc = w.zeros_like();
                let ctx = build_all_contexts(&data.graph, &data.x, &kernel, &data.y)?;
                (
                    ModelState::NpviNn { weights: w },
                    ModelState::NpviNn { weights: acc },
                    Some(ctx),
                )
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut epoch_order: Vec<usize> = (0..data.graph.n()).collect();
        epoch_order.shuffle(&mut rng);
        Ok(Self {
            kernel,
            lik,
            cond,
            contexts,
            state,
            accum,
            val_x: val.x.clone(),
            val_y: val.y.clone(),
            rng,
            epoch_order,
            cursor: 0,
            steps: 0,
            epochs_done: 0,
            log: TrainingLog::default(),
            elbo_since_record: (0.0, 0),
            best: None,
            evals_since_best: 0,
            step_time: Duration::ZERO,
            started: Instant::now(),
            data,
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig<T> {
        &self.cfg
    }

    pub fn graph(&self) -> &NeighborGraph {
        &self.data.graph
    }

    pub fn conditionals(&self) -> &VecchiaConditionals<T> {
        &self.cond
    }

    pub fn state(&self) -> &ModelState<T> {
        &self.state
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data.graph.n().div_ceil(self.cfg.batch_size)
    }

    /// Cumulative time spent in [`Trainer::step`].
    pub fn step_time(&self) -> Duration {
        self.step_time
    }

    pub fn view(&self) -> ModelView<'_, T> {
        ModelView {
            kernel: &self.kernel,
            likelihood: &self.lik,
            train_x: &self.data.x,
            graph: &self.data.graph,
            tree: &self.data.tree,
            state: &self.state,
            contexts: self.contexts.as_deref(),
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let n = self.epoch_order.len();
        if self.cursor >= n {
            self.epoch_order.shuffle(&mut self.rng);
            self.cursor = 0;
            self.epochs_done += 1;
        }
        let end = (self.cursor + self.cfg.batch_size).min(n);
        let batch = self.epoch_order[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }

    /// One optimization step; returns the batch ELBO estimate.
    pub fn step(&mut self) -> Result<T> {
        let t0 = Instant::now();
        let batch = self.next_batch();
        let graph = &self.data.graph;
        let noise = BatchNoise::draw(&mut self.rng, &batch, graph, self.cfg.mc_samples);
        let lr = self.cfg.learning_rate;
        let value = match (&mut self.state, &mut self.accum) {
            (ModelState::Npvi { params }, ModelState::Npvi { params: acc }) => {
                let est = estimate_elbo(
                    &batch,
                    &params.rows(graph),
                    graph,
                    &self.cond,
                    &self.lik,
                    &self.data.y,
                    &noise,
                );
                let g = &est.grads;
                if !g.all_finite() {
                    return Err(NpviError::numerical(format!(
                        "non-finite ELBO gradient at step {}",
                        self.steps + 1
                    )));
                }
                for (s, &i) in g.rows.iter().enumerate() {
                    let m = graph.num_parents(i);
                    adagrad_step(
                        &mut params.mu[i..=i],
                        &[g.mu[s]],
                        &mut acc.mu[i..=i],
                        lr,
                        "mu",
                    )?;
                    let dlog = g.diag[s] * params.logdiag(i).exp();
                    adagrad_step(
                        std::slice::from_mut(params.logdiag_mut(i)),
                        &[dlog],
                        std::slice::from_mut(acc.logdiag_mut(i)),
                        lr,
                        "L_logdiag",
                    )?;
                    adagrad_step(
                        params.offdiag_row_mut(i, m),
                        &g.offdiag_slot(s)[..m],
                        acc.offdiag_row_mut(i, m),
                        lr,
                        "L_offdiag",
                    )?;
                }
                est.value
            }
            (ModelState::NpviNn { weights }, ModelState::NpviNn { weights: acc }) => {
                let contexts = self
                    .contexts
                    .as_deref()
                    .expect("network trainer has contexts");
                let rows = NetworkRows::for_batch(weights, contexts, graph, &batch);
                let est = estimate_elbo(
                    &batch,
                    &rows,
                    graph,
                    &self.cond,
                    &self.lik,
                    &self.data.y,
                    &noise,
                );
                if !est.grads.all_finite() {
                    return Err(NpviError::numerical(format!(
                        "non-finite ELBO gradient at step {}",
                        self.steps + 1
                    )));
                }
                let wg = rows.backward(weights, contexts, &est.grads);
                for ((name, p), (g, a)) in weights
                    .blocks_mut()
                    .zip(wg.blocks().zip(acc.blocks_mut().map(|b| b.1)))
                {
                    adagrad_step(p, g, a, lr, &name)?;
                }
                est.value
            }
            _ => unreachable!("state and accumulator always share a method"),
        };
        self.steps += 1;
        let v = value.to_f64_lossless();
        self.log.step_elbo.push(v);
        self.elbo_since_record.0 += v;
        self.elbo_since_record.1 += 1;
        self.step_time += t0.elapsed();
        Ok(value)
    }

    /// Validation NLL of the current state, with fixed Monte Carlo draws.
    pub fn evaluate(&self) -> Result<T> {
        self.view().mean_nll(
            &self.val_x,
            &self.val_y,
            self.cfg.val_samples,
            self.cfg.seed ^ EVAL_SEED_OFFSET,
        )
    }

    /// Evaluates, appends a log record and updates the best snapshot.
    /// Returns whether the state improved on the best so far.
    pub fn record(&mut self) -> Result<bool> {
        let nll = self.evaluate()?;
        let (sum, count) = std::mem::take(&mut self.elbo_since_record);
        self.log.records.push(LogRecord {
            step: self.steps,
            seconds: self.started.elapsed().as_secs_f64(),
            elbo_estimate: (count > 0).then(|| sum / count as f64),
            val_nll: nll.to_f64_lossless(),
        });
        let improved = self.best.as_ref().is_none_or(|b| nll < b.val_nll);
        if improved {
            self.best = Some(Best {
                val_nll: nll,
                step: self.steps,
                state: self.state.clone(),
            });
            self.evals_since_best = 0;
        } else {
            self.evals_since_best += 1;
        }
        Ok(improved)
    }

    /// Runs until patience, the step/epoch limits or the time budget is
    /// exhausted, evaluating every `eval_every` steps.
    pub fn run(mut self) -> Result<FittedModel<T>> {
        self.started = Instant::now();
        self.record()?;
        let per_epoch = self.steps_per_epoch();
        let reason = loop {
            if self.cfg.max_steps.is_some_and(|m| self.steps >= m) {
                break "max_steps";
            }
            if self
                .cfg
                .max_epochs
                .is_some_and(|e| self.steps >= e * per_epoch)
            {
                break "max_epochs";
            }
            if self.started.elapsed().as_secs_f64() >= self.cfg.max_seconds {
                break "max_seconds";
            }
            self.step()?;
            if self.steps % self.cfg.eval_every == 0 {
                self.record()?;
                if self.evals_since_best >= self.cfg.patience {
                    break "patience";
                }
            }
        };
        if self.log.records.last().map(|r| r.step) != Some(self.steps) {
            self.record()?;
        }
        self.log.stop_reason = reason.to_owned();
        Ok(self.finish())
    }

    /// Model from the best validated state.
    pub fn finish(mut self) -> FittedModel<T> {
        let best = self.best.take().unwrap_or(Best {
            val_nll: T::nan(),
            step: self.steps,
            state: self.state.clone(),
        });
        self.log.steps = self.steps;
        self.log.epochs = self.steps as f64 / self.steps_per_epoch() as f64;
        self.log.step_seconds = self.step_time.as_secs_f64();
        self.log.best_step = best.step;
        self.log.best_val_nll = best.val_nll.to_f64_lossless();
        let model = FittedModel {
            kernel: self.kernel,
            likelihood: self.lik,
            train_x: self.data.x,
            train_y: self.data.y,
            graph: self.data.graph,
            conditionals: self.cond,
            state: best.state,
            log: self.log,
            preprocessing: None,
            tree: OnceLock::new(),
            contexts: OnceLock::new(),
        };
        let _ = model.tree.set(self.data.tree);
        if let Some(ctx) = self.contexts {
            let _ = model.contexts.set(ctx);
        }
        model
    }
}

/// Trains on `train`, validating on `val`.
pub fn fit<T: Scalar>(
    train: &Dataset<T>,
    val: &Dataset<T>,
    cfg: TrainConfig<T>,
    kernel: KernelConfig<T>,
    lik: Likelihood<T>,
) -> Result<FittedModel<T>> {
    Trainer::new(train, val, cfg, kernel, lik)?.run()
}

/// A trained model with everything needed for prediction. Training arrays
/// are stored in graph order.
#[derive(Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct FittedModel<T: Scalar> {
    pub kernel: KernelConfig<T>,
    pub likelihood: Likelihood<T>,
    pub train_x: Points<T>,
    pub train_y: Vec<T>,
    pub graph: NeighborGraph,
    pub conditionals: VecchiaConditionals<T>,
    pub state: ModelState<T>,
    pub log: TrainingLog,
    /// Input/target transforms the training data went through.
    pub preprocessing: Option<Preprocessing<T>>,
    #[serde(skip)]
    tree: OnceLock<KdTree<T>>,
    #[serde(skip)]
    contexts: OnceLock<Vec<LocalContext<T>>>,
}

impl<T: Scalar> Clone for FittedModel<T> {
    fn clone(&self) -> Self {
        Self {
            kernel: self.kernel,
            likelihood: self.likelihood,
            train_x: self.train_x.clone(),
            train_y: self.train_y.clone(),
            graph: self.graph.clone(),
            conditionals: self.conditionals.clone(),
            state: self.state.clone(),
            log: self.log.clone(),
            preprocessing: self.preprocessing.clone(),
            tree: self.tree.clone(),
            contexts: self.contexts.clone(),
        }
    }
}

impl<T: Scalar> FittedModel<T> {
    pub fn method(&self) -> Method {
        match self.state {
            ModelState::Npvi { .. } => Method::Npvi,
            ModelState::NpviNn { .. } => Method::NpviNn,
        }
    }

    /// Structural consistency of all parts, used after deserialization.
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        self.likelihood.validate()?;
        self.graph.validate()?;
        if self.train_x.len() != self.graph.n() || self.train_y.len() != self.graph.n() {
            return Err(NpviError::input(
                "training arrays do not match the graph size",
            ));
        }
        if !self.train_x.all_finite() {
            return Err(NpviError::input(
                "training inputs contain non-finite values",
            ));
        }
        self.conditionals.check_against(&self.graph)?;
        match &self.state {
            ModelState::Npvi { params } => params.check_against(&self.graph),
            ModelState::NpviNn { weights } => weights.validate(),
        }
    }

    fn tree(&self) -> &KdTree<T> {
        self.tree
            .get_or_init(|| KdTree::build(&self.train_x).expect("training inputs were validated"))
    }

    pub fn view(&self) -> Result<ModelView<'_, T>> {
        let contexts = match self.state {
            ModelState::Npvi { .. } => None,
            ModelState::NpviNn { .. } => {
                if self.contexts.get().is_none() {
                    let ctx = build_all_contexts(
                        &self.graph,
                        &self.train_x,
                        &self.kernel,
                        &self.train_y,
                    )?;
                    let _ = self.contexts.set(ctx);
                }
                self.contexts.get().map(Vec::as_slice)
            }
        };
        Ok(ModelView {
            kernel: &self.kernel,
            likelihood: &self.likelihood,
            train_x: &self.train_x,
            graph: &self.graph,
            tree: self.tree(),
            state: &self.state,
            contexts,
        })
    }

    /// Direct parameters; network models are evaluated at every point.
    pub fn variational_params(&self) -> Result<Cow<'_, VariationalParams<T>>> {
        match &self.state {
            ModelState::Npvi { params } => Ok(Cow::Borrowed(params)),
            ModelState::NpviNn { weights } => {
                let view = self.view()?;
                let contexts = view.contexts.expect("network view has contexts");
                let mut p = VariationalParams::identity(&self.graph);
                for (i, ctx) in contexts.iter().enumerate() {
                    let row = infer_params(weights, ctx);
                    p.mu[i] = row.mu;
                    *p.logdiag_mut(i) = row.diag.ln();
                    p.offdiag_row_mut(i, row.offdiag.len())
                        .copy_from_slice(&row.offdiag);
                }
                Ok(Cow::Owned(p))
            }
        }
    }

    /// Mean predictive NLL with the default 1,000 draws per point.
    pub fn test_nll(&self, data: &Dataset<T>, seed: u64) -> Result<T> {
        self.view()?
            .mean_nll(&data.x, &data.y, DEFAULT_PREDICTIVE_SAMPLES, seed)
    }
}

/// Mean validation NLL of a fitted model.
pub fn validation_nll<T: Scalar>(
    model: &FittedModel<T>,
    val: &Dataset<T>,
    n_samples: usize,
    seed: u64,
) -> Result<T> {
    model.view()?.mean_nll(&val.x, &val.y, n_samples, seed)
}
