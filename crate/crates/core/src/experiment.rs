//! Experiment configuration and length-scale selection on a validation set.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PreprocessOptions, SplitFractions};
use crate::error::{NpviError, Result};
use crate::gcn::DEFAULT_WIDTHS;
use crate::kernel::KernelConfig;
use crate::likelihood::{Likelihood, LikelihoodKind};
use crate::scalar::Scalar;
use crate::trainer::{FittedModel, Method, PreparedData, TrainConfig, Trainer};

pub const DEFAULT_LENGTH_SCALE_GRID: [f64; 7] = [0.05, 0.1, 0.5, 1.0, 1.5, 2.0, 2.5];

/// Everything an experiment needs, loadable from TOML. Missing keys take
/// the defaults below; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound = "T: Scalar")]
pub struct ExperimentConfig<T> {
    pub likelihood: LikelihoodKind,
    /// Noise variance for lognormal and gaussian likelihoods.
    pub sigma2: T,
    pub method: Method,
    pub k: usize,
    pub length_scale_grid: Vec<T>,
    pub signal_variance: T,
    pub split: SplitFractions,
    pub seed: u64,
    /// Defaults to the method's learning rate when absent.
    pub learning_rate: Option<T>,
    pub batch_size: usize,
    pub max_seconds: f64,
    pub max_epochs: Option<usize>,
    pub max_steps: Option<usize>,
    pub eval_every: usize,
    pub patience: usize,
    pub mc_samples: usize,
    pub val_samples: usize,
    pub order_seed: Option<u64>,
    pub gcn_widths: Vec<usize>,
    pub preprocessing: PreprocessOptions<T>,
}

impl<T: Scalar> Default for ExperimentConfig<T> {
    fn default() -> Self {
        let train = TrainConfig::<T>::new(Method::Npvi, 10);
        Self {
            likelihood: LikelihoodKind::PoissonSoftplus,
            sigma2: T::of(0.01),
            method: Method::Npvi,
            k: train.k,
            length_scale_grid: DEFAULT_LENGTH_SCALE_GRID
                .iter()
                .map(|&v| T::of(v))
                .collect(),
            signal_variance: T::one(),
            split: SplitFractions::default(),
            seed: 0,
            learning_rate: None,
            batch_size: train.batch_size,
            max_seconds: train.max_seconds,
            max_epochs: None,
            max_steps: None,
            eval_every: train.eval_every,
            patience: train.patience,
            mc_samples: train.mc_samples,
            val_samples: train.val_samples,
            order_seed: None,
            gcn_widths: DEFAULT_WIDTHS.to_vec(),
            preprocessing: PreprocessOptions::default(),
        }
    }
}

impl<T: Scalar> ExperimentConfig<T> {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| NpviError::input(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| NpviError::input(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| NpviError::input(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        if self.length_scale_grid.is_empty() {
            return Err(NpviError::input("length_scale_grid is empty"));
        }
        for &ls in &self.length_scale_grid {
            KernelConfig::with_variance(ls, self.signal_variance)?;
        }
        self.likelihood()?;
        self.train_config().validate()
    }

    pub fn likelihood(&self) -> Result<Likelihood<T>> {
        Likelihood::new(self.likelihood, self.sigma2)
    }

    pub fn kernel(&self, length_scale: T) -> Result<KernelConfig<T>> {
        KernelConfig::with_variance(length_scale, self.signal_variance)
    }

    pub fn train_config(&self) -> TrainConfig<T> {
        let mut t = TrainConfig::new(self.method, self.k);
        if let Some(lr) = self.learning_rate {
            t.learning_rate = lr;
        }
        t.batch_size = self.batch_size;
        t.max_seconds = self.max_seconds;
        t.max_epochs = self.max_epochs;
        t.max_steps = self.max_steps;
        t.eval_every = self.eval_every;
        t.patience = self.patience;
        t.seed = self.seed;
        t.mc_samples = self.mc_samples;
        t.val_samples = self.val_samples;
        t.order_seed = self.order_seed;
        t.gcn_widths = self.gcn_widths.clone();
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct GridRow<T> {
    pub length_scale: T,
    pub val_nll: T,
    pub steps: usize,
}

#[derive(Debug)]
pub struct GridResult<T: Scalar> {
    pub best_length_scale: T,
    /// One row per grid value, in grid order.
    pub table: Vec<GridRow<T>>,
    pub best_model: FittedModel<T>,
}

/// Trains one model per grid value and keeps the one with the lowest
/// validation NLL; ties go to the smaller length scale. The DAG is built
/// once, the conditionals once per value.
pub fn grid_search<T: Scalar>(
    train: &Dataset<T>,
    val: &Dataset<T>,
    cfg: &ExperimentConfig<T>,
) -> Result<GridResult<T>> {
    cfg.validate()?;
    let lik = cfg.likelihood()?;
    let tc = cfg.train_config();
    let prepared = PreparedData::new(train, tc.k, tc.order_seed)?;
    let mut table = Vec::with_capacity(cfg.length_scale_grid.len());
    let mut best: Option<(T, T, FittedModel<T>)> = None;
    for &ls in &cfg.length_scale_grid {
        let kernel = cfg.kernel(ls)?;
        let model =
            Trainer::from_prepared(prepared.clone(), val, tc.clone(), kernel, lik)?.run()?;
        let nll = T::of(model.log.best_val_nll);
        table.push(GridRow {
            length_scale: ls,
            val_nll: nll,
            steps: model.log.steps,
        });
        let better = match &best {
            None => true,
            Some((b_nll, b_ls, _)) => nll < *b_nll || (nll == *b_nll && ls < *b_ls),
        };
        if better {
            best = Some((nll, ls, model));
        }
    }
    let (_, best_length_scale, best_model) = best.expect("grid is non-empty");
    Ok(GridResult {
        best_length_scale,
        table,
        best_model,
    })
}
