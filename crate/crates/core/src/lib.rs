//! Variational inference for Gaussian process models with non-Gaussian
//! observation noise.
//!
//! The posterior over latent values is approximated by `N(mu, L L^T)` where
//! `L` is lower triangular with at most `k` off-diagonal entries per row,
//! placed on a nearest-neighbor DAG. The prior is factorized over the same
//! DAG, which keeps every ELBO term decomposable over points so minibatch
//! steps cost `O(batch * k^2)` regardless of data size. An amortized variant
//! predicts each row from local observations with two small GCNs.
//!
//! All numerical code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`.

pub mod checkpoint;
pub mod data;
pub mod elbo;
pub mod error;
pub mod experiment;
pub mod gcn;
pub mod graph;
pub mod kernel;
pub mod knn;
pub mod likelihood;
pub mod linalg;
pub mod optim;
pub mod predictor;
pub mod scalar;
pub mod trainer;
pub mod variational;

pub use error::{NpviError, Result};
pub use graph::NeighborGraph;
pub use scalar::Scalar;

pub type Points = kernel::Points<f64>;
pub type KernelConfig = kernel::KernelConfig<f64>;
pub type DenseMatrix = linalg::DenseMatrix<f64>;
pub type VecchiaConditionals = graph::VecchiaConditionals<f64>;
pub type VariationalParams = variational::VariationalParams<f64>;
pub type Likelihood = likelihood::Likelihood<f64>;
pub type GcnWeights = gcn::GcnWeights<f64>;
pub type LocalContext = gcn::LocalContext<f64>;
pub type BatchEstimate = elbo::BatchEstimate<f64>;

pub type PredictiveLatent = predictor::PredictiveLatent<f64>;
pub type Dataset = data::Dataset<f64>;
pub type TrainConfig = trainer::TrainConfig<f64>;
pub type FittedModel = trainer::FittedModel<f64>;
pub type ExperimentConfig = experiment::ExperimentConfig<f64>;
