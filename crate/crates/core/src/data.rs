//! Datasets: CSV ingestion, preprocessing, random splits and synthetic
//! draws from a GP prior.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{NpviError, Result};
use crate::graph::{NeighborGraph, VecchiaConditionals};
use crate::kernel::{KernelConfig, Points};
use crate::likelihood::{softplus, Likelihood, LikelihoodKind};
use crate::scalar::Scalar;

/// Largest `n` for which the synthetic generator factors the dense prior.
pub const MAX_EXACT_PRIOR_POINTS: usize = 5000;

/// Smallest dataset accepted from a file.
pub const MIN_DATASET_ROWS: usize = 3;

/// Affine maps applied at ingestion, kept so targets can be mapped back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing<T> {
    pub feature_shift: Vec<T>,
    pub feature_scale: Vec<T>,
    pub target_shift: T,
    pub target_scale: T,
    /// Transformed targets below this floor are raised to it.
    pub clamp_floor: Option<T>,
}

impl<T: Scalar> Preprocessing<T> {
    pub fn identity(dim: usize) -> Self {
        Self {
            feature_shift: vec![T::zero(); dim],
            feature_scale: vec![T::one(); dim],
            target_shift: T::zero(),
            target_scale: T::one(),
            clamp_floor: None,
        }
    }

    /// Fits the maps requested by `opts` on `raw_x` / `raw_y`.
    pub fn fit(raw_x: &Points<T>, raw_y: &[T], opts: &PreprocessOptions<T>) -> Result<Self> {
        let d = raw_x.dim();
        let n = raw_x.len();
        let mut p = Self::identity(d);
        if opts.standardize_features && n > 1 {
            for c in 0..d {
                let mean = raw_x.iter().map(|r| r[c]).sum::<T>() / T::of_usize(n);
                let var = raw_x
                    .iter()
                    .map(|r| (r[c] - mean) * (r[c] - mean))
                    .sum::<T>()
                    / T::of_usize(n - 1);
                p.feature_shift[c] = mean;
                p.feature_scale[c] = if var > T::zero() {
                    var.sqrt()
                } else {
                    T::one()
                };
            }
        }
        if let Some(s) = opts.feature_scale {
            if !(s > T::zero()) {
                return Err(NpviError::input("feature scale must be positive"));
            }
            for c in 0..d {
                p.feature_scale[c] *= s;
            }
        }
        if opts.target_min_max {
            let lo = raw_y.iter().copied().fold(T::infinity(), T::min);
            let hi = raw_y.iter().copied().fold(T::neg_infinity(), T::max);
            p.target_shift = lo;
            p.target_scale = if hi > lo { hi - lo } else { T::one() };
        }
        p.clamp_floor = opts.clamp_floor;
        Ok(p)
    }

    pub fn apply_x(&self, x: &Points<T>) -> Result<Points<T>> {
        if x.dim() != self.feature_shift.len() {
            return Err(NpviError::input(
                "feature dimension does not match the preprocessing record",
            ));
        }
        let d = x.dim();
        let coords = x
            .coords()
            .iter()
            .enumerate()
            .map(|(k, &v)| (v - self.feature_shift[k % d]) / self.feature_scale[k % d])
            .collect();
        Points::new(d, coords)
    }

    pub fn apply_y(&self, y: T) -> T {
        let t = (y - self.target_shift) / self.target_scale;
        match self.clamp_floor {
            Some(floor) if t < floor => floor,
            _ => t,
        }
    }

    /// Maps a transformed target back to original units (clamping aside).
    pub fn invert_y(&self, t: T) -> T {
        t * self.target_scale + self.target_shift
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessOptions<T> {
    pub standardize_features: bool,
    /// Multiplies the feature scale (after standardization, if any).
    pub feature_scale: Option<T>,
    /// Translate and scale targets to `[0, 1]`.
    pub target_min_max: bool,
    pub clamp_floor: Option<T>,
}

impl<T: Scalar> Default for PreprocessOptions<T> {
    fn default() -> Self {
        Self {
            standardize_features: false,
            feature_scale: None,
            target_min_max: false,
            clamp_floor: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta<T> {
    pub feature_names: Vec<String>,
    pub target_name: String,
    pub preprocessing: Preprocessing<T>,
    /// 1-based data row numbers (header excluded) rejected at ingestion.
    pub rejected_rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset<T> {
    pub x: Points<T>,
    pub y: Vec<T>,
    /// Latent values, known only for synthetic data.
    pub latent: Option<Vec<T>>,
    pub meta: DatasetMeta<T>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(x: Points<T>, y: Vec<T>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(NpviError::input(format!(
                "{} points but {} targets",
                x.len(),
                y.len()
            )));
        }
        let d = x.dim();
        Ok(Self {
            meta: DatasetMeta {
                feature_names: (1..=d).map(|c| format!("x{c}")).collect(),
                target_name: "y".into(),
                preprocessing: Preprocessing::identity(d),
                rejected_rows: Vec::new(),
            },
            x,
            y,
            latent: None,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.dim()
    }

    /// Rows at `indices`, in that order; metadata is shared.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            x: self.x.select(indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            latent: self
                .latent
                .as_ref()
                .map(|f| indices.iter().map(|&i| f[i]).collect()),
            meta: self.meta.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.len() != self.y.len() {
            return Err(NpviError::input("feature and target counts differ"));
        }
        if !self.x.all_finite() || self.y.iter().any(|v| !v.is_finite()) {
            return Err(NpviError::input("dataset contains non-finite values"));
        }
        Ok(())
    }

    /// Writes a header row (feature names, target name) and one line per
    /// point.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_err)?;
        let mut header = self.meta.feature_names.clone();
        header.push(self.meta.target_name.clone());
        w.write_record(&header).map_err(csv_err)?;
        for (p, y) in self.x.iter().zip(&self.y) {
            let rec: Vec<String> = p
                .iter()
                .chain(std::iter::once(y))
                .map(|v| v.to_string())
                .collect();
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> NpviError {
    NpviError::input(format!("csv: {e}"))
}

/// Reads a CSV with a header row. Every column except `target` is a
/// feature. Rows with missing or non-numeric cells are skipped and listed in
/// `meta.rejected_rows`. Preprocessing is fitted on the accepted rows.
pub fn ingest_csv<T: Scalar>(
    path: impl AsRef<Path>,
    target: &str,
    opts: &PreprocessOptions<T>,
) -> Result<Dataset<T>> {
    let raw = read_csv_raw::<T>(path.as_ref(), target)?;
    let pre = Preprocessing::fit(&raw.x, &raw.y, opts)?;
    finish_ingest(raw, pre)
}

/// Like [`ingest_csv`] but applies an existing preprocessing record, for
/// validation and test files.
pub fn ingest_csv_with<T: Scalar>(
    path: impl AsRef<Path>,
    target: &str,
    pre: &Preprocessing<T>,
) -> Result<Dataset<T>> {
    let raw = read_csv_raw::<T>(path.as_ref(), target)?;
    finish_ingest(raw, pre.clone())
}

struct RawCsv<T> {
    x: Points<T>,
    y: Vec<T>,
    feature_names: Vec<String>,
    target_name: String,
    rejected: Vec<usize>,
}

fn read_csv_raw<T: Scalar>(path: &Path, target: &str) -> Result<RawCsv<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| NpviError::input(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_owned)
        .collect();
    let target_col = headers.iter().position(|h| h == target).ok_or_else(|| {
        NpviError::input(format!(
            "{}: no target column '{target}' (columns: {})",
            path.display(),
            headers.join(", ")
        ))
    })?;
    let feature_cols: Vec<usize> = (0..headers.len()).filter(|&c| c != target_col).collect();
    if feature_cols.is_empty() {
        return Err(NpviError::input(format!(
            "{}: no feature columns",
            path.display()
        )));
    }
    let mut coords = Vec::new();
    let mut y = Vec::new();
    let mut rejected = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec =
            rec.map_err(|e| NpviError::input(format!("{}: row {}: {e}", path.display(), row + 1)))?;
        let parse = |c: usize| -> Option<T> {
            rec.get(c)
                .and_then(|s| s.parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .map(T::of)
        };
        let feats: Option<Vec<T>> = feature_cols.iter().map(|&c| parse(c)).collect();
        match (feats, parse(target_col), rec.len() == headers.len()) {
            (Some(f), Some(t), true) => {
                coords.extend(f);
                y.push(t);
            }
            _ => rejected.push(row + 1),
        }
    }
    if y.is_empty() {
        return Err(NpviError::input(format!(
            "{}: all {} data rows were rejected (first bad rows: {:?})",
            path.display(),
            rejected.len(),
            &rejected[..rejected.len().min(10)]
        )));
    }
    if y.len() < MIN_DATASET_ROWS {
        return Err(NpviError::input(format!(
            "{}: only {} usable rows; at least {MIN_DATASET_ROWS} are required",
            path.display(),
            y.len()
        )));
    }
    Ok(RawCsv {
        x: Points::new(feature_cols.len(), coords)?,
        y,
        feature_names: feature_cols.iter().map(|&c| headers[c].clone()).collect(),
        target_name: target.to_owned(),
        rejected,
    })
}

fn finish_ingest<T: Scalar>(raw: RawCsv<T>, pre: Preprocessing<T>) -> Result<Dataset<T>> {
    let x = pre.apply_x(&raw.x)?;
    let y = raw.y.iter().map(|&v| pre.apply_y(v)).collect();
    Ok(Dataset {
        x,
        y,
        latent: None,
        meta: DatasetMeta {
            feature_names: raw.feature_names,
            target_name: raw.target_name,
            preprocessing: pre,
            rejected_rows: raw.rejected,
        },
    })
}

/// Fractions for train / validation / test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            validation: 0.1,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|&f| !(0.0..=1.0).contains(&f))
            || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9
        {
            return Err(NpviError::input(format!(
                "split fractions must lie in [0, 1] and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }

    /// Sizes for `n` points: rounded train and validation counts, the
    /// remainder to test.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let train = ((self.train * n as f64).round() as usize).min(n);
        let val = ((self.validation * n as f64).round() as usize).min(n - train);
        (train, val, n - train - val)
    }
}

/// Seeded permutation followed by contiguous slicing.
pub fn split<T: Scalar>(
    data: &Dataset<T>,
    fractions: &SplitFractions,
    seed: u64,
) -> Result<(Dataset<T>, Dataset<T>, Dataset<T>)> {
    fractions.validate()?;
    let n = data.len();
    let (a, b, c) = fractions.sizes(n);
    if a == 0 || b == 0 || c == 0 {
        return Err(NpviError::input(format!(
            "split of {n} points gives an empty part (sizes {a}/{b}/{c})"
        )));
    }
    let perm = permutation(n, seed);
    Ok((
        data.subset(&perm[..a]),
        data.subset(&perm[a..a + b]),
        data.subset(&perm[a + b..]),
    ))
}

pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

/// Draws `y ~ p(y | f)`.
pub fn sample_observation<T: Scalar, R: Rng + ?Sized>(lik: &Likelihood<T>, f: T, rng: &mut R) -> T {
    let f64_f = f.to_f64_lossless();
    let sd = lik.sigma2.to_f64_lossless().sqrt();
    let z: f64 = rand_distr::StandardNormal.sample(rng);
    let v = match lik.kind {
        LikelihoodKind::PoissonSoftplus => {
            let rate = softplus(f64_f);
            match Poisson::new(rate) {
                Ok(p) => p.sample(rng),
                Err(_) => 0.0,
            }
        }
        LikelihoodKind::Lognormal => (f64_f + sd * z).exp(),
        LikelihoodKind::Gaussian => f64_f + sd * z,
    };
    T::of(v)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthOptions<T> {
    pub signal_variance: T,
    /// Sample the prior through the nearest-neighbor factorization with this
    /// many parents instead of a dense factorization.
    pub vecchia_k: Option<usize>,
}

impl<T: Scalar> Default for SynthOptions<T> {
    fn default() -> Self {
        Self {
            signal_variance: T::one(),
            vecchia_k: None,
        }
    }
}

/// `x ~ U[0,1]^d`, `f ~ GP(0, rbf)`, `y ~ p(y | f)`. The latent draw is kept
/// in `latent`.
pub fn generate_synthetic<T: Scalar>(
    n: usize,
    d: usize,
    length_scale: T,
    lik: &Likelihood<T>,
    seed: u64,
    opts: &SynthOptions<T>,
) -> Result<Dataset<T>> {
    if n == 0 || d == 0 {
        return Err(NpviError::input("synthetic data needs n >= 1 and d >= 1"));
    }
    lik.validate()?;
    let cfg = KernelConfig::with_variance(length_scale, opts.signal_variance)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<T> = (0..n * d).map(|_| T::of(rng.random::<f64>())).collect();
    let x = Points::new(d, coords)?;
    let z: Vec<T> = (0..n).map(|_| T::standard_normal(&mut rng)).collect();
    let f = match opts.vecchia_k {
        None => {
            if n > MAX_EXACT_PRIOR_POINTS {
                return Err(NpviError::input(format!(
                    "exact prior sampling supports at most {MAX_EXACT_PRIOR_POINTS} points; \
                     use the nearest-neighbor prior sampler (vecchia_k) for n = {n}"
                )));
            }
            let chol = cfg.gram(&x).cholesky().map_err(|j| {
                NpviError::numerical(format!(
                    "prior covariance is not positive definite at pivot {j}"
                ))
            })?;
            chol.matvec(&z)
        }
        Some(k) => {
            let graph = NeighborGraph::build(&x, k)?;
            let cond = VecchiaConditionals::compute(&graph, &x, &cfg)?;
            let mut f = vec![T::zero(); n];
            for i in 0..n {
                f[i] = cond.cond_mean(&graph, i, &f) + cond.cond_var(i).sqrt() * z[i];
            }
            f
        }
    };
    let y = f
        .iter()
        .map(|&fi| sample_observation(lik, fi, &mut rng))
        .collect();
    let mut data = Dataset::new(x, y)?;
    data.latent = Some(f);
    Ok(data)
}
