//! Observation models `p(y | f)` for the latent GP value `f`.

use serde::{Deserialize, Serialize};

use crate::error::{NpviError, Result};
use crate::scalar::Scalar;

/// `log(1 + exp(f))`, without overflow for large `|f|`.
#[inline]
pub fn softplus<T: Scalar>(f: T) -> T {
    if f > T::zero() {
        f + (-f).exp().ln_1p()
    } else {
        f.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(f: T) -> T {
    if f >= T::zero() {
        T::one() / (T::one() + (-f).exp())
    } else {
        let e = f.exp();
        e / (T::one() + e)
    }
}

/// `log softplus(f)`; tends to `f` where `softplus(f)` underflows.
#[inline]
fn log_softplus<T: Scalar>(f: T) -> T {
    let sp = softplus(f);
    if sp > T::zero() {
        sp.ln()
    } else {
        f
    }
}

fn ln_factorial<T: Scalar>(y: T) -> T {
    T::of(statrs::function::gamma::ln_gamma(y.to_f64_lossless() + 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodKind {
    PoissonSoftplus,
    Lognormal,
    Gaussian,
}

impl std::str::FromStr for LikelihoodKind {
    type Err = NpviError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "poisson" | "poisson_softplus" | "poisson-softplus" => Ok(Self::PoissonSoftplus),
            "lognormal" | "log-normal" | "log_normal" => Ok(Self::Lognormal),
            "gaussian" | "normal" => Ok(Self::Gaussian),
            other => Err(NpviError::input(format!("unknown likelihood '{other}'"))),
        }
    }
}

/// Noise model. `sigma2` is the variance of `log y` (lognormal) or of `y`
/// (gaussian) and is ignored by the Poisson model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Likelihood<T> {
    pub kind: LikelihoodKind,
    pub sigma2: T,
}

impl<T: Scalar> Likelihood<T> {
    pub fn poisson() -> Self {
        Self {
            kind: LikelihoodKind::PoissonSoftplus,
            sigma2: T::one(),
        }
    }

    pub fn lognormal(sigma2: T) -> Result<Self> {
        Self::new(LikelihoodKind::Lognormal, sigma2)
    }

    pub fn gaussian(sigma2: T) -> Result<Self> {
        Self::new(LikelihoodKind::Gaussian, sigma2)
    }

    pub fn new(kind: LikelihoodKind, sigma2: T) -> Result<Self> {
        let lik = Self { kind, sigma2 };
        lik.validate()?;
        Ok(lik)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind != LikelihoodKind::PoissonSoftplus
            && !(self.sigma2 > T::zero() && self.sigma2.is_finite())
        {
            return Err(NpviError::input(format!(
                "noise variance must be positive, got {}",
                self.sigma2
            )));
        }
        Ok(())
    }

    /// Checks that `y` is in the support of the model.
    pub fn check_target(&self, y: T) -> Result<()> {
        let ok = match self.kind {
            LikelihoodKind::PoissonSoftplus => {
                y >= T::zero() && y.is_finite() && y.fract() == T::zero()
            }
            LikelihoodKind::Lognormal => y > T::zero() && y.is_finite(),
            LikelihoodKind::Gaussian => y.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            let need = match self.kind {
                LikelihoodKind::PoissonSoftplus => "a non-negative integer count",
                LikelihoodKind::Lognormal => "strictly positive",
                LikelihoodKind::Gaussian => "finite",
            };
            Err(NpviError::input(format!("observation {y} must be {need}")))
        }
    }

    pub fn check_targets(&self, ys: &[T]) -> Result<()> {
        for (i, &y) in ys.iter().enumerate() {
            self.check_target(y)
                .map_err(|e| NpviError::input(format!("target {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn log_prob(&self, y: T, f: T) -> Result<T> {
        self.check_target(y)?;
        Ok(self.log_prob_unchecked(y, f))
    }

    pub fn dlog_prob_df(&self, y: T, f: T) -> Result<T> {
        self.check_target(y)?;
        Ok(self.value_and_derivative(y, f).1)
    }

    /// Log density for a target already known to be valid.
    #[inline]
    pub fn log_prob_unchecked(&self, y: T, f: T) -> T {
        let half = T::of(0.5);
        let log_2pi = (T::of(2.0) * T::PI()).ln();
        match self.kind {
            LikelihoodKind::PoissonSoftplus => {
                let rate = softplus(f);
                let count_term = if y == T::zero() {
                    T::zero()
                } else {
                    y * log_softplus(f)
                };
                -rate + count_term - ln_factorial(y)
            }
            LikelihoodKind::Lognormal => {
                let ly = y.ln();
                let r = ly - f;
                -half * (log_2pi + self.sigma2.ln()) - r * r / (T::of(2.0) * self.sigma2) - ly
            }
            LikelihoodKind::Gaussian => {
                let r = y - f;
                -half * (log_2pi + self.sigma2.ln()) - r * r / (T::of(2.0) * self.sigma2)
            }
        }
    }

    /// `(log p(y | f), d/df log p(y | f))` for a valid target.
    #[inline]
    pub fn value_and_derivative(&self, y: T, f: T) -> (T, T) {
        let value = self.log_prob_unchecked(y, f);
        let deriv = match self.kind {
            LikelihoodKind::PoissonSoftplus => {
                // (y / rate - 1) * sigmoid(f), with sigmoid / rate -> 1 as f -> -inf.
                let rate = softplus(f);
                let s = sigmoid(f);
                let ratio = if rate > T::zero() { s / rate } else { T::one() };
                y * ratio - s
            }
            LikelihoodKind::Lognormal => (y.ln() - f) / self.sigma2,
            LikelihoodKind::Gaussian => (y - f) / self.sigma2,
        };
        (value, deriv)
    }
}
