//! AdaGrad ascent on the ELBO.

use crate::error::{NpviError, Result};
use crate::scalar::Scalar;

pub const ADAGRAD_EPSILON: f64 = 1e-8;

/// One AdaGrad ascent step on a parameter block:
/// `acc += g^2; param += lr * g / (sqrt(acc) + 1e-8)`.
///
/// Nothing is modified if any gradient entry is non-finite.
pub fn adagrad_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    accum: &mut [T],
    lr: T,
    block: &str,
) -> Result<()> {
    assert_eq!(
        params.len(),
        grads.len(),
        "{block}: parameter/gradient length mismatch"
    );
    assert_eq!(
        params.len(),
        accum.len(),
        "{block}: parameter/accumulator length mismatch"
    );
    if let Some(pos) = grads.iter().position(|g| !g.is_finite()) {
        return Err(NpviError::numerical(format!(
            "non-finite gradient in parameter block '{block}' at entry {pos}"
        )));
    }
    let eps = T::of(ADAGRAD_EPSILON);
    for ((p, &g), a) in params.iter_mut().zip(grads).zip(accum.iter_mut()) {
        *a += g * g;
        *p += lr * g / (a.sqrt() + eps);
    }
    Ok(())
}
