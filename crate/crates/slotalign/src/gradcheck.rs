//! Finite-difference verification of tape gradients.
//!
//! [`check_gradients`] rebuilds a scalar-valued computation around a
//! perturbed copy of the input for every coordinate and compares the central
//! difference against the analytic gradient from `backward`. The error
//! reported is the worst relative error across coordinates, with the
//! denominator floored at one so tiny gradients are compared absolutely.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default central-difference step for wide (f64) checks.
pub const DEFAULT_H: f64 = 1e-4;

/// Compare analytic and numeric gradients of `build` at `point`.
///
/// `build` must record a computation ending in a `[1]`-shaped tensor, using
/// the provided leaf as its input. It is re-invoked `2 * n + 1` times (once
/// for the analytic pass, twice per coordinate), so it must be a pure
/// function of the leaf value.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
/// Non-finite values anywhere fail with a numeric error.
pub fn check_gradients<S, F>(point: &Tensor<S>, h: S, build: F) -> Result<S>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, Var) -> Result<Var>,
{
    if h <= S::zero() {
        return Err(Error::invalid("step size h must be positive"));
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone())?;
    let y = build(&mut tape, x)?;
    if tape.value(y).shape() != [1] {
        return Err(Error::invalid(format!(
            "gradient check target must be scalar, got shape {:?}",
            tape.value(y).shape()
        )));
    }
    let grads = tape.backward(y)?;
    let analytic = match grads.wrt(x) {
        Some(g) => g.clone(),
        None => Tensor::zeros(point.shape()),
    };

    let eval = |p: &Tensor<S>| -> Result<S> {
        let mut t = Tape::new();
        let xv = t.leaf(p.clone())?;
        let yv = build(&mut t, xv)?;
        let v = t.value(yv).item()?;
        if !v.is_finite() {
            return Err(Error::numeric("non-finite value during finite differencing"));
        }
        Ok(v)
    };

    let two_h = h + h;
    let one = S::one();
    let mut worst = S::zero();
    let mut probe = point.clone();
    for i in 0..probe.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let f_plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let f_minus = eval(&probe)?;
        probe.data_mut()[i] = orig;

        let numeric = (f_plus - f_minus) / two_h;
        let a = analytic.data()[i];
        let denom = if a.abs() > one { a.abs() } else { one };
        let err = (a - numeric).abs() / denom;
        if !err.is_finite() {
            return Err(Error::numeric(format!("non-finite gradient error at coordinate {}", i)));
        }
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}
