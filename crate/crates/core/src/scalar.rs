//! Scalar abstraction and log-domain helpers.
//!
//! Every table in the crate is generic over [`Scalar`], which is satisfied by
//! `f32` and `f64`. Negative infinity is a first-class value: it marks
//! forbidden actions and zero-probability outcomes.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating point type usable by the tables: f32 or f64.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` literal, panicking only for non-representable types.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal must be representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar must convert to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Numerically stable `log(sum(exp(x)))`.
///
/// Negative infinities are excluded from the max-shift; an empty or all `-inf`
/// input returns `-inf`. A `+inf` entry yields `+inf`.
pub fn logsumexp<S: Scalar, I>(values: I) -> S
where
    I: IntoIterator<Item = S>,
    I::IntoIter: Clone,
{
    let iter = values.into_iter();
    let mut max = S::neg_infinity();
    for v in iter.clone() {
        if v.is_nan() {
            return v;
        }
        if v > max {
            max = v;
        }
    }
    if max == S::neg_infinity() || max == S::infinity() {
        return max;
    }
    let mut acc = S::zero();
    for v in iter {
        if v != S::neg_infinity() {
            acc = acc + (v - max).exp();
        }
    }
    max + acc.ln()
}

/// Log-sum-exp of a slice.
#[inline]
pub fn logsumexp_slice<S: Scalar>(values: &[S]) -> S {
    logsumexp(values.iter().copied())
}

/// `log(exp(a) + exp(b))` for two terms.
#[inline]
pub fn logaddexp<S: Scalar>(a: S, b: S) -> S {
    if a == S::neg_infinity() {
        return b;
    }
    if b == S::neg_infinity() {
        return a;
    }
    if a > b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

/// Log-probabilities `f - logsumexp(f)`.
///
/// An all `-inf` input has no softargmax and is returned as all `-inf`.
pub fn log_softargmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let lse = logsumexp_slice(logits);
    if lse == S::neg_infinity() {
        return vec![S::neg_infinity(); logits.len()];
    }
    logits
        .iter()
        .map(|&v| if v == S::neg_infinity() { v } else { v - lse })
        .collect()
}

/// Difference between two log-domain values where both may be `-inf`.
///
/// Equal infinities compare as zero distance; an infinity against a finite
/// value is an infinite distance.
#[inline]
pub fn inf_aware_abs_diff<S: Scalar>(a: S, b: S) -> S {
    if a.is_infinite() || b.is_infinite() {
        if a == b {
            S::zero()
        } else {
            S::infinity()
        }
    } else {
        (a - b).abs()
    }
}

/// `x * log(x / y)` in log domain, with `0 log 0 = 0`.
#[inline]
pub(crate) fn kl_term<S: Scalar>(logp: S, logq: S) -> Option<S> {
    if logp == S::neg_infinity() {
        return Some(S::zero());
    }
    if logq == S::neg_infinity() {
        return None;
    }
    Some(logp.exp() * (logp - logq))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lse_matches_naive_on_moderate_values() {
        let xs = [0.5f64, 2.0, -1.0];
        let naive = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((logsumexp_slice(&xs) - naive).abs() < 1e-15);
    }

    #[test]
    fn lse_handles_large_values() {
        // log(exp(1234) + exp(1232)) = 1232 + log(1 + e^2)
        let got = logsumexp_slice(&[1234.0f64, 1232.0]);
        assert!((got - 1234.126928011042972496444).abs() < 1e-12);
        assert_eq!(logaddexp(1234.0f64, 1232.0), got);
    }

    #[test]
    fn lse_neg_infinity_conventions() {
        let ninf = f64::NEG_INFINITY;
        assert_eq!(logsumexp_slice::<f64>(&[]), ninf);
        assert_eq!(logsumexp_slice(&[ninf, ninf]), ninf);
        assert_eq!(logsumexp_slice(&[ninf, 0.0]), 0.0);
        assert_eq!(logsumexp_slice(&[f64::INFINITY, 0.0]), f64::INFINITY);
        assert_eq!(logaddexp(ninf, ninf), ninf);
    }

    #[test]
    fn softargmax_row() {
        // (0, ln 3) -> (1/4, 3/4)
        let lp = log_softargmax(&[0.0f64, 3.0f64.ln()]);
        assert!((lp[0].exp() - 0.25).abs() < 1e-15);
        assert!((lp[1].exp() - 0.75).abs() < 1e-15);
        let lp = log_softargmax(&[f64::NEG_INFINITY, 1.0]);
        assert_eq!(lp, vec![f64::NEG_INFINITY, 0.0]);
    }

    #[test]
    fn works_for_f32() {
        let got: f32 = logsumexp_slice(&[0.0f32, 0.0]);
        assert!((got - 2f32.ln()).abs() < 1e-6);
    }
}
