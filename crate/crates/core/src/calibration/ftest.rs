//! Partial F-test for the drift parameters and the male/female rate average.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{CalibrationError, CalibrationResult};
use crate::special::regularized_incomplete_beta;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FTestReport {
    pub f: f64,
    pub n: usize,
    pub p: usize,
    pub g: usize,
    pub k: usize,
    pub sse_restricted: f64,
    pub sse_full: f64,
    pub critical_05: f64,
    pub critical_01: f64,
    pub reject_05: bool,
    pub reject_01: bool,
    pub p_value: f64,
}

/// `P(X <= x)` for `X ~ F(d1, d2)`.
pub fn f_cdf(x: f64, d1: f64, d2: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let t = d1 * x / (d1 * x + d2);
    regularized_incomplete_beta(0.5 * d1, 0.5 * d2, t).unwrap_or(f64::NAN)
}

/// `P(X > x)`, computed without cancellation for large `x`.
pub fn f_sf(x: f64, d1: f64, d2: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let t = d2 / (d2 + d1 * x);
    regularized_incomplete_beta(0.5 * d2, 0.5 * d1, t).unwrap_or(f64::NAN)
}

/// Inverse CDF of `F(d1, d2)` at probability `q`, by bracketing and bisection.
pub fn f_quantile(q: f64, d1: f64, d2: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 1.0);
    while f_cdf(hi, d1, d2) < q {
        lo = hi;
        hi *= 2.0;
        if hi > 1e300 {
            return f64::INFINITY;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f_cdf(mid, d1, d2) < q {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// `F = ((SSE_r − SSE_f)/(p − g)) / (SSE_f/(n − k))` for a restricted model
/// with `g` parameters nested in a full model with `p`; `k` is the parameter
/// count entering the denominator's degrees of freedom.
pub fn partial_f_test(
    sse_restricted: f64,
    sse_full: f64,
    n: usize,
    p: usize,
    g: usize,
    k: usize,
) -> Result<FTestReport, CalibrationError> {
    if p <= g {
        return Err(CalibrationError::Degrees(format!("p = {p} must exceed g = {g}")));
    }
    if n <= k {
        return Err(CalibrationError::Degrees(format!("n = {n} must exceed k = {k}")));
    }
    if !(sse_full > 0.0 && sse_restricted >= sse_full && sse_restricted.is_finite()) {
        return Err(CalibrationError::Degrees(format!(
            "need SSE_restricted >= SSE_full > 0, got {sse_restricted} and {sse_full}"
        )));
    }
    let d1 = (p - g) as f64;
    let d2 = (n - k) as f64;
    let f = ((sse_restricted - sse_full) / d1) / (sse_full / d2);
    let critical_05 = f_quantile(0.95, d1, d2);
    let critical_01 = f_quantile(0.99, d1, d2);
    Ok(FTestReport {
        f,
        n,
        p,
        g,
        k,
        sse_restricted,
        sse_full,
        critical_05,
        critical_01,
        reject_05: f > critical_05,
        reject_01: f > critical_01,
        p_value: f_sf(f, d1, d2),
    })
}

/// Drift test from a full fit and its restricted (m1 = b1 = 0) refit.
pub fn drift_test(full: &CalibrationResult, restricted: &CalibrationResult) -> Result<FTestReport, CalibrationError> {
    if full.n_obs != restricted.n_obs {
        return Err(CalibrationError::Degrees("fits use different panels".into()));
    }
    // rounding can leave the restricted optimum a hair below the full one
    let sse_r = restricted.sse.max(full.sse);
    partial_f_test(sse_r, full.sse, full.n_obs, full.n_params, restricted.n_params, full.n_params)
}

/// Pointwise mean of two spot-rate curves over identical weeks.
pub fn average_rate_curves(
    a: &CalibrationResult,
    b: &CalibrationResult,
) -> Result<BTreeMap<u32, f64>, CalibrationError> {
    average_curves(&a.spot_rates, &b.spot_rates)
}

pub fn average_curves(a: &BTreeMap<u32, f64>, b: &BTreeMap<u32, f64>) -> Result<BTreeMap<u32, f64>, CalibrationError> {
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        let only_a: Vec<_> = a.keys().filter(|w| !b.contains_key(w)).take(5).collect();
        let only_b: Vec<_> = b.keys().filter(|w| !a.contains_key(w)).take(5).collect();
        return Err(CalibrationError::CoverageMismatch(format!("weeks only in first {only_a:?}, only in second {only_b:?}")));
    }
    Ok(a.iter().zip(b.values()).map(|((w, x), y)| (*w, 0.5 * (x + y))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// For d1 = 2 the F quantile is closed form: (d2/2)(β^{−2/d2} − 1).
    fn two_df_quantile(beta: f64, d2: f64) -> f64 {
        0.5 * d2 * (beta.powf(-2.0 / d2) - 1.0)
    }

    #[test]
    fn quantiles_match_closed_form_for_two_numerator_df() {
        for d2 in [5.0, 40.0, 18274.0, 18618.0] {
            for beta in [0.05, 0.01] {
                let got = f_quantile(1.0 - beta, 2.0, d2);
                let want = two_df_quantile(beta, d2);
                assert!((got - want).abs() < 1e-9 * want, "d2={d2}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn printed_critical_values() {
        // female row: n = 18756, p = 484, g = k = 482
        let r = partial_f_test(2.0, 1.0, 18756, 484, 482, 482).unwrap();
        assert!((r.critical_05 - 2.99622).abs() < 5e-6);
        assert!((r.critical_01 - 4.60633).abs() < 5e-6);
        let r = partial_f_test(2.0, 1.0, 19100, 484, 482, 482).unwrap();
        assert!((r.critical_05 - 2.99621).abs() < 5e-6);
        assert!((r.critical_01 - 4.60631).abs() < 5e-6);
    }

    #[test]
    fn no_improvement_gives_zero() {
        let r = partial_f_test(3.0, 3.0, 100, 7, 5, 7).unwrap();
        assert_eq!(r.f, 0.0);
        assert!(!r.reject_05 && !r.reject_01);
        assert!((r.p_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_degrees() {
        assert!(partial_f_test(2.0, 1.0, 10, 5, 5, 3).is_err());
        assert!(partial_f_test(2.0, 1.0, 10, 7, 5, 10).is_err());
        assert!(partial_f_test(1.0, 2.0, 100, 7, 5, 7).is_err());
    }

    #[test]
    fn cdf_and_survival_are_complementary() {
        for x in [0.1, 1.0, 3.0, 10.0] {
            let s = f_cdf(x, 3.0, 17.0) + f_sf(x, 3.0, 17.0);
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn averaging_curves() {
        let a = BTreeMap::from([(0, 0.02), (3, 0.05)]);
        let b = BTreeMap::from([(0, 0.04), (3, 0.05)]);
        let m = average_curves(&a, &b).unwrap();
        assert_eq!(m[&0], 0.03);
        assert_eq!(m[&3], 0.05);
        assert_eq!(average_curves(&a, &a).unwrap(), a);
        let c = BTreeMap::from([(0, 0.02), (4, 0.05)]);
        assert!(matches!(average_curves(&a, &c), Err(CalibrationError::CoverageMismatch(_))));
    }
}
