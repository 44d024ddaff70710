//! Discount curves: flat continuous compounding and the Cox-Ingersoll-Ross
//! affine zero-coupon bond.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Weeks per calendar year.
pub const WEEKS_PER_YEAR: f64 = 52.1775;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TermStructureError {
    #[error("maturity must be non-negative, got {0}")]
    NegativeMaturity(f64),
    #[error("yield needs a positive maturity, got {0}")]
    NonPositiveMaturity(f64),
    #[error("{what} must be finite and non-negative, got {value}")]
    InvalidParameter { what: &'static str, value: f64 },
}

/// A zero-coupon bond price function `B(s)`, `s` in years.
pub trait DiscountCurve {
    /// Bond price for `s >= 0`. Callers that cannot guarantee the domain
    /// should use [`DiscountCurve::checked_discount`].
    fn discount(&self, s: f64) -> f64;

    fn checked_discount(&self, s: f64) -> Result<f64, TermStructureError> {
        if s >= 0.0 && s.is_finite() {
            Ok(self.discount(s))
        } else {
            Err(TermStructureError::NegativeMaturity(s))
        }
    }

    /// Continuously compounded yield `−ln B(s) / s`.
    fn zero_yield(&self, s: f64) -> Result<f64, TermStructureError> {
        if !(s > 0.0 && s.is_finite()) {
            return Err(TermStructureError::NonPositiveMaturity(s));
        }
        Ok(-self.discount(s).ln() / s)
    }
}

fn check_param(what: &'static str, value: f64) -> Result<(), TermStructureError> {
    if value >= 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(TermStructureError::InvalidParameter { what, value })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlatCurve {
    pub rate: f64,
}

impl FlatCurve {
    pub fn new(rate: f64) -> Result<Self, TermStructureError> {
        check_param("flat rate", rate)?;
        Ok(Self { rate })
    }

    /// From an annual effective rate `R`: `r = ln(1 + R)`.
    pub fn from_effective(annual: f64) -> Result<Self, TermStructureError> {
        Self::new(annual.ln_1p())
    }
}

impl DiscountCurve for FlatCurve {
    fn discount(&self, s: f64) -> f64 {
        (-self.rate * s).exp()
    }

    fn zero_yield(&self, s: f64) -> Result<f64, TermStructureError> {
        if !(s > 0.0 && s.is_finite()) {
            return Err(TermStructureError::NonPositiveMaturity(s));
        }
        Ok(self.rate)
    }
}

/// Time unit the CIR coefficients are quoted in. Rates are annual either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeUnit {
    #[default]
    PerYear,
    PerWeek,
}

/// Coefficients of `dR = (α − βR) dt + σ √R dW`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CirParams {
    pub alpha: f64,
    pub beta: f64,
    pub sigma: f64,
    #[serde(default)]
    pub unit: TimeUnit,
}

impl CirParams {
    pub fn new(alpha: f64, beta: f64, sigma: f64) -> Result<Self, TermStructureError> {
        let p = Self { alpha, beta, sigma, unit: TimeUnit::PerYear };
        p.validate()?;
        Ok(p)
    }

    pub fn with_unit(self, unit: TimeUnit) -> Self {
        Self { unit, ..self }
    }

    pub fn validate(&self) -> Result<(), TermStructureError> {
        check_param("alpha", self.alpha)?;
        check_param("beta", self.beta)?;
        check_param("sigma", self.sigma)
    }

    /// The same dynamics expressed with time in years.
    pub fn per_year(&self) -> Self {
        match self.unit {
            TimeUnit::PerYear => *self,
            TimeUnit::PerWeek => Self {
                alpha: self.alpha * WEEKS_PER_YEAR,
                beta: self.beta * WEEKS_PER_YEAR,
                sigma: self.sigma * WEEKS_PER_YEAR.sqrt(),
                unit: TimeUnit::PerYear,
            },
        }
    }

    /// Long-run mean `α/β` (infinite when β = 0).
    pub fn long_run_mean(&self) -> f64 {
        self.alpha / self.beta
    }

    /// `(ln A(s), C(s))` with `B(s) = A(s) e^{−C(s) r0}`; `s` in years.
    ///
    /// Written in terms of `h − β = 2σ²/(h + β)` and `1 − e^{−hs}` so the
    /// σ → 0 and β → 0 limits are reached without cancellation.
    pub fn affine_coefficients(&self, s: f64) -> (f64, f64) {
        let p = self.per_year();
        let (alpha, beta, sigma) = (p.alpha, p.beta, p.sigma);
        let sig2 = sigma * sigma;
        let h = (beta * beta + 2.0 * sig2).sqrt();
        if h == 0.0 {
            // β = σ = 0: R_t = r0 + α t
            return (-0.5 * alpha * s * s, s);
        }
        let g = -(-h * s).exp_m1();
        let c = 2.0 * g / ((beta + h) * g + 2.0 * h * (1.0 - g));
        let q = sig2 * g / (h * (h + beta));
        let ln_ratio = if q < 1e-8 { 1.0 + 0.5 * q } else { -(-q).ln_1p() / q };
        let ln_a = 2.0 * alpha * (-s / (h + beta) + g / (h * (h + beta)) * ln_ratio);
        (ln_a, c)
    }
}

/// CIR bond curve seen from a week with spot rate `r0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CirCurve {
    pub params: CirParams,
    pub r0: f64,
}

impl CirCurve {
    pub fn new(params: CirParams, r0: f64) -> Result<Self, TermStructureError> {
        params.validate()?;
        check_param("spot rate r0", r0)?;
        Ok(Self { params, r0 })
    }
}

impl DiscountCurve for CirCurve {
    fn discount(&self, s: f64) -> f64 {
        let p = self.params.per_year();
        if p.sigma == 0.0 {
            return deterministic_discount(p.alpha, p.beta, self.r0, s);
        }
        let (ln_a, c) = self.params.affine_coefficients(s);
        (ln_a - c * self.r0).exp()
    }

    fn zero_yield(&self, s: f64) -> Result<f64, TermStructureError> {
        if !(s > 0.0 && s.is_finite()) {
            return Err(TermStructureError::NonPositiveMaturity(s));
        }
        let (ln_a, c) = self.params.affine_coefficients(s);
        Ok((c * self.r0 - ln_a) / s)
    }
}

/// σ = 0: `R_t = α/β + (r0 − α/β) e^{−βt}` integrated exactly.
fn deterministic_discount(alpha: f64, beta: f64, r0: f64, s: f64) -> f64 {
    let integral = if beta == 0.0 {
        r0 * s + 0.5 * alpha * s * s
    } else {
        // (1 − e^{−βs})/β
        let decay = -(-beta * s).exp_m1() / beta;
        alpha / beta * (s - decay) + r0 * decay
    };
    (-integral).exp()
}

/// Which discount curve prices annuities in a given week.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TermModel {
    /// Flat curve at that week's spot rate.
    Flat,
    /// CIR curve started from that week's spot rate.
    Cir(CirParams),
}

impl TermModel {
    pub fn name(&self) -> &'static str {
        match self {
            TermModel::Flat => "flat",
            TermModel::Cir(_) => "cir",
        }
    }

    /// The curve seen from a week whose spot rate is `r0`.
    pub fn curve(&self, r0: f64) -> Result<Box<dyn DiscountCurve + Send + Sync>, TermStructureError> {
        Ok(match self {
            TermModel::Flat => Box::new(FlatCurve::new(r0)?),
            TermModel::Cir(p) => Box::new(CirCurve::new(*p, r0)?),
        })
    }
}

/// Discount factor on a flat curve; errors on negative maturity.
pub fn discount_flat(curve: &FlatCurve, s: f64) -> Result<f64, TermStructureError> {
    curve.checked_discount(s)
}

/// CIR zero-coupon bond price; errors on negative maturity.
pub fn discount_cir(curve: &CirCurve, s: f64) -> Result<f64, TermStructureError> {
    curve.checked_discount(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    #[test]
    fn flat_discounting() {
        let zero = FlatCurve::new(0.0).unwrap();
        assert_eq!(discount_flat(&zero, 10.0).unwrap(), 1.0);
        let five = FlatCurve::new(0.05).unwrap();
        assert_relative_eq!(discount_flat(&five, 1.0).unwrap(), 0.951_229_424_500_714, max_relative = 1e-14);
        let three = FlatCurve::new(0.03).unwrap();
        assert_abs_diff_eq!(discount_flat(&three, 30.0).unwrap(), 0.406_570, epsilon = 5e-7);
        assert!(matches!(discount_flat(&three, -1.0), Err(TermStructureError::NegativeMaturity(_))));
        assert!(FlatCurve::new(-0.01).is_err());
    }

    #[test]
    fn effective_rate_conversion() {
        let c = FlatCurve::from_effective(0.05).unwrap();
        assert_relative_eq!(c.discount(1.0), 1.0 / 1.05, max_relative = 1e-14);
    }

    #[test]
    fn cir_unit_maturity_and_limits() {
        let p = CirParams::new(1.731e-3, 3.731e-3, 4.341e-2).unwrap();
        let c = CirCurve::new(p, 0.04).unwrap();
        assert_eq!(c.discount(0.0), 1.0);
        let short = c.zero_yield(1e-6).unwrap();
        assert_abs_diff_eq!(short, 0.04, epsilon = 1e-6);
        assert!(discount_cir(&c, -0.5).is_err());
        assert!(c.zero_yield(0.0).is_err());
    }

    #[test]
    fn deterministic_limit_is_flat_at_long_run_mean() {
        let p = CirParams::new(0.002, 0.05, 0.0).unwrap();
        let c = CirCurve::new(p, p.long_run_mean()).unwrap();
        for s in [0.5, 5.0, 30.0] {
            assert_relative_eq!(c.discount(s), (-s * 0.04f64).exp(), max_relative = 1e-13);
            assert_relative_eq!(c.zero_yield(s).unwrap(), 0.04, max_relative = 1e-12);
        }
    }

    #[test]
    fn small_sigma_approaches_deterministic_branch() {
        let base = CirParams::new(0.002, 0.05, 0.0).unwrap();
        let det = CirCurve::new(base, 0.03).unwrap();
        let mut prev = f64::INFINITY;
        for eps in [1e-2, 1e-3, 1e-4] {
            let c = CirCurve::new(CirParams { sigma: eps, ..base }, 0.03).unwrap();
            let diff = (c.discount(20.0) - det.discount(20.0)).abs();
            // O(ε²): shrinking ε tenfold shrinks the gap ~100-fold.
            assert!(diff < 50.0 * eps * eps, "eps={eps} diff={diff}");
            assert!(diff < prev);
            prev = diff;
        }
    }

    #[test]
    fn beta_zero_is_handled() {
        let p = CirParams::new(0.001, 0.0, 0.02).unwrap();
        let c = CirCurve::new(p, 0.03).unwrap();
        let b = c.discount(10.0);
        assert!(b.is_finite() && b > 0.0 && b < 1.0);
        let det = CirCurve::new(CirParams::new(0.001, 0.0, 0.0).unwrap(), 0.03).unwrap();
        assert_relative_eq!(det.discount(10.0), (-(0.3 + 0.05) as f64).exp(), max_relative = 1e-14);
    }

    #[test]
    fn per_week_conversion() {
        let wk = CirParams::new(1e-4, 2e-3, 1e-2).unwrap().with_unit(TimeUnit::PerWeek);
        let yr = wk.per_year();
        assert_relative_eq!(yr.alpha, 1e-4 * WEEKS_PER_YEAR);
        assert_relative_eq!(yr.beta, 2e-3 * WEEKS_PER_YEAR);
        assert_relative_eq!(yr.sigma, 1e-2 * WEEKS_PER_YEAR.sqrt());
        assert_eq!(yr.unit, TimeUnit::PerYear);
    }

    #[test]
    fn bond_prices_decrease_with_maturity() {
        let p = CirParams::new(1.804e-3, 7.210e-3, 4.093e-2).unwrap();
        let c = CirCurve::new(p, 0.03).unwrap();
        let prices: Vec<f64> = (0..=60).map(|k| c.discount(k as f64 * 0.5)).collect();
        assert!(prices.windows(2).all(|w| w[1] < w[0]));
        assert!(prices.iter().all(|&b| b > 0.0 && b <= 1.0));
    }
}
