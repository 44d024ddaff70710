//! Life annuity factors: the Gompertz closed form for flat rates, adaptive
//! quadrature for arbitrary discount curves, and the discrete annual sum.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mortality::{GompertzParams, MortalityError, MortalityTrend, OMEGA};
use crate::quadrature::{self, QuadratureError, Tolerance};
use crate::special::{self, SpecialError};
use crate::termstructure::{DiscountCurve, FlatCurve};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PricingError {
    #[error("invalid contract: {0}")]
    Contract(String),
    #[error("invalid rate {0}; rates must be finite and non-negative")]
    Rate(f64),
    #[error(transparent)]
    Mortality(#[from] MortalityError),
    #[error(transparent)]
    Special(#[from] SpecialError),
    #[error("quadrature: {0}")]
    Quadrature(#[from] QuadratureError),
    #[error("malformed survival vector: {0}")]
    SurvivalVector(String),
    #[error("quote inputs must be positive: monthly income {monthly_income}, premium {premium}")]
    Quote { monthly_income: f64, premium: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PricingConfig {
    /// Maximal age.
    pub omega: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_subdivisions: usize,
}

impl Default for PricingConfig {
    fn default() -> Self {
        Self { omega: OMEGA, rel_tol: 1e-9, abs_tol: 1e-13, max_subdivisions: 500 }
    }
}

impl PricingConfig {
    fn tolerance(&self) -> Tolerance {
        Tolerance { rel: self.rel_tol, abs: self.abs_tol, max_subdivisions: self.max_subdivisions }
    }
}

/// One priced instrument: purchase age, guarantee years, purchase week.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnuityContract {
    pub age: f64,
    pub guarantee: f64,
    pub week: f64,
}

impl AnnuityContract {
    pub fn new(age: f64, guarantee: f64, week: f64) -> Self {
        Self { age, guarantee, week }
    }

    pub fn validate(&self, omega: f64) -> Result<(), PricingError> {
        if !(self.age > 0.0 && self.age < omega) {
            return Err(PricingError::Contract(format!("age {} outside (0, {omega})", self.age)));
        }
        if !(self.guarantee >= 0.0 && self.guarantee.is_finite()) {
            return Err(PricingError::Contract(format!("guarantee {} must be >= 0", self.guarantee)));
        }
        if self.age + self.guarantee > omega {
            return Err(PricingError::Contract(format!(
                "age {} + guarantee {} exceeds omega {omega}",
                self.age, self.guarantee
            )));
        }
        if !self.week.is_finite() {
            return Err(PricingError::Contract(format!("week {} is not finite", self.week)));
        }
        Ok(())
    }
}

fn check_rate(r: f64) -> Result<(), PricingError> {
    if r >= 0.0 && r.is_finite() {
        Ok(())
    } else {
        Err(PricingError::Rate(r))
    }
}

/// `(1 − e^{−rT})/r`, equal to `T` at `r = 0`.
pub fn certain_annuity(r: f64, term: f64) -> f64 {
    if r == 0.0 {
        term
    } else {
        -(-r * term).exp_m1() / r
    }
}

/// `∫_T^∞ e^{−rs} p(x, s) ds` via the upper incomplete gamma function.
fn life_part_untruncated(p: &GompertzParams, x: f64, guarantee: f64, r: f64) -> Result<f64, PricingError> {
    let (m, b) = (p.modal_age, p.dispersion);
    let force = r + p.lambda0;
    let order = -b * force;
    let arg = ((x - m + guarantee) / b).exp();
    let ln_gamma = special::ln_upper_incomplete_gamma(order, arg)?;
    Ok(b * (ln_gamma + force * (x - m) + ((x - m) / b).exp()).exp())
}

/// Gompertz annuity pricing model for a static law and flat rate `r`,
/// with the life-contingent part stopped at age `omega`.
///
/// The closed form runs to infinity; the part beyond `omega` equals
/// `e^{−r(ω−x)} p(x, ω−x) · ā(ω, 0, r)` and is subtracted.
pub fn gompertz_annuity(p: &GompertzParams, x: f64, guarantee: f64, r: f64, omega: f64) -> Result<f64, PricingError> {
    check_rate(r)?;
    AnnuityContract::new(x, guarantee, 0.0).validate(omega)?;
    p.validate()?;
    let certain = certain_annuity(r, guarantee);
    if x + guarantee >= omega {
        return Ok(certain);
    }
    if (x - p.modal_age + guarantee) / p.dispersion < -700.0 {
        // e^{(x−m+T)/b} underflows: hazard is negligible over most of the
        // range, integrate directly instead
        let tol = PricingConfig::default().tolerance();
        let life = quadrature::integrate(
            |s| (-r * s + p.ln_survival_unchecked(x, s)).exp(),
            guarantee,
            omega - x,
            &Tolerance { rel: 1e-12, ..tol },
        )?;
        return Ok(certain + life.value);
    }
    let life = life_part_untruncated(p, x, guarantee, r)?;
    let horizon = omega - x;
    let tail_weight = (-r * horizon + p.ln_survival_unchecked(x, horizon)).exp();
    let tail = if tail_weight > 0.0 { tail_weight * life_part_untruncated(p, omega, 0.0, r)? } else { 0.0 };
    Ok(certain + (life - tail).max(0.0))
}

/// Closed-form factor for a flat curve, with the trend evaluated at the
/// contract's purchase week.
pub fn annuity_factor_flat(
    contract: &AnnuityContract,
    trend: &MortalityTrend,
    r: f64,
    config: &PricingConfig,
) -> Result<f64, PricingError> {
    contract.validate(config.omega)?;
    let params = trend.at_week(contract.week)?;
    gompertz_annuity(&params, contract.age, contract.guarantee, r, config.omega)
}

/// `∫_0^T B(s) ds + ∫_T^{ω−x} B(s) p(x, s | z) ds` by adaptive quadrature.
pub fn annuity_factor_general<C: DiscountCurve + ?Sized>(
    contract: &AnnuityContract,
    trend: &MortalityTrend,
    curve: &C,
    config: &PricingConfig,
) -> Result<f64, PricingError> {
    contract.validate(config.omega)?;
    let params = trend.at_week(contract.week)?;
    let tol = config.tolerance();
    let x = contract.age;
    let guarantee = contract.guarantee;
    let certain = quadrature::integrate(|s| curve.discount(s), 0.0, guarantee, &tol)?;
    let life = quadrature::integrate(
        |s| curve.discount(s) * params.ln_survival_unchecked(x, s).exp(),
        guarantee,
        config.omega - x,
        &tol,
    )?;
    Ok(certain.value + life.value)
}

/// Flat-curve convenience wrapper over [`annuity_factor_general`].
pub fn annuity_factor_flat_quadrature(
    contract: &AnnuityContract,
    trend: &MortalityTrend,
    r: f64,
    config: &PricingConfig,
) -> Result<f64, PricingError> {
    let curve = FlatCurve::new(r).map_err(|_| PricingError::Rate(r))?;
    annuity_factor_general(contract, trend, &curve, config)
}

/// Annual-payment factor `Σ_{i≤T} v^i + Σ_{i>T} p(x, i) v^i`, `v = 1/(1+R)`.
///
/// `survival[i − 1]` is `p(x, i)`; the vector should run to `ω − x`, with
/// zeros once survival is impossible.
pub fn annuity_factor_annual(x: f64, guarantee: u32, annual_rate: f64, survival: &[f64]) -> Result<f64, PricingError> {
    if !(x >= 0.0 && x.is_finite()) {
        return Err(PricingError::Contract(format!("age {x} must be finite and >= 0")));
    }
    if !(annual_rate > -1.0 && annual_rate.is_finite()) {
        return Err(PricingError::Rate(annual_rate));
    }
    let mut prev = 1.0;
    for (i, &p) in survival.iter().enumerate() {
        if !(0.0..=1.0).contains(&p) {
            return Err(PricingError::SurvivalVector(format!("p(x, {}) = {p} outside [0, 1]", i + 1)));
        }
        if p > prev {
            return Err(PricingError::SurvivalVector(format!("p(x, {}) = {p} exceeds p(x, {}) = {prev}", i + 1, i)));
        }
        prev = p;
    }
    let v = 1.0 / (1.0 + annual_rate);
    let n = survival.len().max(guarantee as usize);
    let mut total = 0.0;
    let mut disc = 1.0;
    for i in 1..=n {
        disc *= v;
        let weight = if i <= guarantee as usize { 1.0 } else { survival.get(i - 1).copied().unwrap_or(0.0) };
        total += weight * disc;
    }
    Ok(total)
}

/// Discrete factor with `payments_per_year` equal instalments in arrears:
/// the annual formula with a finer payment grid. Tends to the continuous
/// factor as the frequency grows.
pub fn annuity_factor_periodic(
    params: &GompertzParams,
    x: f64,
    guarantee: f64,
    rate: f64,
    payments_per_year: u32,
    omega: f64,
) -> Result<f64, PricingError> {
    check_rate(rate)?;
    AnnuityContract::new(x, guarantee, 0.0).validate(omega)?;
    if payments_per_year == 0 {
        return Err(PricingError::Contract("payments_per_year must be >= 1".into()));
    }
    let n = payments_per_year as f64;
    let last = ((omega - x) * n).floor() as u64;
    let guaranteed = (guarantee * n).floor() as u64;
    let mut total = 0.0;
    for k in 1..=last {
        let t = k as f64 / n;
        let weight = if k <= guaranteed { 1.0 } else { params.ln_survival_unchecked(x, t).exp() };
        total += weight * (-rate * t).exp();
    }
    Ok(total / n)
}

/// Annuity factor implied by a quote: premium per dollar of annual income.
pub fn quote_to_factor(monthly_income: f64, premium: f64) -> Result<f64, PricingError> {
    if !(monthly_income > 0.0 && premium > 0.0 && monthly_income.is_finite() && premium.is_finite()) {
        return Err(PricingError::Quote { monthly_income, premium });
    }
    Ok(premium / (12.0 * monthly_income))
}

/// Inverse of [`quote_to_factor`].
pub fn factor_to_monthly_income(factor: f64, premium: f64) -> Result<f64, PricingError> {
    if !(factor > 0.0 && premium > 0.0 && factor.is_finite() && premium.is_finite()) {
        return Err(PricingError::Quote { monthly_income: factor, premium });
    }
    Ok(premium / (12.0 * factor))
}
