//! Gompertz-Makeham mortality with purchase-week drift of the modal age and
//! dispersion.
//!
//! Hazard at age `y`: `λ(y) = λ0 + (1/b) e^{(y − m)/b}`. A [`MortalityTrend`]
//! makes `m` and `b` linear in the purchase week `z`, measured in weeks from
//! the first quote date.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pricing::{self, PricingError};

/// Maximal attainable age; all life-contingent integrals stop here.
pub const OMEGA: f64 = 122.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MortalityError {
    #[error("dispersion b must be positive at week {week}, got {value}")]
    DegenerateDispersion { week: f64, value: f64 },
    #[error("modal age must lie in (0, {omega}), got {value}")]
    ModalAge { value: f64, omega: f64 },
    #[error("accidental hazard lambda0 must be >= 0, got {0}")]
    NegativeAccidental(f64),
    #[error("{what} must be finite and non-negative, got {value}")]
    Domain { what: &'static str, value: f64 },
    #[error(transparent)]
    Pricing(#[from] Box<PricingError>),
}

/// Static Gompertz-Makeham law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GompertzParams {
    pub lambda0: f64,
    pub modal_age: f64,
    pub dispersion: f64,
}

impl GompertzParams {
    pub fn new(lambda0: f64, modal_age: f64, dispersion: f64) -> Result<Self, MortalityError> {
        let p = Self { lambda0, modal_age, dispersion };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), MortalityError> {
        if !(self.dispersion > 0.0 && self.dispersion.is_finite()) {
            return Err(MortalityError::DegenerateDispersion { week: f64::NAN, value: self.dispersion });
        }
        if !(self.modal_age > 0.0 && self.modal_age < OMEGA) {
            return Err(MortalityError::ModalAge { value: self.modal_age, omega: OMEGA });
        }
        if !(self.lambda0 >= 0.0 && self.lambda0.is_finite()) {
            return Err(MortalityError::NegativeAccidental(self.lambda0));
        }
        Ok(())
    }

    pub fn hazard(&self, age: f64) -> f64 {
        self.lambda0 + ((age - self.modal_age) / self.dispersion).exp() / self.dispersion
    }

    /// `ln p(x, t)` without domain checks.
    #[inline]
    pub fn ln_survival_unchecked(&self, x: f64, t: f64) -> f64 {
        let b = self.dispersion;
        let u = t / b;
        let scale = (x - self.modal_age) / b;
        let gompertz = if u > 30.0 {
            // e^u − 1 ≈ e^u; stay in logs so tiny b cannot overflow
            (u + scale).exp()
        } else {
            u.exp_m1() * scale.exp()
        };
        -self.lambda0 * t - gompertz
    }

    /// Probability that a life aged `x` survives `t` more years.
    pub fn survival(&self, x: f64, t: f64) -> Result<f64, MortalityError> {
        check_non_negative("age", x)?;
        check_non_negative("horizon", t)?;
        Ok(self.ln_survival_unchecked(x, t).exp())
    }

    /// Remaining life expectancy at age `x`, truncated at [`OMEGA`]. Equal to
    /// the continuous life annuity factor at zero interest.
    pub fn life_expectancy(&self, x: f64) -> Result<f64, MortalityError> {
        check_non_negative("age", x)?;
        pricing::gompertz_annuity(self, x, 0.0, 0.0, OMEGA).map_err(|e| MortalityError::Pricing(Box::new(e)))
    }
}

fn check_non_negative(what: &'static str, value: f64) -> Result<(), MortalityError> {
    if value >= 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(MortalityError::Domain { what, value })
    }
}

/// GM parameters drifting linearly in the purchase week.
///
/// `m1` and `b1` are per-week slopes; `reference_week` is `z0` (normally 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MortalityTrend {
    pub lambda0: f64,
    pub m0: f64,
    pub m1: f64,
    pub b0: f64,
    pub b1: f64,
    #[serde(default)]
    pub reference_week: f64,
}

impl MortalityTrend {
    pub fn new(lambda0: f64, m0: f64, m1: f64, b0: f64, b1: f64) -> Self {
        Self { lambda0, m0, m1, b0, b1, reference_week: 0.0 }
    }

    /// Time-invariant trend.
    pub fn constant(params: GompertzParams) -> Self {
        Self::new(params.lambda0, params.modal_age, 0.0, params.dispersion, 0.0)
    }

    /// The same trend with the drift removed.
    pub fn without_drift(&self) -> Self {
        Self { m1: 0.0, b1: 0.0, ..*self }
    }

    /// Evaluated parameters for purchases in week `z`.
    pub fn at_week(&self, z: f64) -> Result<GompertzParams, MortalityError> {
        let dz = z - self.reference_week;
        let dispersion = self.b0 + self.b1 * dz;
        if !(dispersion > 0.0 && dispersion.is_finite()) {
            return Err(MortalityError::DegenerateDispersion { week: z, value: dispersion });
        }
        let p = GompertzParams { lambda0: self.lambda0, modal_age: self.m0 + self.m1 * dz, dispersion };
        p.validate()?;
        Ok(p)
    }

    pub fn survival_at_week(&self, x: f64, t: f64, z: f64) -> Result<f64, MortalityError> {
        self.at_week(z)?.survival(x, t)
    }

    pub fn life_expectancy_at_week(&self, x: f64, z: f64) -> Result<f64, MortalityError> {
        self.at_week(z)?.life_expectancy(x)
    }
}

/// Survival probabilities from one age for one purchase week.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve {
    pub age: f64,
    pub week: f64,
    /// `(t, p(x, t | z))` pairs in increasing `t`.
    pub points: Vec<(f64, f64)>,
}

impl SurvivalCurve {
    pub fn from_trend(trend: &MortalityTrend, age: f64, week: f64, horizons: &[f64]) -> Result<Self, MortalityError> {
        let params = trend.at_week(week)?;
        let mut ts = horizons.to_vec();
        ts.sort_by(f64::total_cmp);
        let points = ts
            .into_iter()
            .map(|t| params.survival(age, t).map(|p| (t, p)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { age, week, points })
    }

    /// Probability at horizon `t`, if tabulated.
    pub fn at(&self, t: f64) -> Option<f64> {
        self.points.iter().find(|(h, _)| *h == t).map(|(_, p)| *p)
    }
}
