//! Implied longevity from life annuity quotes.
//!
//! Annuities are priced under a Gompertz-Makeham law whose modal age and
//! dispersion drift linearly with the purchase week, discounted on a flat or
//! Cox-Ingersoll-Ross curve. Weekly quote panels are inverted by
//! Levenberg-Marquardt least squares to recover the mortality trend, the CIR
//! coefficients and one latent spot rate per week.

pub mod calibration;
pub mod data;
pub mod mortality;
pub mod pricing;
pub mod quadrature;
pub mod report;
pub mod special;
pub mod termstructure;

pub use mortality::{GompertzParams, MortalityError, MortalityTrend, SurvivalCurve, OMEGA};
pub use pricing::{AnnuityContract, PricingConfig, PricingError};
pub use termstructure::{CirCurve, CirParams, DiscountCurve, FlatCurve, TermModel, TimeUnit, WEEKS_PER_YEAR};
pub use data::{Gender, QuotePanel, QuoteRecord};
