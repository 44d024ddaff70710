//! Least-squares inversion of quote panels.
//!
//! Global parameters are the mortality trend `(λ0, m0, m1, b0, b1)` and, for
//! the curved model, the CIR coefficients `(α, β, σ)` in per-year units.
//! Every week with quotes also carries a latent spot rate `r_z`.
//!
//! Two solver modes are offered. `Nested` runs the outer Levenberg-Marquardt
//! iteration over the globals only; each residual evaluation first solves
//! every week's spot rate by a one-dimensional Gauss-Newton iteration and the
//! global Jacobian is projected onto the orthogonal complement of the spot
//! column of its week. `Joint` treats all parameters in one iteration and
//! solves the arrow-shaped normal equations by Schur complement.

pub mod ftest;
pub mod lm;
pub mod pricer;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, Gender, QuoteKey, QuotePanel};
use crate::mortality::{GompertzParams, MortalityError, MortalityTrend, OMEGA};
use crate::pricing::{PricingConfig, PricingError};
use crate::termstructure::{CirParams, TermModel, TimeUnit};

pub use ftest::{average_rate_curves, partial_f_test, FTestReport};
pub use lm::{LmOptions, StopReason};
use lm::{NormalEquations, Problem};
use pricer::{TermGrid, WeekPricer};

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("invalid fit specification: {0}")]
    Spec(String),
    #[error("no spot rate for week {week}")]
    MissingWeek { week: u32 },
    #[error("panel has no {gender} quotes")]
    EmptyPanel { gender: Gender },
    #[error(transparent)]
    Mortality(#[from] MortalityError),
    #[error("pricing failed for {key}: {source}")]
    Pricing {
        key: QuoteKey,
        #[source]
        source: PricingError,
    },
    #[error("model produced a non-finite value in week {week}")]
    NonFinite { week: u32 },
    #[error("invalid degrees of freedom: {0}")]
    Degrees(String),
    #[error("rate curves cover different weeks: {0}")]
    CoverageMismatch(String),
    #[error("artifact: {0}")]
    Artifact(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Flat,
    Cir,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Flat => "flat",
            ModelKind::Cir => "cir",
        })
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "flat" => Ok(ModelKind::Flat),
            "cir" | "curved" => Ok(ModelKind::Cir),
            other => Err(format!("unknown model `{other}` (expected flat|cir)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FdScheme {
    #[serde(rename = "3-point")]
    ThreePoint,
    #[serde(rename = "5-point")]
    FivePoint,
}

impl FdScheme {
    /// Relative step, applied to `max(|value|, scale)`.
    pub fn relative_step(&self) -> f64 {
        match self {
            FdScheme::ThreePoint => 1e-6,
            FdScheme::FivePoint => 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverMode {
    Nested,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialGuess {
    pub trend: MortalityTrend,
    pub cir: Option<CirParams>,
    /// Starting spot rate for every week.
    pub spot_rate: f64,
}

impl InitialGuess {
    /// Generic starting point for adult annuitant mortality.
    pub fn generic(model: ModelKind) -> Self {
        Self {
            trend: MortalityTrend::new(1e-3, 90.0, 0.0, 10.0, 0.0),
            cir: (model == ModelKind::Cir).then(|| CirParams { alpha: 2e-3, beta: 5e-3, sigma: 0.04, unit: TimeUnit::PerYear }),
            spot_rate: 0.04,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSpec {
    pub model: ModelKind,
    pub gender: Gender,
    pub initial: InitialGuess,
    /// Square the non-negative parameters (λ0, m0, b0, α, β, σ and, in joint
    /// mode, the spot rates) so they stay ≥ 0.
    pub positivity: bool,
    pub tolerances: LmOptions,
    pub fd_scheme: FdScheme,
    pub solver: SolverMode,
    /// Fix m1 = b1 = 0 (the restricted model of the drift test).
    pub restrict_drift: bool,
    /// Gauss-Legendre points per integration piece.
    pub quadrature_points: usize,
    /// Widest integration piece in years.
    pub max_piece_years: f64,
    pub omega: f64,
}

impl FitSpec {
    pub fn new(model: ModelKind, gender: Gender, initial: InitialGuess) -> Self {
        Self {
            model,
            gender,
            initial,
            positivity: true,
            tolerances: LmOptions::default(),
            fd_scheme: FdScheme::ThreePoint,
            solver: SolverMode::Nested,
            restrict_drift: false,
            quadrature_points: 12,
            max_piece_years: 5.0,
            omega: OMEGA,
        }
    }

    pub fn validate(&self) -> Result<(), CalibrationError> {
        let t = &self.tolerances;
        if !(t.gtol > 0.0 && t.xtol > 0.0 && t.ftol > 0.0 && t.sse_tol >= 0.0) {
            return Err(CalibrationError::Spec("tolerances must be > 0".into()));
        }
        let tr = &self.initial.trend;
        let values = [tr.lambda0, tr.m0, tr.m1, tr.b0, tr.b1, self.initial.spot_rate];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CalibrationError::Spec("initial guesses must be finite".into()));
        }
        if !(tr.b0 > 0.0) {
            return Err(CalibrationError::Spec("initial b0 must be > 0".into()));
        }
        match (self.model, &self.initial.cir) {
            (ModelKind::Cir, None) => return Err(CalibrationError::Spec("CIR model needs initial CIR parameters".into())),
            (ModelKind::Cir, Some(c)) if ![c.alpha, c.beta, c.sigma].iter().all(|v| v.is_finite()) => {
                return Err(CalibrationError::Spec("initial CIR parameters must be finite".into()))
            }
            _ => {}
        }
        if self.quadrature_points < 2 || !(self.max_piece_years > 0.0) {
            return Err(CalibrationError::Spec("quadrature settings must be positive".into()));
        }
        Ok(())
    }
}

pub const PARAM_NAMES: [&str; 8] = ["lambda0", "m0", "m1", "b0", "b1", "alpha", "beta", "sigma"];
const NON_NEGATIVE: [bool; 8] = [true, true, false, true, false, true, true, true];
// typical magnitude of each internal coordinate, used as the floor of the
// finite-difference step
const STEP_SCALE: [f64; 8] = [1e-2, 1.0, 1e-3, 1.0, 1e-3, 1e-2, 1e-2, 1e-2];
const SPOT_SCALE: f64 = 1e-2;

/// Map between the free internal vector and the natural parameters.
#[derive(Debug, Clone)]
struct ParamSpace {
    n_total: usize,
    free: Vec<usize>,
    fixed: [f64; 8],
    positivity: bool,
}

impl ParamSpace {
    fn new(spec: &FitSpec) -> Self {
        let n_total = if spec.model == ModelKind::Cir { 8 } else { 5 };
        let t = &spec.initial.trend;
        let c = spec.initial.cir.map(|c| c.per_year()).unwrap_or(CirParams { alpha: 0.0, beta: 0.0, sigma: 0.0, unit: TimeUnit::PerYear });
        let mut fixed = [t.lambda0, t.m0, t.m1, t.b0, t.b1, c.alpha, c.beta, c.sigma];
        if spec.restrict_drift {
            fixed[2] = 0.0;
            fixed[4] = 0.0;
        }
        let free = (0..n_total).filter(|i| !(spec.restrict_drift && (*i == 2 || *i == 4))).collect();
        Self { n_total, free, fixed, positivity: spec.positivity }
    }

    fn squared(&self, i: usize) -> bool {
        self.positivity && NON_NEGATIVE[i]
    }

    fn natural(&self, u: &[f64]) -> [f64; 8] {
        let mut out = self.fixed;
        for (k, &i) in self.free.iter().enumerate() {
            out[i] = if self.squared(i) { u[k] * u[k] } else { u[k] };
        }
        out
    }

    fn internal(&self, nat: &[f64; 8]) -> Vec<f64> {
        self.free
            .iter()
            .map(|&i| if self.squared(i) { nat[i].max(0.0).sqrt() } else { nat[i] })
            .collect()
    }

    /// `dθ/du` for each free coordinate.
    fn chain(&self, u: &[f64]) -> Vec<f64> {
        self.free.iter().enumerate().map(|(k, &i)| if self.squared(i) { 2.0 * u[k] } else { 1.0 }).collect()
    }

    fn step(&self, k: usize, u: f64, scheme: FdScheme) -> f64 {
        scheme.relative_step() * u.abs().max(STEP_SCALE[self.free[k]])
    }

    fn model(&self, nat: &[f64; 8]) -> (MortalityTrend, TermModel) {
        let trend = MortalityTrend::new(nat[0], nat[1], nat[2], nat[3], nat[4]);
        let term = if self.n_total == 8 {
            TermModel::Cir(CirParams { alpha: nat[5], beta: nat[6], sigma: nat[7], unit: TimeUnit::PerYear })
        } else {
            TermModel::Flat
        };
        (trend, term)
    }
}

#[derive(Debug, Clone)]
struct WeekBlock {
    week: u32,
    offset: usize,
    cells: Vec<usize>,
    observed: Vec<f64>,
}

/// One gender's quotes grouped by week, in `(week, age, guarantee)` order.
#[derive(Debug, Clone)]
struct PanelView {
    ages: Vec<u32>,
    guarantees: Vec<u32>,
    blocks: Vec<WeekBlock>,
    n_obs: usize,
}

impl PanelView {
    fn new(panel: &QuotePanel, gender: Gender) -> Result<Self, CalibrationError> {
        let quotes: Vec<_> = panel.quotes_for(gender).collect();
        if quotes.is_empty() {
            return Err(CalibrationError::EmptyPanel { gender });
        }
        let ages: Vec<u32> = quotes.iter().map(|q| q.key.age).collect::<BTreeSet<_>>().into_iter().collect();
        let guarantees: Vec<u32> =
            quotes.iter().map(|q| q.key.guarantee).collect::<BTreeSet<_>>().into_iter().collect();
        let ng = guarantees.len();
        let mut blocks: Vec<WeekBlock> = Vec::new();
        for (n, q) in quotes.iter().enumerate() {
            if blocks.last().map(|b| b.week) != Some(q.key.week) {
                blocks.push(WeekBlock { week: q.key.week, offset: n, cells: Vec::new(), observed: Vec::new() });
            }
            let i = ages.binary_search(&q.key.age).expect("age present");
            let j = guarantees.binary_search(&q.key.guarantee).expect("guarantee present");
            let block = blocks.last_mut().expect("pushed");
            block.cells.push(i * ng + j);
            block.observed.push(q.factor());
        }
        Ok(Self { ages, guarantees, blocks, n_obs: quotes.len() })
    }
}

struct Evaluator {
    view: PanelView,
    pricer: WeekPricer,
}

impl Evaluator {
    fn new(view: PanelView, spec: &FitSpec) -> Result<Self, CalibrationError> {
        let ages: Vec<f64> = view.ages.iter().map(|a| f64::from(*a)).collect();
        let gs: Vec<f64> = view.guarantees.iter().map(|g| f64::from(*g)).collect();
        let pricer = WeekPricer::new(&ages, &gs, spec.omega, spec.quadrature_points, spec.max_piece_years)?;
        Ok(Self { view, pricer })
    }

    fn n_weeks(&self) -> usize {
        self.view.blocks.len()
    }

    /// Residuals of one week; `d_rate` receives the spot derivatives.
    fn week(
        &self,
        block: &WeekBlock,
        grid: &TermGrid,
        law: &GompertzParams,
        r: f64,
        out: &mut [f64],
        d_rate: Option<&mut [f64]>,
    ) -> Result<(), CalibrationError> {
        let n = self.pricer.n_cells();
        let mut f = vec![0.0; n];
        match d_rate {
            Some(d) => {
                let mut df = vec![0.0; n];
                self.pricer.price(grid, law, r, &mut f, Some(&mut df));
                for (k, &c) in block.cells.iter().enumerate() {
                    d[k] = df[c];
                }
            }
            None => self.pricer.price(grid, law, r, &mut f, None),
        }
        for (k, &c) in block.cells.iter().enumerate() {
            out[k] = f[c] - block.observed[k];
        }
        if out.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(CalibrationError::NonFinite { week: block.week })
        }
    }

    fn residuals(&self, trend: &MortalityTrend, grid: &TermGrid, spots: &[f64]) -> Result<Vec<f64>, CalibrationError> {
        let parts: Vec<Vec<f64>> = self
            .view
            .blocks
            .par_iter()
            .zip(spots.par_iter())
            .map(|(block, &r)| {
                let law = trend.at_week(f64::from(block.week))?;
                let mut out = vec![0.0; block.cells.len()];
                self.week(block, grid, &law, r, &mut out, None)?;
                Ok(out)
            })
            .collect::<Result<_, CalibrationError>>()?;
        Ok(parts.concat())
    }

    /// Least-squares spot rate for one week, constrained to `r >= 0`.
    /// Returns the rate, whether the bound is active, and the residuals.
    fn solve_spot(
        &self,
        block: &WeekBlock,
        grid: &TermGrid,
        law: &GompertzParams,
        start: f64,
    ) -> Result<(f64, bool, Vec<f64>), CalibrationError> {
        let m = block.cells.len();
        let mut res = vec![0.0; m];
        let mut d = vec![0.0; m];
        let mut trial = vec![0.0; m];
        let mut r = start.max(0.0);
        self.week(block, grid, law, r, &mut res, Some(&mut d))?;
        let mut sse: f64 = res.iter().map(|v| v * v).sum();
        for _ in 0..100 {
            let g: f64 = d.iter().zip(&res).map(|(a, b)| a * b).sum();
            let h: f64 = d.iter().map(|a| a * a).sum();
            if !(h > 0.0) {
                break;
            }
            let mut step = -g / h;
            if r == 0.0 && step <= 0.0 {
                return Ok((0.0, true, res));
            }
            let mut accepted = false;
            for _ in 0..40 {
                let r_new = (r + step).max(0.0);
                self.week(block, grid, law, r_new, &mut trial, None)?;
                let sse_new: f64 = trial.iter().map(|v| v * v).sum();
                if sse_new <= sse {
                    let moved = (r_new - r).abs();
                    r = r_new;
                    sse = sse_new;
                    accepted = true;
                    if moved <= 1e-15 * r.max(1e-2) {
                        self.week(block, grid, law, r, &mut res, Some(&mut d))?;
                        return Ok((r, r == 0.0, res));
                    }
                    break;
                }
                step *= 0.5;
            }
            self.week(block, grid, law, r, &mut res, Some(&mut d))?;
            if !accepted {
                break;
            }
        }
        Ok((r, r == 0.0, res))
    }

    /// Finite-difference derivative of all residuals with respect to one
    /// global coordinate, spot rates held fixed.
    fn global_column(
        &self,
        space: &ParamSpace,
        u: &[f64],
        k: usize,
        spots: &[f64],
        scheme: FdScheme,
    ) -> Result<Vec<f64>, CalibrationError> {
        let h = space.step(k, u[k], scheme);
        let eval = |delta: f64| {
            let mut v = u.to_vec();
            v[k] += delta;
            let (trend, term) = space.model(&space.natural(&v));
            let grid = self.pricer.term_grid(&term);
            self.residuals(&trend, &grid, spots)
        };
        fd_combine(eval, h, scheme)
    }

    /// Derivative of every residual with respect to its own week's spot
    /// coordinate (all weeks perturbed at once; weeks do not interact).
    fn spot_column(
        &self,
        trend: &MortalityTrend,
        grid: &TermGrid,
        coords: &[f64],
        squared: bool,
        scheme: FdScheme,
    ) -> Result<Vec<f64>, CalibrationError> {
        let steps: Vec<f64> = coords.iter().map(|c| scheme.relative_step() * c.abs().max(SPOT_SCALE)).collect();
        let eval = |factor: f64| {
            let spots: Vec<f64> = coords
                .iter()
                .zip(&steps)
                .map(|(c, h)| {
                    let v = c + factor * h;
                    if squared { v * v } else { v }
                })
                .collect();
            self.residuals(trend, grid, &spots)
        };
        let unit = fd_combine(eval, 1.0, scheme)?;
        let mut out = unit;
        for (block, h) in self.view.blocks.iter().zip(&steps) {
            for v in &mut out[block.offset..block.offset + block.cells.len()] {
                *v /= h;
            }
        }
        Ok(out)
    }
}

fn fd_combine<F>(eval: F, h: f64, scheme: FdScheme) -> Result<Vec<f64>, CalibrationError>
where
    F: Fn(f64) -> Result<Vec<f64>, CalibrationError>,
{
    match scheme {
        FdScheme::ThreePoint => {
            let up = eval(h)?;
            let dn = eval(-h)?;
            Ok(up.iter().zip(&dn).map(|(a, b)| (a - b) / (2.0 * h)).collect())
        }
        FdScheme::FivePoint => {
            let (p2, p1, m1, m2) = (eval(2.0 * h)?, eval(h)?, eval(-h)?, eval(-2.0 * h)?);
            Ok((0..p1.len()).map(|i| (-p2[i] + 8.0 * p1[i] - 8.0 * m1[i] + m2[i]) / (12.0 * h)).collect())
        }
    }
}

fn column_matrix(columns: &[Vec<f64>], n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, columns.len(), |i, j| columns[j][i])
}

struct Nested<'a> {
    ev: &'a Evaluator,
    space: &'a ParamSpace,
    scheme: FdScheme,
    spots: Vec<f64>,
    bound: Vec<bool>,
    trial: Option<(Vec<f64>, Vec<f64>, Vec<bool>)>,
}

impl Problem for Nested<'_> {
    fn residuals(&mut self, u: &[f64]) -> Result<Vec<f64>, CalibrationError> {
        let (trend, term) = self.space.model(&self.space.natural(u));
        let grid = self.ev.pricer.term_grid(&term);
        let solved: Vec<(f64, bool, Vec<f64>)> = self
            .ev
            .view
            .blocks
            .par_iter()
            .zip(self.spots.par_iter())
            .map(|(block, &start)| {
                let law = trend.at_week(f64::from(block.week))?;
                self.ev.solve_spot(block, &grid, &law, start)
            })
            .collect::<Result<_, CalibrationError>>()?;
        let mut res = Vec::with_capacity(self.ev.view.n_obs);
        let mut spots = Vec::with_capacity(solved.len());
        let mut bound = Vec::with_capacity(solved.len());
        for (r, b, part) in solved {
            spots.push(r);
            bound.push(b);
            res.extend(part);
        }
        self.trial = Some((u.to_vec(), spots, bound));
        Ok(res)
    }

    fn accepted(&mut self, u: &[f64]) {
        if let Some((tu, spots, bound)) = self.trial.take() {
            if tu == u {
                self.spots = spots;
                self.bound = bound;
            }
        }
    }

    fn normal_equations(&mut self, u: &[f64], r: &[f64]) -> Result<NormalEquations, CalibrationError> {
        let n = r.len();
        let mut cols = Vec::with_capacity(u.len());
        for k in 0..u.len() {
            cols.push(self.ev.global_column(self.space, u, k, &self.spots, self.scheme)?);
        }
        let (trend, term) = self.space.model(&self.space.natural(u));
        let grid = self.ev.pricer.term_grid(&term);
        let jr = self.ev.spot_column(&trend, &grid, &self.spots, false, self.scheme)?;
        // project each week's block off its spot direction
        for (block, at_bound) in self.ev.view.blocks.iter().zip(&self.bound) {
            if *at_bound {
                continue;
            }
            let range = block.offset..block.offset + block.cells.len();
            let js = &jr[range.clone()];
            let norm: f64 = js.iter().map(|v| v * v).sum();
            if norm <= 0.0 {
                continue;
            }
            for col in cols.iter_mut() {
                let part = &mut col[range.clone()];
                let coef = part.iter().zip(js).map(|(a, b)| a * b).sum::<f64>() / norm;
                for (a, b) in part.iter_mut().zip(js) {
                    *a -= coef * b;
                }
            }
        }
        let j = column_matrix(&cols, n);
        let a = j.tr_mul(&j);
        let g = j.tr_mul(&nalgebra::DVector::from_column_slice(r));
        Ok(NormalEquations::dense(a, g.iter().copied().collect()))
    }
}

struct Joint<'a> {
    ev: &'a Evaluator,
    space: &'a ParamSpace,
    scheme: FdScheme,
}

impl Joint<'_> {
    fn split<'x>(&self, x: &'x [f64]) -> (&'x [f64], &'x [f64]) {
        x.split_at(self.space.free.len())
    }

    fn spots(&self, v: &[f64]) -> Vec<f64> {
        if self.space.positivity {
            v.iter().map(|c| c * c).collect()
        } else {
            v.to_vec()
        }
    }
}

impl Problem for Joint<'_> {
    fn residuals(&mut self, x: &[f64]) -> Result<Vec<f64>, CalibrationError> {
        let (u, v) = self.split(x);
        let (trend, term) = self.space.model(&self.space.natural(u));
        let grid = self.ev.pricer.term_grid(&term);
        self.ev.residuals(&trend, &grid, &self.spots(v))
    }

    fn normal_equations(&mut self, x: &[f64], r: &[f64]) -> Result<NormalEquations, CalibrationError> {
        let (u, v) = self.split(x);
        let spots = self.spots(v);
        let n = r.len();
        let p = u.len();
        let mut cols = Vec::with_capacity(p);
        for k in 0..p {
            cols.push(self.ev.global_column(self.space, u, k, &spots, self.scheme)?);
        }
        let (trend, term) = self.space.model(&self.space.natural(u));
        let grid = self.ev.pricer.term_grid(&term);
        let js = self.ev.spot_column(&trend, &grid, v, self.space.positivity, self.scheme)?;
        let j = column_matrix(&cols, n);
        let a = j.tr_mul(&j);
        let mut g: Vec<f64> = j.tr_mul(&nalgebra::DVector::from_column_slice(r)).iter().copied().collect();
        let q = self.ev.n_weeks();
        let mut b = DMatrix::zeros(p, q);
        let mut d = vec![0.0; q];
        for (w, block) in self.ev.view.blocks.iter().enumerate() {
            let range = block.offset..block.offset + block.cells.len();
            let jw = &js[range.clone()];
            for k in 0..p {
                b[(k, w)] = cols[k][range.clone()].iter().zip(jw).map(|(a, c)| a * c).sum();
            }
            d[w] = jw.iter().map(|c| c * c).sum();
            g.push(jw.iter().zip(&r[range]).map(|(a, c)| a * c).sum());
        }
        Ok(NormalEquations { a, b, d, g })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Condition number of the global information matrix (spot rates
    /// profiled out), in the solver's internal coordinates.
    pub condition_number: f64,
    /// Set when the condition number exceeds 1e12.
    pub jacobian_rank_flag: bool,
    pub std_errors: BTreeMap<String, f64>,
    pub std_errors_trusted: bool,
    pub spot_rates_at_zero: usize,
    pub stop_reason: StopReason,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub gender: Gender,
    pub model: ModelKind,
    pub trend: MortalityTrend,
    pub cir: Option<CirParams>,
    pub spot_rates: BTreeMap<u32, f64>,
    pub sse: f64,
    pub residuals: Vec<f64>,
    pub n_obs: usize,
    /// Free parameters, globals plus one spot rate per week.
    pub n_params: usize,
    pub iterations: usize,
    pub sse_trace: Vec<f64>,
    pub converged: bool,
    pub diagnostics: Diagnostics,
    pub spec: FitSpec,
}

impl CalibrationResult {
    pub fn term_model(&self) -> TermModel {
        self.cir.map_or(TermModel::Flat, TermModel::Cir)
    }
}

const RANK_THRESHOLD: f64 = 1e12;

/// Fits one gender of `panel` per `spec`.
pub fn fit(panel: &QuotePanel, spec: &FitSpec) -> Result<CalibrationResult, CalibrationError> {
    spec.validate()?;
    let view = PanelView::new(panel, spec.gender)?;
    let ev = Evaluator::new(view, spec)?;
    let space = ParamSpace::new(spec);
    let u0 = space.internal(&space.fixed);
    let weeks: Vec<u32> = ev.view.blocks.iter().map(|b| b.week).collect();
    let mut nested = Nested {
        ev: &ev,
        space: &space,
        scheme: spec.fd_scheme,
        spots: vec![spec.initial.spot_rate.max(0.0); weeks.len()],
        bound: vec![false; weeks.len()],
        trial: None,
    };
    let (outcome, u, spots) = match spec.solver {
        SolverMode::Nested => {
            let out = lm::minimize(&mut nested, &u0, &spec.tolerances)?;
            let u = out.x.clone();
            let spots = nested.spots.clone();
            (out, u, spots)
        }
        SolverMode::Joint => {
            // spot rates start from their week-wise optimum at the initial globals
            nested.residuals(&u0)?;
            nested.accepted(&u0);
            let start: Vec<f64> = if spec.positivity {
                nested.spots.iter().map(|r| r.sqrt()).collect()
            } else {
                nested.spots.clone()
            };
            let mut joint = Joint { ev: &ev, space: &space, scheme: spec.fd_scheme };
            let x0: Vec<f64> = u0.iter().copied().chain(start).collect();
            let out = lm::minimize(&mut joint, &x0, &spec.tolerances)?;
            let (u, v) = joint.split(&out.x);
            let (u, spots) = (u.to_vec(), joint.spots(v));
            (out, u, spots)
        }
    };

    let nat = space.natural(&u);
    let (trend, term) = space.model(&nat);
    let p = space.free.len();
    let info = outcome.normal.global_information();
    let condition_number = condition(&info);
    let dof = ev.view.n_obs.saturating_sub(p + weeks.len());
    let sigma2 = if dof > 0 { outcome.sse / dof as f64 } else { f64::NAN };
    let chain = space.chain(&u);
    let mut std_errors = BTreeMap::new();
    if let Some(inv) = info.clone().try_inverse() {
        for (k, &i) in space.free.iter().enumerate() {
            std_errors.insert(PARAM_NAMES[i].to_string(), chain[k].abs() * (sigma2 * inv[(k, k)]).max(0.0).sqrt());
        }
    }
    let jacobian_rank_flag = !(condition_number <= RANK_THRESHOLD);
    let mut warnings = Vec::new();
    if !outcome.reason.converged() {
        warnings.push(format!("not converged after {} iterations; returning best parameters found", outcome.iterations));
    }
    if jacobian_rank_flag {
        warnings.push(format!("information matrix near singular (condition number {condition_number:.3e}); standard errors untrusted"));
    }
    for (k, &i) in space.free.iter().enumerate() {
        if space.squared(i) && u[k].abs() < 1e-6 * STEP_SCALE[i] {
            warnings.push(format!("{} is stuck at its positivity boundary", PARAM_NAMES[i]));
        }
    }
    let at_zero = spots.iter().filter(|r| **r == 0.0).count();
    if at_zero > 0 {
        warnings.push(format!("{at_zero} weekly spot rates at the zero bound"));
    }
    let cir = match term {
        TermModel::Cir(c) => Some(c),
        TermModel::Flat => None,
    };
    Ok(CalibrationResult {
        gender: spec.gender,
        model: spec.model,
        trend,
        cir,
        spot_rates: weeks.into_iter().zip(spots).collect(),
        sse: outcome.sse,
        residuals: outcome.residuals,
        n_obs: ev.view.n_obs,
        n_params: p + ev.n_weeks(),
        iterations: outcome.iterations,
        sse_trace: outcome.sse_trace,
        converged: outcome.reason.converged(),
        diagnostics: Diagnostics {
            condition_number,
            jacobian_rank_flag,
            std_errors,
            std_errors_trusted: !jacobian_rank_flag,
            spot_rates_at_zero: at_zero,
            stop_reason: outcome.reason,
            warnings,
        },
        spec: spec.clone(),
    })
}

fn condition(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let eig = SymmetricEigen::new(m.clone()).eigenvalues;
    let max = eig.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let min = eig.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    if min > 0.0 { max / min } else { f64::INFINITY }
}

/// Model minus observed factor for every quote of `gender`, ordered by
/// `(week, age, guarantee)`, priced with the reference pricers.
pub fn residuals(
    panel: &QuotePanel,
    gender: Gender,
    trend: &MortalityTrend,
    term: &TermModel,
    spot_rates: &BTreeMap<u32, f64>,
    config: &PricingConfig,
) -> Result<Vec<f64>, CalibrationError> {
    let quotes: Vec<_> = panel.quotes_for(gender).collect();
    quotes
        .par_iter()
        .map(|q| {
            let week = q.key.week;
            let spot = *spot_rates.get(&week).ok_or(CalibrationError::MissingWeek { week })?;
            let contract = crate::pricing::AnnuityContract::new(f64::from(q.key.age), f64::from(q.key.guarantee), f64::from(week));
            let f = data::model_factor(term, trend, &contract, spot, config)
                .map_err(|source| CalibrationError::Pricing { key: q.key, source })?;
            Ok(f - q.factor())
        })
        .collect()
}

/// Fits for one or both genders plus the averaged spot-rate curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationArtifact {
    pub start_date: NaiveDate,
    pub week_count: u32,
    pub model: ModelKind,
    pub fits: Vec<CalibrationResult>,
    pub averaged_spot_rates: Option<BTreeMap<u32, f64>>,
}

impl CalibrationArtifact {
    pub fn new(panel: &QuotePanel, model: ModelKind, fits: Vec<CalibrationResult>) -> Result<Self, CalibrationError> {
        let averaged_spot_rates = match fits.as_slice() {
            [a, b] => Some(average_rate_curves(a, b)?),
            _ => None,
        };
        Ok(Self { start_date: panel.start_date(), week_count: panel.week_count(), model, fits, averaged_spot_rates })
    }

    pub fn fit_for(&self, gender: Gender) -> Option<&CalibrationResult> {
        self.fits.iter().find(|f| f.gender == gender)
    }

    /// Averaged curve when both genders were fitted, else the single fit's.
    pub fn spot_rates(&self) -> &BTreeMap<u32, f64> {
        self.averaged_spot_rates.as_ref().unwrap_or_else(|| &self.fits[0].spot_rates)
    }

    pub fn validate(&self) -> Result<(), CalibrationError> {
        if self.fits.is_empty() {
            return Err(CalibrationError::Artifact("no fits".into()));
        }
        for f in &self.fits {
            if f.model != self.model {
                return Err(CalibrationError::Artifact(format!("{} fit is not a {} fit", f.gender, self.model)));
            }
            if !(f.trend.b0 > 0.0) || f.spot_rates.is_empty() {
                return Err(CalibrationError::Artifact(format!("{} fit has invalid parameters", f.gender)));
            }
            if (f.model == ModelKind::Cir) != f.cir.is_some() {
                return Err(CalibrationError::Artifact(format!("{} fit CIR parameters inconsistent with model", f.gender)));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CalibrationError> {
        let json = serde_json::to_string_pretty(self).map_err(|e| CalibrationError::Artifact(e.to_string()))?;
        std::fs::write(path, json + "\n").map_err(|e| CalibrationError::Artifact(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, CalibrationError> {
        let text = std::fs::read_to_string(path).map_err(|e| CalibrationError::Artifact(format!("{}: {e}", path.display())))?;
        let a: Self = serde_json::from_str(&text).map_err(|e| CalibrationError::Artifact(e.to_string()))?;
        a.validate()?;
        Ok(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_panel, synthetic_rate_path, GenderModel, GeneratorSpec, QuoteGrid};

    fn female_flat() -> MortalityTrend {
        MortalityTrend::new(1.622e-3, 92.60, 1.044e-3, 9.058, 4.716e-3)
    }

    fn small_panel(weeks: u32, noise: f64, seed: u64) -> QuotePanel {
        let mut g = GeneratorSpec::new(synthetic_rate_path(0..weeks));
        g.female = Some(GenderModel { trend: female_flat(), term: TermModel::Flat });
        g.grid = QuoteGrid { ages: vec![55, 65, 75], guarantees: vec![0, 10, 20] };
        g.noise_sd = noise;
        g.seed = seed;
        generate_panel(&g).unwrap()
    }

    fn perturbed_start() -> InitialGuess {
        InitialGuess { trend: MortalityTrend::new(1.5e-3, 91.0, 5e-4, 9.5, 4e-3), cir: None, spot_rate: 0.04 }
    }

    #[test]
    fn exact_parameters_give_zero_residuals() {
        let panel = small_panel(20, 0.0, 0);
        let rates = synthetic_rate_path(0..20);
        let cfg = PricingConfig::default();
        let r = residuals(&panel, Gender::Female, &female_flat(), &TermModel::Flat, &rates, &cfg).unwrap();
        assert_eq!(r.len(), 20 * 9);
        assert!(r.iter().all(|v| v.abs() < 1e-7));
        let mut short = rates.clone();
        short.remove(&7);
        assert!(matches!(
            residuals(&panel, Gender::Female, &female_flat(), &TermModel::Flat, &short, &cfg),
            Err(CalibrationError::MissingWeek { week: 7 })
        ));
    }

    #[test]
    fn nested_fit_recovers_small_panel() {
        let panel = small_panel(40, 0.0, 0);
        let spec = FitSpec::new(ModelKind::Flat, Gender::Female, perturbed_start());
        let res = fit(&panel, &spec).unwrap();
        assert!(res.converged, "{:?}", res.diagnostics);
        let t = female_flat();
        for (got, want) in [(res.trend.m0, t.m0), (res.trend.b0, t.b0), (res.trend.lambda0, t.lambda0)] {
            assert!(((got - want) / want).abs() < 1e-4, "{got} vs {want}");
        }
        assert!(res.sse_trace.windows(2).all(|w| w[1] <= w[0]));
        let truth = synthetic_rate_path(0..40);
        for (w, r) in &res.spot_rates {
            assert!((r - truth[w]).abs() < 1e-6);
        }
    }

    #[test]
    fn joint_and_nested_agree() {
        let panel = small_panel(30, 0.0, 0);
        let mut spec = FitSpec::new(ModelKind::Flat, Gender::Female, perturbed_start());
        let nested = fit(&panel, &spec).unwrap();
        spec.solver = SolverMode::Joint;
        let joint = fit(&panel, &spec).unwrap();
        assert!(joint.converged);
        let pairs = [
            (nested.trend.lambda0, joint.trend.lambda0),
            (nested.trend.m0, joint.trend.m0),
            (nested.trend.m1, joint.trend.m1),
            (nested.trend.b0, joint.trend.b0),
            (nested.trend.b1, joint.trend.b1),
        ];
        for (a, b) in pairs {
            assert!(((a - b) / a).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn restricted_fit_is_nested_in_full_fit() {
        let panel = small_panel(30, 0.005, 3);
        let spec = FitSpec::new(ModelKind::Flat, Gender::Female, perturbed_start());
        let full = fit(&panel, &spec).unwrap();
        let restricted = fit(&panel, &FitSpec { restrict_drift: true, ..spec }).unwrap();
        assert_eq!(restricted.trend.m1, 0.0);
        assert_eq!(restricted.trend.b1, 0.0);
        assert!(full.sse <= restricted.sse);
        assert_eq!(full.n_params, restricted.n_params + 2);
    }

    #[test]
    fn parameters_stay_non_negative() {
        let panel = small_panel(15, 0.01, 9);
        let spec = FitSpec::new(ModelKind::Flat, Gender::Female, perturbed_start());
        let res = fit(&panel, &spec).unwrap();
        assert!(res.trend.lambda0 >= 0.0 && res.trend.m0 >= 0.0 && res.trend.b0 >= 0.0);
        assert!(res.spot_rates.values().all(|r| *r >= 0.0));
    }

    #[test]
    fn single_quote_perturbation_moves_one_residual() {
        let panel = small_panel(5, 0.0, 0);
        let rates = synthetic_rate_path(0..5);
        let cfg = PricingConfig::default();
        let base = residuals(&panel, Gender::Female, &female_flat(), &TermModel::Flat, &rates, &cfg).unwrap();
        let q = panel.quotes()[10];
        let new_income = crate::pricing::factor_to_monthly_income(q.factor() + 0.01, data::STANDARD_PREMIUM).unwrap();
        let bumped = panel.with_income(&q.key, new_income).unwrap();
        let moved = residuals(&bumped, Gender::Female, &female_flat(), &TermModel::Flat, &rates, &cfg).unwrap();
        let changed: Vec<usize> = (0..base.len()).filter(|&i| (base[i] - moved[i]).abs() > 1e-12).collect();
        assert_eq!(changed, vec![10]);
        assert!((moved[10] - base[10] + 0.01).abs() < 1e-9);
    }

    #[test]
    fn spec_validation() {
        let mut spec = FitSpec::new(ModelKind::Cir, Gender::Male, InitialGuess::generic(ModelKind::Flat));
        assert!(spec.validate().is_err());
        spec.initial = InitialGuess::generic(ModelKind::Cir);
        assert!(spec.validate().is_ok());
        spec.initial.trend.b0 = 0.0;
        assert!(spec.validate().is_err());
    }
}
