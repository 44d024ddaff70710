//! Fixed-node pricer for one week's grid of (age, guarantee) cells.
//!
//! All ages share one set of Gauss-Legendre nodes on `[0, ω − min age]`
//! with breakpoints at every guarantee length and every `ω − x`, so the
//! discount factors and the Gompertz growth term are computed once per node
//! and each factor is a difference of prefix sums.

use crate::mortality::GompertzParams;
use crate::quadrature::gauss_legendre;
use crate::termstructure::TermModel;

use super::CalibrationError;

#[derive(Debug, Clone)]
pub struct WeekPricer {
    ages: Vec<f64>,
    guarantees: Vec<f64>,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    guarantee_start: Vec<usize>,
    age_end: Vec<usize>,
}

/// `ln A(s)` and `C(s)` at each node: `B(s) = exp(ln A − C r)`.
#[derive(Debug, Clone)]
pub struct TermGrid {
    ln_a: Vec<f64>,
    c: Vec<f64>,
}

impl WeekPricer {
    pub fn new(
        ages: &[f64],
        guarantees: &[f64],
        omega: f64,
        points: usize,
        max_piece: f64,
    ) -> Result<Self, CalibrationError> {
        if ages.is_empty() || guarantees.is_empty() {
            return Err(CalibrationError::Spec("pricer needs at least one age and one guarantee".into()));
        }
        let min_age = ages.iter().copied().fold(f64::INFINITY, f64::min);
        let max_age = ages.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let max_g = guarantees.iter().copied().fold(0.0, f64::max);
        if !(min_age > 0.0 && max_age + max_g <= omega) {
            return Err(CalibrationError::Spec(format!("grid inconsistent with omega {omega}")));
        }
        let horizon = omega - min_age;
        let mut breaks: Vec<f64> = std::iter::once(0.0)
            .chain(guarantees.iter().copied())
            .chain(ages.iter().map(|x| omega - x))
            .filter(|b| *b >= 0.0 && *b <= horizon)
            .collect();
        breaks.sort_by(f64::total_cmp);
        breaks.dedup();
        let (gx, gw) = gauss_legendre(points);
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        for pair in breaks.windows(2) {
            let (lo, hi) = (pair[0], pair[1]);
            let pieces = ((hi - lo) / max_piece).ceil().max(1.0) as usize;
            let width = (hi - lo) / pieces as f64;
            for k in 0..pieces {
                let a = lo + k as f64 * width;
                let half = 0.5 * width;
                for (x, w) in gx.iter().zip(&gw) {
                    nodes.push(a + half * (1.0 + x));
                    weights.push(half * w);
                }
            }
        }
        let first_above = |t: f64| nodes.partition_point(|s| *s < t);
        let guarantee_start = guarantees.iter().map(|t| first_above(*t)).collect();
        let age_end = ages.iter().map(|x| first_above(omega - x)).collect();
        Ok(Self {
            ages: ages.to_vec(),
            guarantees: guarantees.to_vec(),
            nodes,
            weights,
            guarantee_start,
            age_end,
        })
    }

    pub fn ages(&self) -> &[f64] {
        &self.ages
    }

    pub fn guarantees(&self) -> &[f64] {
        &self.guarantees
    }

    pub fn n_cells(&self) -> usize {
        self.ages.len() * self.guarantees.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn term_grid(&self, term: &TermModel) -> TermGrid {
        match term {
            TermModel::Flat => TermGrid { ln_a: vec![0.0; self.nodes.len()], c: self.nodes.clone() },
            TermModel::Cir(p) => {
                let (ln_a, c) = self.nodes.iter().map(|s| p.affine_coefficients(*s)).unzip();
                TermGrid { ln_a, c }
            }
        }
    }

    /// Factors for every cell (`age_index * n_guarantees + guarantee_index`)
    /// and, if requested, their derivatives with respect to the spot rate.
    pub fn price(
        &self,
        grid: &TermGrid,
        law: &GompertzParams,
        r: f64,
        out: &mut [f64],
        mut d_rate: Option<&mut [f64]>,
    ) {
        let n = self.nodes.len();
        let b = law.dispersion;
        let mut disc = Vec::with_capacity(n);
        let mut growth = Vec::with_capacity(n);
        let mut cum_b = Vec::with_capacity(n + 1);
        let mut cum_bc = Vec::with_capacity(n + 1);
        let (mut sb, mut sbc) = (0.0, 0.0);
        cum_b.push(0.0);
        cum_bc.push(0.0);
        for k in 0..n {
            let bk = self.weights[k] * (grid.ln_a[k] - grid.c[k] * r).exp();
            disc.push(bk);
            let u = self.nodes[k] / b;
            growth.push(if u > 30.0 { u } else { u.exp_m1().ln() });
            sb += bk;
            sbc -= grid.c[k] * bk;
            cum_b.push(sb);
            cum_bc.push(sbc);
        }
        let ng = self.guarantees.len();
        let mut cum_bp = vec![0.0; n + 1];
        let mut cum_bpc = vec![0.0; n + 1];
        for (i, x) in self.ages.iter().enumerate() {
            let scale = (x - law.modal_age) / b;
            let end = self.age_end[i];
            let (mut s, mut sc) = (0.0, 0.0);
            for k in 0..end {
                let v = disc[k] * (-law.lambda0 * self.nodes[k] - (growth[k] + scale).exp()).exp();
                s += v;
                sc -= grid.c[k] * v;
                cum_bp[k + 1] = s;
                cum_bpc[k + 1] = sc;
            }
            for (j, &start) in self.guarantee_start.iter().enumerate() {
                let start = start.min(end);
                out[i * ng + j] = cum_b[start] + cum_bp[end] - cum_bp[start];
                if let Some(d) = d_rate.as_deref_mut() {
                    d[i * ng + j] = cum_bc[start] + cum_bpc[end] - cum_bpc[start];
                }
            }
        }
    }
}
