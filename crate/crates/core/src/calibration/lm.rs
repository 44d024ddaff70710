//! Levenberg-Marquardt driver over block-arrow normal equations.
//!
//! Parameters split into `p` globals and `q` locals; each local column of
//! the Jacobian couples only to the globals, so `JᵀJ` has a dense `p×p`
//! block `A`, a `p×q` coupling block `B` and a diagonal `d`. Damped steps
//! are solved through the Schur complement of the diagonal.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::CalibrationError;

/// `JᵀJ = [[A, B], [Bᵀ, diag(d)]]` and `g = Jᵀr`.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub d: Vec<f64>,
    pub g: Vec<f64>,
}

impl NormalEquations {
    pub fn dense(a: DMatrix<f64>, g: Vec<f64>) -> Self {
        let p = a.nrows();
        Self { a, b: DMatrix::zeros(p, 0), d: Vec::new(), g }
    }

    pub fn n_globals(&self) -> usize {
        self.a.nrows()
    }

    pub fn len(&self) -> usize {
        self.a.nrows() + self.d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n_globals()).map(|i| self.a[(i, i)]).chain(self.d.iter().copied()).collect()
    }

    /// `δᵀ(JᵀJ)δ`.
    pub fn quadratic_form(&self, delta: &[f64]) -> f64 {
        let p = self.n_globals();
        let dg = DVector::from_column_slice(&delta[..p]);
        let dl = DVector::from_column_slice(&delta[p..]);
        let mut q = dg.dot(&(&self.a * &dg));
        if !self.d.is_empty() {
            q += 2.0 * dg.dot(&(&self.b * &dl));
            q += self.d.iter().zip(dl.iter()).map(|(d, x)| d * x * x).sum::<f64>();
        }
        q
    }

    /// Solves `(JᵀJ + μ diag(scale)) δ = −g`.
    pub fn solve_damped(&self, mu: f64, scale: &[f64]) -> Option<Vec<f64>> {
        let p = self.n_globals();
        let q = self.d.len();
        let dl: Vec<f64> = (0..q).map(|j| self.d[j] + mu * scale[p + j]).collect();
        if dl.iter().any(|v| !(*v > 0.0)) {
            return None;
        }
        let mut s = self.a.clone();
        for i in 0..p {
            s[(i, i)] += mu * scale[i];
        }
        let mut rhs = DVector::from_iterator(p, self.g[..p].iter().map(|g| -g));
        for j in 0..q {
            let col = self.b.column(j);
            let inv = 1.0 / dl[j];
            s -= (col * col.transpose()) * inv;
            rhs += col * (self.g[p + j] * inv);
        }
        let dg = if p == 0 {
            DVector::zeros(0)
        } else {
            solve_spd(s, rhs)?
        };
        let mut out = Vec::with_capacity(p + q);
        out.extend(dg.iter().copied());
        for j in 0..q {
            let coupling = self.b.column(j).dot(&dg);
            out.push(-(self.g[p + j] + coupling) / dl[j]);
        }
        out.iter().all(|v| v.is_finite()).then_some(out)
    }

    /// Schur complement `A − B diag(d)⁻¹ Bᵀ`: the information about the
    /// globals once the locals are profiled out.
    pub fn global_information(&self) -> DMatrix<f64> {
        let mut s = self.a.clone();
        for (j, d) in self.d.iter().enumerate() {
            if *d > 0.0 {
                let col = self.b.column(j);
                s -= (col * col.transpose()) / *d;
            }
        }
        s
    }
}

fn solve_spd(m: DMatrix<f64>, rhs: DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = m.clone().cholesky() {
        return Some(ch.solve(&rhs));
    }
    m.lu().solve(&rhs)
}

/// A least-squares problem with block-arrow structure.
pub trait Problem {
    fn residuals(&mut self, x: &[f64]) -> Result<Vec<f64>, CalibrationError>;

    fn normal_equations(&mut self, x: &[f64], r: &[f64]) -> Result<NormalEquations, CalibrationError>;

    /// Called after every accepted step (and once for the starting point).
    fn accepted(&mut self, _x: &[f64]) {}
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmOptions {
    /// Scaled gradient tolerance `max |g_i| / sqrt(D_i · SSE)`.
    pub gtol: f64,
    /// Relative step tolerance.
    pub xtol: f64,
    /// Relative SSE decrease tolerance.
    pub ftol: f64,
    /// Absolute SSE below which the fit is exact.
    pub sse_tol: f64,
    pub max_iterations: usize,
    pub initial_damping: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self { gtol: 1e-10, xtol: 1e-12, ftol: 1e-14, sse_tol: 1e-22, max_iterations: 200, initial_damping: 1e-3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Gradient,
    Step,
    Reduction,
    ExactFit,
    NoFurtherReduction,
    MaxIterations,
}

impl StopReason {
    pub fn converged(&self) -> bool {
        !matches!(self, StopReason::MaxIterations)
    }
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub x: Vec<f64>,
    pub residuals: Vec<f64>,
    pub sse: f64,
    pub iterations: usize,
    /// SSE at the start and after every accepted step.
    pub sse_trace: Vec<f64>,
    pub reason: StopReason,
    pub normal: NormalEquations,
}

fn sse_of(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

/// Minimizes `‖r(x)‖²` from `x0` (Nielsen damping with Marquardt scaling).
pub fn minimize<P: Problem>(problem: &mut P, x0: &[f64], opts: &LmOptions) -> Result<LmOutcome, CalibrationError> {
    let mut x = x0.to_vec();
    let mut r = problem.residuals(&x)?;
    let mut sse = sse_of(&r);
    problem.accepted(&x);
    let mut trace = vec![sse];
    let mut ne = problem.normal_equations(&x, &r)?;
    let mut scale = ne.diagonal();
    for s in scale.iter_mut() {
        if !(*s > 0.0) {
            *s = 1.0;
        }
    }
    let mut mu = opts.initial_damping;
    let mut nu = 2.0;
    let mut iterations = 0;

    let gradient_small = |ne: &NormalEquations, scale: &[f64], sse: f64| {
        let norm = sse.sqrt();
        ne.g.iter().zip(scale).all(|(g, d)| g.abs() <= opts.gtol * (d.sqrt() * norm))
    };

    let reason = loop {
        if sse <= opts.sse_tol {
            break StopReason::ExactFit;
        }
        if gradient_small(&ne, &scale, sse) {
            break StopReason::Gradient;
        }
        if iterations >= opts.max_iterations {
            break StopReason::MaxIterations;
        }
        if mu > 1e30 {
            break StopReason::NoFurtherReduction;
        }
        iterations += 1;
        let Some(delta) = ne.solve_damped(mu, &scale) else {
            mu *= nu;
            nu *= 2.0;
            continue;
        };
        let x_norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let step_norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
        if step_norm <= opts.xtol * (x_norm + opts.xtol) {
            break StopReason::Step;
        }
        let x_new: Vec<f64> = x.iter().zip(&delta).map(|(a, b)| a + b).collect();
        let predicted: f64 = delta
            .iter()
            .zip(&ne.g)
            .zip(&scale)
            .map(|((dx, g), d)| dx * (mu * d * dx - g))
            .sum();
        let trial = problem.residuals(&x_new).ok().map(|r| {
            let s = sse_of(&r);
            (r, s)
        });
        match trial {
            Some((r_new, sse_new)) if sse_new.is_finite() && sse_new < sse && predicted > 0.0 => {
                let rho = (sse - sse_new) / predicted;
                let decrease = sse - sse_new;
                x = x_new;
                r = r_new;
                sse = sse_new;
                trace.push(sse);
                problem.accepted(&x);
                ne = problem.normal_equations(&x, &r)?;
                for (s, h) in scale.iter_mut().zip(ne.diagonal()) {
                    *s = s.max(h);
                }
                mu *= (1.0f64 / 3.0).max(1.0 - (2.0 * rho - 1.0).powi(3));
                nu = 2.0;
                if decrease <= opts.ftol * (sse + decrease) {
                    break StopReason::Reduction;
                }
            }
            _ => {
                mu *= nu;
                nu *= 2.0;
            }
        }
    };
    Ok(LmOutcome { x, residuals: r, sse, iterations, sse_trace: trace, reason, normal: ne })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Rosenbrock as residuals (10(x1 − x0²), 1 − x0).
    struct Rosenbrock;

    impl Problem for Rosenbrock {
        fn residuals(&mut self, x: &[f64]) -> Result<Vec<f64>, CalibrationError> {
            Ok(vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]])
        }

        fn normal_equations(&mut self, x: &[f64], r: &[f64]) -> Result<NormalEquations, CalibrationError> {
            let j = DMatrix::from_row_slice(2, 2, &[-20.0 * x[0], 10.0, -1.0, 0.0]);
            let g = j.transpose() * DVector::from_column_slice(r);
            Ok(NormalEquations::dense(j.transpose() * &j, g.iter().copied().collect()))
        }
    }

    #[test]
    fn solves_rosenbrock_with_monotone_sse() {
        let out = minimize(&mut Rosenbrock, &[-1.2, 1.0], &LmOptions::default()).unwrap();
        assert!(out.reason.converged());
        assert!((out.x[0] - 1.0).abs() < 1e-8 && (out.x[1] - 1.0).abs() < 1e-8, "{:?}", out.x);
        assert!(out.sse_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    /// y_{w,i} = exp(θ t_i) + l_w: one global, one local per group.
    struct Arrow {
        t: Vec<f64>,
        y: Vec<Vec<f64>>,
    }

    impl Arrow {
        fn model(&self, x: &[f64]) -> (Vec<f64>, Vec<(f64, f64)>) {
            let mut r = Vec::new();
            let mut jac = Vec::new();
            for (w, yw) in self.y.iter().enumerate() {
                for (t, y) in self.t.iter().zip(yw) {
                    let e = (x[0] * t).exp();
                    r.push(e + x[1 + w] - y);
                    jac.push((t * e, 1.0));
                }
            }
            (r, jac)
        }
    }

    impl Problem for Arrow {
        fn residuals(&mut self, x: &[f64]) -> Result<Vec<f64>, CalibrationError> {
            Ok(self.model(x).0)
        }

        fn normal_equations(&mut self, x: &[f64], r: &[f64]) -> Result<NormalEquations, CalibrationError> {
            let (_, jac) = self.model(x);
            let q = self.y.len();
            let n = self.t.len();
            let mut a = DMatrix::zeros(1, 1);
            let mut b = DMatrix::zeros(1, q);
            let mut d = vec![0.0; q];
            let mut g = vec![0.0; 1 + q];
            for w in 0..q {
                for i in 0..n {
                    let (jg, jl) = jac[w * n + i];
                    let ri = r[w * n + i];
                    a[(0, 0)] += jg * jg;
                    b[(0, w)] += jg * jl;
                    d[w] += jl * jl;
                    g[0] += jg * ri;
                    g[1 + w] += jl * ri;
                }
            }
            Ok(NormalEquations { a, b, d, g })
        }
    }

    #[test]
    fn schur_step_matches_dense_solve() {
        let t = vec![0.0, 0.5, 1.0, 1.5];
        let p = Arrow { t: t.clone(), y: vec![vec![1.0, 2.0, 3.5, 4.0], vec![0.5, 1.0, 2.0, 3.0]] };
        let mut pp = Arrow { t, y: p.y.clone() };
        let x = [0.3, 0.1, -0.2];
        let r = pp.residuals(&x).unwrap();
        let ne = pp.normal_equations(&x, &r).unwrap();
        let scale = ne.diagonal();
        let delta = ne.solve_damped(0.1, &scale).unwrap();
        // assemble the full system and check the residual of the solve
        let full = DMatrix::from_row_slice(
            3,
            3,
            &[ne.a[(0, 0)], ne.b[(0, 0)], ne.b[(0, 1)], ne.b[(0, 0)], ne.d[0], 0.0, ne.b[(0, 1)], 0.0, ne.d[1]],
        );
        let damped = full + DMatrix::from_diagonal(&DVector::from_vec(scale.iter().map(|s| 0.1 * s).collect()));
        let lhs = damped * DVector::from_vec(delta.clone());
        for i in 0..3 {
            assert!((lhs[i] + ne.g[i]).abs() < 1e-12);
        }
        let q = ne.quadratic_form(&delta);
        assert!(q > 0.0);
    }

    #[test]
    fn recovers_arrow_problem() {
        let t = vec![0.0, 0.5, 1.0, 1.5, 2.0];
        let theta: f64 = 0.7;
        let locals = [0.3, -0.4, 1.1];
        let y = locals.iter().map(|l| t.iter().map(|ti| (theta * ti).exp() + l).collect()).collect();
        let mut p = Arrow { t, y };
        let out = minimize(&mut p, &[0.2, 0.0, 0.0, 0.0], &LmOptions::default()).unwrap();
        assert!(out.reason.converged());
        assert!((out.x[0] - theta).abs() < 1e-9);
        for (got, want) in out.x[1..].iter().zip(locals) {
            assert!((got - want).abs() < 1e-9);
        }
        assert!(out.sse_trace.windows(2).all(|w| w[1] <= w[0]));
    }
}
