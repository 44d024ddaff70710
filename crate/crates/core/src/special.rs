//! Special functions used by the pricing and statistics code.
//!
//! The Gompertz annuity closed form needs the upper incomplete gamma
//! function `Γ(a, x)` at *negative* non-integer `a`, which most libraries do
//! not expose. The partial F-test needs the regularized incomplete beta.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecialError {
    #[error("{function}: argument out of domain ({detail})")]
    Domain {
        function: &'static str,
        detail: String,
    },
    #[error("{function}: no convergence after {iterations} iterations")]
    NoConvergence {
        function: &'static str,
        iterations: usize,
    },
}

const EPS: f64 = 1e-16;
const FPMIN: f64 = 1e-300;
const MAX_ITER: usize = 10_000;

/// Euler-Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Taylor coefficients of `1/Γ(z) = Σ c_k z^k`, k = 2..=26 (c_1 = 1).
const RECIP_GAMMA: [f64; 25] = [
    0.577_215_664_901_532_9,
    -0.655_878_071_520_253_8,
    -0.042_002_635_034_095_2,
    0.166_538_611_382_291_5,
    -0.042_197_734_555_544_3,
    -0.009_621_971_527_877_0,
    0.007_218_943_246_663_0,
    -0.001_165_167_591_859_1,
    -0.000_215_241_674_114_9,
    0.000_128_050_282_388_2,
    -0.000_020_134_854_780_7,
    -0.000_001_250_493_482_1,
    0.000_001_133_027_232_0,
    -0.000_000_205_633_841_7,
    0.000_000_006_116_095_0,
    0.000_000_005_002_007_5,
    -0.000_000_001_181_274_6,
    0.000_000_000_104_342_7,
    0.000_000_000_007_782_3,
    -0.000_000_000_003_696_8,
    0.000_000_000_000_510_0,
    -0.000_000_000_000_020_6,
    -0.000_000_000_000_005_4,
    0.000_000_000_000_001_4,
    0.000_000_000_000_000_1,
];

/// `(Γ(1+a) − 1)/a` for |a| ≤ 0.5 without cancellation (→ −γ as a → 0).
fn gamma1m1_over_a(a: f64) -> f64 {
    // 1/Γ(1+a) = 1 + a·h(a)
    let h = RECIP_GAMMA.iter().rev().fold(0.0, |acc, &c| acc * a + c);
    let g = 1.0 + a * h;
    -h / g
}

/// Natural log of the gamma function for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let t = x + 7.5;
    let mut sum = COEFFS[0];
    for (i, &c) in COEFFS.iter().enumerate().skip(1) {
        sum += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + sum.ln()
}

/// Upper incomplete gamma `Γ(a, x) = ∫_x^∞ e^{−s} s^{a−1} ds` for any real
/// `a` and `x > 0`.
pub fn upper_incomplete_gamma(a: f64, x: f64) -> Result<f64, SpecialError> {
    ln_upper_incomplete_gamma(a, x).map(f64::exp)
}

/// `ln Γ(a, x)`; stays finite where `Γ(a, x)` itself would underflow.
pub fn ln_upper_incomplete_gamma(a: f64, x: f64) -> Result<f64, SpecialError> {
    if !a.is_finite() || !x.is_finite() || x <= 0.0 {
        return Err(SpecialError::Domain {
            function: "upper_incomplete_gamma",
            detail: format!("a={a}, x={x}; requires finite a and x > 0"),
        });
    }
    if a <= 0.5 {
        if x >= 1.0 {
            gamma_cf_ln(a, x)
        } else {
            Ok(small_x_lifted(a, x)?.ln())
        }
    } else if x >= a + 1.0 {
        gamma_cf_ln(a, x)
    } else {
        let p = lower_regularized_series(a, x)?;
        Ok(ln_gamma(a) + (-p).ln_1p())
    }
}

/// Continued fraction (modified Lentz) for ln Γ(a, x); converges for
/// x > max(0, a − 1).
fn gamma_cf_ln(a: f64, x: f64) -> Result<f64, SpecialError> {
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / FPMIN;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..=MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = b + an / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            return Ok(-x + a * x.ln() + h.ln());
        }
    }
    Err(SpecialError::NoConvergence {
        function: "upper_incomplete_gamma (continued fraction)",
        iterations: MAX_ITER,
    })
}

/// Γ(a, x) for x < 1 and a ≤ 0.5: evaluate at a base point a' ∈ (−0.5, 0.5]
/// then step down with Γ(s, x) = (Γ(s+1, x) − x^s e^{−x}) / s.
fn small_x_lifted(a: f64, x: f64) -> Result<f64, SpecialError> {
    let shift = (a - 0.5).ceil();
    let base = a - shift;
    let mut value = small_x_base(base, x);
    let steps = (-shift) as i64;
    let emx = (-x).exp();
    let mut s = base;
    for _ in 0..steps {
        s -= 1.0;
        value = (value - x.powf(s) * emx) / s;
    }
    if !(value.is_finite() && value > 0.0) {
        return Err(SpecialError::Domain {
            function: "upper_incomplete_gamma",
            detail: format!("recurrence lost positivity at a={a}, x={x}"),
        });
    }
    Ok(value)
}

/// Γ(a, x) = Γ(a) − γ(a, x) rearranged so that the 1/a poles cancel
/// analytically; valid for |a| ≤ 0.5 (including a = 0, the exponential
/// integral E1) and small x.
fn small_x_base(a: f64, x: f64) -> f64 {
    let lnx = x.ln();
    let gamma_part = gamma1m1_over_a(a);
    let power_part = if a == 0.0 {
        lnx
    } else {
        (a * lnx).exp_m1() / a
    };
    let mut sum = 0.0;
    let mut term = 1.0; // (−x)^k / k!
    for k in 1..200 {
        term *= -x / k as f64;
        let contrib = term / (a + k as f64);
        sum += contrib;
        if contrib.abs() <= 1e-17 * sum.abs() {
            break;
        }
    }
    gamma_part - power_part - (a * lnx).exp() * sum
}

/// Regularized lower incomplete gamma P(a, x) by its power series (a > 0).
fn lower_regularized_series(a: f64, x: f64) -> Result<f64, SpecialError> {
    let mut ap = a;
    let mut del = 1.0 / a;
    let mut sum = del;
    for _ in 0..MAX_ITER {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if del.abs() < sum.abs() * EPS {
            return Ok(sum * (-x + a * x.ln() - ln_gamma(a)).exp());
        }
    }
    Err(SpecialError::NoConvergence {
        function: "lower incomplete gamma series",
        iterations: MAX_ITER,
    })
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> Result<f64, SpecialError> {
    if !(a > 0.0 && b > 0.0) || !(0.0..=1.0).contains(&x) {
        return Err(SpecialError::Domain {
            function: "regularized_incomplete_beta",
            detail: format!("a={a}, b={b}, x={x}"),
        });
    }
    if x == 0.0 || x == 1.0 {
        return Ok(x);
    }
    let ln_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (-x).ln_1p();
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok((ln_front + beta_cf(a, b, x)?.ln()).exp() / a)
    } else {
        Ok(1.0 - (ln_front + beta_cf(b, a, 1.0 - x)?.ln()).exp() / b)
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> Result<f64, SpecialError> {
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            return Ok(h);
        }
    }
    Err(SpecialError::NoConvergence {
        function: "incomplete beta continued fraction",
        iterations: MAX_ITER,
    })
}
