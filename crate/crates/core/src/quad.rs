//! Double-exponential quadrature on the half-line.

use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadrature {
    pub value: f64,
    pub error: f64,
    pub evaluations: usize,
}

const T_MAX: f64 = 4.5;
const MAX_LEVEL: usize = 10;

/// `∫_0^∞ g(y) dy` through `y = scale·exp(π/2·sinh t)`.
///
/// The step is halved until two successive estimates agree to `rel_tol`.
/// `scale` should sit near the bulk of the integrand.
pub fn exp_sinh<F: Fn(f64) -> f64>(g: F, scale: f64, rel_tol: f64) -> Result<Quadrature> {
    let term = |t: f64| -> f64 {
        let y = scale * (FRAC_PI_2 * t.sinh()).exp();
        if y == 0.0 || !y.is_finite() {
            return 0.0;
        }
        let v = g(y) * y * FRAC_PI_2 * t.cosh();
        if v.is_finite() {
            v
        } else {
            0.0
        }
    };

    let mut h = 0.5;
    let n0 = (T_MAX / h) as i64;
    let mut sum: f64 = (-n0..=n0).map(|k| term(k as f64 * h)).sum();
    let mut evaluations = (2 * n0 + 1) as usize;
    let mut estimate = sum * h;

    for _ in 0..MAX_LEVEL {
        h *= 0.5;
        let n = (T_MAX / h) as i64;
        // only the new odd points
        let mut k = -n + if n % 2 == 0 { 1 } else { 0 };
        let mut add = 0.0;
        while k <= n {
            add += term(k as f64 * h);
            evaluations += 1;
            k += 2;
        }
        sum += add;
        let next = sum * h;
        let err = (next - estimate).abs();
        estimate = next;
        if err <= rel_tol * next.abs() || next == 0.0 {
            return Ok(Quadrature { value: next, error: err, evaluations });
        }
    }
    Err(Error::NonConvergence { iterations: MAX_LEVEL, residual: f64::NAN })
}
