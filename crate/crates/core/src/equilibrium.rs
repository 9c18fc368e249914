//! Gibbs states of the collision operator and the constitutive fixed point.

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::fokker_planck::{CollisionOperator, FluxScheme};
use crate::grid::WealthGrid;
use crate::model::{self, ModelParams, MomentPair};

/// Inverse Gamma law `β^α/Γ(α) · y^(−1−α) · e^(−β/y)` on `y > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseGamma {
    pub alpha: f64,
    pub beta: f64,
}

impl InverseGamma {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "inverse Gamma needs positive shape and scale (got {alpha}, {beta})"
            )));
        }
        Ok(Self { alpha, beta })
    }

    pub fn ln_pdf(&self, y: f64) -> f64 {
        if y <= 0.0 {
            return f64::NEG_INFINITY;
        }
        self.alpha * self.beta.ln() - ln_gamma(self.alpha) - (1.0 + self.alpha) * y.ln() - self.beta / y
    }

    pub fn pdf(&self, y: f64) -> f64 {
        self.ln_pdf(y).exp()
    }

    /// Pdf at the nodes of `grid`.
    pub fn sample_on(&self, grid: &WealthGrid) -> Vec<f64> {
        grid.nodes().iter().map(|&y| self.pdf(y)).collect()
    }

    pub fn moment(&self, n: usize) -> Result<f64> {
        inverse_gamma_moment(self, n)
    }
}

/// `E[Y^n] = β^n / ∏_{j=1..n}(α − j)`, finite for `n < α`.
pub fn inverse_gamma_moment(g: &InverseGamma, n: usize) -> Result<f64> {
    if n as f64 >= g.alpha {
        return Err(Error::DivergentMoment { order: n, a: g.alpha - 1.0, d: 1.0 });
    }
    Ok((1..=n).fold(1.0, |acc, j| acc * g.beta / (g.alpha - j as f64)))
}

/// Gibbs state on the constitutive manifold: `α = κ + 2`, `β = (1+κ)Υ1`.
pub fn gibbs_closed_form(upsilon1: f64, kappa: f64) -> Result<InverseGamma> {
    if !(upsilon1 > 0.0 && kappa > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "closed-form Gibbs state needs upsilon1 > 0 and kappa > 0 (got {upsilon1}, {kappa})"
        )));
    }
    InverseGamma::new(kappa + 2.0, (1.0 + kappa) * upsilon1)
}

/// Gibbs state for arbitrary coefficients with `a > 0`, `b < 0`:
/// `α = 1 + a/d`, `β = −b/d`.
pub fn gibbs_for_coefficients(a: f64, b: f64, d: f64) -> Result<InverseGamma> {
    InverseGamma::new(1.0 + a / d, -b / d)
}

/// Gibbs state of the risk-averse coefficients at a general moment pair.
pub fn gibbs_general(m: &MomentPair, p: &ModelParams) -> Result<InverseGamma> {
    gibbs_for_coefficients(model::strategy_a(m, p), model::strategy_b(m.upsilon1(), p), p.d)
}

/// Normalised steady state of the discrete collision operator.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteGibbs {
    pub grid: WealthGrid,
    pub values: Vec<f64>,
    /// Quadrature of the unnormalised state scaled to peak value one.
    pub normalization: f64,
}

impl DiscreteGibbs {
    /// Quadrature moments `(M1, M2)`.
    pub fn moments(&self) -> (f64, f64) {
        let m = self.grid.moments012(&self.values);
        (m[1] / m[0], m[2] / m[0])
    }

    /// Largest face flux relative to the largest one-sided flux.
    pub fn max_relative_flux(&self, a: f64, b: f64, d: f64) -> Result<f64> {
        let op = CollisionOperator::new(&self.grid, a, b, d, FluxScheme::Plain)?;
        let scale = op.lo().iter().zip(&self.values).map(|(l, v)| l * v).fold(0.0, f64::max);
        Ok(op.fluxes(&self.values).iter().fold(0.0f64, |m, f| m.max(f.abs())) / scale)
    }
}

pub fn gibbs_numeric(a: f64, b: f64, d: f64, grid: &WealthGrid) -> Result<DiscreteGibbs> {
    if !(a > 0.0) {
        return Err(Error::InvalidParameter(format!("Gibbs state needs a > 0 (got {a})")));
    }
    let op = CollisionOperator::new(grid, a, b, d, FluxScheme::Plain)?;
    let log_g = op.log_steady_state();
    let raw: Vec<f64> = log_g.iter().map(|l| l.exp()).collect();
    let normalization = grid.integrate(&raw);
    if !(normalization > 0.0 && normalization.is_finite()) {
        return Err(Error::SingularSystem("discrete steady state has no positive normalisation".into()));
    }
    let values = raw.iter().map(|v| v / normalization).collect();
    Ok(DiscreteGibbs { grid: grid.clone(), values, normalization })
}

/// `Υ_k = −b Υ_{k−1} / (a − d(k−1))`, `Υ_0 = 1`, for `k = 1..K`.
pub fn moment_recursion(a: f64, b: f64, d: f64, k_max: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(k_max);
    let mut prev = 1.0;
    for k in 1..=k_max {
        let denom = a - d * (k as f64 - 1.0);
        if denom <= 0.0 {
            return Err(Error::DivergentMoment { order: k, a, d });
        }
        prev = -b * prev / denom;
        out.push(prev);
    }
    Ok(out)
}

/// `(a Υ1 + b, (a − d) Υ2 + b Υ1)` for the risk-averse coefficients.
pub fn constitutive_residual(m: &MomentPair, p: &ModelParams) -> (f64, f64) {
    let a = model::strategy_a(m, p);
    let b = model::strategy_b(m.upsilon1(), p);
    (a * m.upsilon1() + b, (a - p.d) * m.upsilon2() + b * m.upsilon1())
}

pub use crate::model::manifold_upsilon2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FixedPointMethod {
    /// `Υ ← (1 − ω)Υ + ω Ῡ(G_Υ)`.
    Picard { omega: f64 },
    /// Damped Newton (Levenberg–Marquardt) steps on `Ῡ(G_Υ) − Υ` with a
    /// finite-difference Jacobian.
    Newton,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointOptions {
    pub method: FixedPointMethod,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self { method: FixedPointMethod::Picard { omega: 0.5 }, max_iterations: 500, tolerance: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPoint {
    pub moments: MomentPair,
    pub iterations: usize,
    pub residual: f64,
}

/// Solves `Ῡ(G_Υ) = Υ` where `G_Υ` is the discrete Gibbs state of the
/// coefficients `a_fn(Υ)`, `b_fn(Υ)`.
pub fn fixed_point_solve<A, B>(
    a_fn: A,
    b_fn: B,
    d: f64,
    init: MomentPair,
    grid: &WealthGrid,
    opts: &FixedPointOptions,
) -> Result<FixedPoint>
where
    A: Fn(&MomentPair) -> f64,
    B: Fn(&MomentPair) -> f64,
{
    let image = |m: &MomentPair| -> Result<(f64, f64)> {
        let (a, b) = (a_fn(m), b_fn(m));
        if a <= d {
            return Err(Error::DivergentMoment { order: 2, a, d });
        }
        gibbs_numeric(a, b, d, grid).map(|g| g.moments())
    };
    let residual = |m: &MomentPair, img: (f64, f64)| -> f64 {
        ((img.0 - m.upsilon1()) / m.upsilon1()).abs().max(((img.1 - m.upsilon2()) / m.upsilon2()).abs())
    };

    let mut m = init;
    let mut last = f64::INFINITY;
    let mut best = f64::INFINITY;
    let mut stalled = 0;
    for it in 0..=opts.max_iterations {
        let img = image(&m)?;
        let r = residual(&m, img);
        last = r;
        if r <= opts.tolerance {
            return Ok(FixedPoint { moments: m, iterations: it, residual: r });
        }
        if it == opts.max_iterations {
            break;
        }
        if r < 0.9 * best {
            best = r;
            stalled = 0;
        } else {
            stalled += 1;
        }
        if matches!(opts.method, FixedPointMethod::Newton) && stalled >= 25 {
            return Err(Error::NonConvergence { iterations: it, residual: r });
        }
        let next = match opts.method {
            FixedPointMethod::Picard { omega } => {
                let u1 = (1.0 - omega) * m.upsilon1() + omega * img.0;
                let u2 = (1.0 - omega) * m.upsilon2() + omega * img.1;
                MomentPair::new(u1, u2)
            }
            FixedPointMethod::Newton => newton_step(&m, img, &image),
        };
        m = match next {
            Ok(n) => n,
            Err(_) => break,
        };
    }
    Err(Error::NonConvergence { iterations: opts.max_iterations, residual: last })
}

/// One Levenberg–Marquardt step on the relative residual
/// `R(Υ) = ((Ῡ1 − Υ1)/Υ1, (Ῡ2 − Υ2)/Υ2)`; only steps that reduce `|R|` are
/// accepted. The zero set is a curve, so the Jacobian is nearly rank one close
/// to it and the damping keeps the step well defined.
fn newton_step<F>(m: &MomentPair, img: (f64, f64), image: &F) -> Result<MomentPair>
where
    F: Fn(&MomentPair) -> Result<(f64, f64)>,
{
    let rel = |x: [f64; 2], i: (f64, f64)| [(i.0 - x[0]) / x[0], (i.1 - x[1]) / x[1]];
    let x = [m.upsilon1(), m.upsilon2()];
    let r0 = rel(x, img);
    let norm0 = r0[0].hypot(r0[1]);
    let mut jac = [[0.0; 2]; 2];
    for k in 0..2 {
        let h = 1e-5 * x[k];
        let (mut xp, mut xm) = (x, x);
        xp[k] += h;
        xm[k] -= h;
        let rp = rel(xp, image(&MomentPair::new(xp[0], xp[1])?)?);
        let rm = rel(xm, image(&MomentPair::new(xm[0], xm[1])?)?);
        jac[0][k] = (rp[0] - rm[0]) / (2.0 * h);
        jac[1][k] = (rp[1] - rm[1]) / (2.0 * h);
    }
    let p = jac[0][0] * jac[0][0] + jac[1][0] * jac[1][0];
    let q = jac[0][0] * jac[0][1] + jac[1][0] * jac[1][1];
    let r = jac[0][1] * jac[0][1] + jac[1][1] * jac[1][1];
    let g = [
        jac[0][0] * r0[0] + jac[1][0] * r0[1],
        jac[0][1] * r0[0] + jac[1][1] * r0[1],
    ];
    let mut lambda = 1e-10 * (p + r);
    for _ in 0..60 {
        let (a, dd) = (p + lambda, r + lambda);
        let det = a * dd - q * q;
        if det > 0.0 {
            let step = [-(dd * g[0] - q * g[1]) / det, -(a * g[1] - q * g[0]) / det];
            if let Ok(n) = MomentPair::new(x[0] + step[0], x[1] + step[1]) {
                if let Ok(i) = image(&n) {
                    let rn = rel([n.upsilon1(), n.upsilon2()], i);
                    if rn[0].hypot(rn[1]) < norm0 {
                        return Ok(n);
                    }
                }
            }
        }
        lambda = (lambda * 4.0).max(1e-12 * (p + r));
    }
    Err(Error::NonConvergence { iterations: 0, residual: norm0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit() -> ModelParams {
        ModelParams::new(1.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn closed_form_parameters_and_moments() {
        let g = gibbs_closed_form(1.0, 1.0).unwrap();
        assert_eq!((g.alpha, g.beta), (3.0, 2.0));
        assert_eq!(inverse_gamma_moment(&g, 0).unwrap(), 1.0);
        assert_eq!(inverse_gamma_moment(&g, 1).unwrap(), 1.0);
        assert_eq!(inverse_gamma_moment(&g, 2).unwrap(), 2.0);
        assert!(matches!(inverse_gamma_moment(&g, 3), Err(Error::DivergentMoment { .. })));
        assert!(gibbs_closed_form(0.0, 1.0).is_err());
    }

    #[test]
    fn general_gibbs_off_manifold() {
        let m = MomentPair::new(1.0, 3.0).unwrap();
        let g = gibbs_general(&m, &unit()).unwrap();
        assert_eq!((g.alpha, g.beta), (2.5, 2.0));
        // mean −b/a = 4/3
        assert!((g.moment(1).unwrap() - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn recursion_values() {
        assert_eq!(moment_recursion(2.0, -2.0, 1.0, 2).unwrap(), vec![1.0, 2.0]);
        assert_eq!(moment_recursion(3.0, 0.0, 1.0, 2).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(
            moment_recursion(2.0, -2.0, 1.0, 3),
            Err(Error::DivergentMoment { order: 3, .. })
        ));
    }

    #[test]
    fn constitutive_residual_values() {
        let p = unit();
        assert_eq!(constitutive_residual(&MomentPair::new(1.0, 2.0).unwrap(), &p), (0.0, 0.0));
        // a = 1.5, b = −2 by direct substitution
        let (r1, r2) = constitutive_residual(&MomentPair::new(1.0, 3.0).unwrap(), &p);
        assert!((r1 + 0.5).abs() < 1e-15 && (r2 + 0.5).abs() < 1e-15);
        let small = constitutive_residual(&MomentPair::new(1e-9, 3e-18).unwrap(), &p);
        assert!(small.0.abs() < 1e-8 && small.1.abs() < 1e-17);
        assert_eq!(manifold_upsilon2(1.0, 1.0), 2.0);
        assert_eq!(manifold_upsilon2(2.0, 1.0), 8.0);
        assert!((manifold_upsilon2(1.0, 1e12) - 1.0).abs() < 1e-11);
    }

    #[test]
    fn numeric_gibbs_matches_closed_form() {
        let grid = WealthGrid::log_spaced(400, 1e-3, 1e3).unwrap();
        let g = gibbs_numeric(2.0, -2.0, 1.0, &grid).unwrap();
        assert!((grid.integrate(&g.values) - 1.0).abs() < 1e-12);
        let exact = gibbs_closed_form(1.0, 1.0).unwrap().sample_on(&grid);
        assert!(grid.l1_distance(&g.values, &exact) < 1e-3);
        assert!((g.moments().0 - 1.0).abs() < 1e-3);
        assert!(g.max_relative_flux(2.0, -2.0, 1.0).unwrap() < 1e-12);
        assert!(gibbs_numeric(-1.0, -2.0, 1.0, &grid).is_err());
    }

    #[test]
    fn fixed_point_constant_coefficients() {
        let grid = WealthGrid::log_spaced(400, 1e-3, 1e7).unwrap();
        let init = MomentPair::new(0.5, 1.0).unwrap();
        let fp = fixed_point_solve(|_| 3.0, |_| -1.5, 1.0, init, &grid, &FixedPointOptions::default()).unwrap();
        let exact = moment_recursion(3.0, -1.5, 1.0, 2).unwrap();
        assert!((fp.moments.upsilon1() - exact[0]).abs() < 1e-6 * exact[0]);
        assert!((fp.moments.upsilon2() - exact[1]).abs() < 1e-4 * exact[1]);
    }

    #[test]
    fn fixed_point_on_manifold_is_returned() {
        // the second-moment tail beyond y_max leaks like 1/y_max for kappa = 1
        let grid = WealthGrid::log_spaced(600, 1e-3, 1e10).unwrap();
        let p = unit();
        let (a_fn, b_fn) = (|m: &MomentPair| model::strategy_a(m, &p), |m: &MomentPair| model::strategy_b(m.upsilon1(), &p));
        let init = MomentPair::new(1.0, 2.0).unwrap();
        let fp = fixed_point_solve(a_fn, b_fn, 1.0, init, &grid, &FixedPointOptions::default()).unwrap();
        assert_eq!(fp.iterations, 0);
        assert_eq!(fp.moments, init);
    }

    #[test]
    fn fixed_point_risk_averse_from_off_manifold() {
        let grid = WealthGrid::log_spaced(600, 1e-3, 1e10).unwrap();
        let p = unit();
        let a_fn = |m: &MomentPair| model::strategy_a(m, &p);
        let b_fn = |m: &MomentPair| model::strategy_b(m.upsilon1(), &p);
        let init = MomentPair::new(1.0, 3.0).unwrap();
        // damped Picard moves away from the manifold when started above it
        let picard = fixed_point_solve(a_fn, b_fn, 1.0, init, &grid, &FixedPointOptions::default());
        assert!(matches!(picard, Err(Error::NonConvergence { .. })));

        let opts = FixedPointOptions { method: FixedPointMethod::Newton, ..Default::default() };
        let fp = fixed_point_solve(a_fn, b_fn, 1.0, init, &grid, &opts).unwrap();
        let ratio = fp.moments.upsilon2() / fp.moments.upsilon1().powi(2);
        assert!((ratio - 2.0).abs() < 1e-6, "ratio {ratio}");
    }

    proptest! {
        #[test]
        fn closed_form_mean_reproduces_upsilon1(u1 in 1e-3f64..1e3, kappa in 0.05f64..20.0) {
            let g = gibbs_closed_form(u1, kappa).unwrap();
            prop_assert!((g.moment(1).unwrap() - u1).abs() <= 1e-13 * u1);
            let m2 = g.moment(2).unwrap();
            prop_assert!((m2 - manifold_upsilon2(u1, kappa)).abs() <= 1e-13 * m2);
        }

        #[test]
        fn residual_components_are_proportional(u1 in 1e-2f64..1e2, ratio in 1e-3f64..1e2, kappa in 0.1f64..10.0, d in 0.1f64..5.0) {
            let p = ModelParams::new(d, kappa, 1.0).unwrap();
            let m = MomentPair::new(u1, u1 * u1 * (1.0 + ratio)).unwrap();
            let (r1, r2) = constitutive_residual(&m, &p);
            let v = m.upsilon2() - u1 * u1;
            let oracle = u1 * (d * u1 * m.upsilon2() / v + model::strategy_b(u1, &p));
            prop_assert!((r2 - oracle).abs() <= 1e-9 * (oracle.abs() + d * m.upsilon2()));
            prop_assert!((r2 - u1 * r1).abs() <= 1e-9 * (r2.abs() + d * m.upsilon2()));
        }

        #[test]
        fn recursion_matches_inverse_gamma(a in 2.2f64..20.0, b in -10.0f64..-0.01, d in 0.2f64..1.0) {
            let g = gibbs_for_coefficients(a, b, d).unwrap();
            let rec = moment_recursion(a, b, d, 2).unwrap();
            prop_assume!(2.0 < g.alpha);
            for k in 1..=2 {
                let exact = g.moment(k).unwrap();
                prop_assert!((rec[k - 1] - exact).abs() <= 1e-12 * exact);
            }
        }
    }
}
