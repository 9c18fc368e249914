//! Exponentially fitted finite-volume discretisation of the collision operator
//! `Q(f) = ∂_y[d ∂_y(y² f) + (a y + b) f]` with zero flux at both ends of the
//! wealth grid.
//!
//! The flux across face `i` (between nodes `i` and `i+1`) is the
//! Scharfetter–Gummel flux for `g = y² f`,
//!
//! ```text
//! F_i = w_i d/Δ_i [B(−z_i) y_{i+1}² f_{i+1} − B(z_i) y_i² f_i],   B(z) = z/(e^z − 1),
//! ```
//!
//! where `z_i` is the exact integral of `(a y + b)/(d y²)` between the nodes.
//! Any positive face weights `w_i` keep the same discrete steady state. With
//! [`FluxScheme::MomentFitted`] the weights are chosen so that the first-moment
//! balance `Σ y Q(f) h = −(a M1 + b M0)` holds for every `f`; with
//! [`FluxScheme::Plain`] all weights are one.

use serde::{Deserialize, Serialize};
use crate::error::{Error, Result};
use crate::grid::WealthGrid;
use crate::tridiag;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FluxScheme {
    #[default]
    MomentFitted,
    Plain,
}

/// `z/(e^z − 1)`, continuous at zero.
pub fn bernoulli(z: f64) -> f64 {
    if z.abs() < 1e-10 {
        1.0 - 0.5 * z
    } else {
        let e = z.exp_m1();
        if e.is_infinite() {
            0.0
        } else {
            z / e
        }
    }
}

/// The assembled operator for fixed coefficients `(a, b, d)` on one grid.
#[derive(Debug, Clone)]
pub struct CollisionOperator {
    widths: Vec<f64>,
    /// Coefficient of `f_{i+1}` in `F_i`.
    up: Vec<f64>,
    /// Coefficient of `f_i` in `−F_i`.
    lo: Vec<f64>,
    /// `ln f_{i+1} − ln f_i` of the discrete steady state.
    log_ratio: Vec<f64>,
    scheme: FluxScheme,
}

impl CollisionOperator {
    pub fn new(grid: &WealthGrid, a: f64, b: f64, d: f64, scheme: FluxScheme) -> Result<Self> {
        if !(d > 0.0) || !a.is_finite() || !b.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "collision coefficients must be finite with d > 0 (a = {a}, b = {b}, d = {d})"
            )));
        }
        let y = grid.nodes();
        let h = grid.widths();
        let n = y.len();
        let mut z = Vec::with_capacity(n - 1);
        let mut log_ratio = Vec::with_capacity(n - 1);
        for i in 0..n - 1 {
            let zi = (a * (y[i + 1] / y[i]).ln() + b * (1.0 / y[i] - 1.0 / y[i + 1])) / d;
            z.push(zi);
            log_ratio.push(-zi + 2.0 * (y[i] / y[i + 1]).ln());
        }
        let bp: Vec<f64> = z.iter().map(|&v| bernoulli(v)).collect();
        let bm: Vec<f64> = z.iter().map(|&v| bernoulli(-v)).collect();

        let mut used = scheme;
        let weights = match scheme {
            FluxScheme::Plain => vec![1.0; n - 1],
            FluxScheme::MomentFitted => match moment_weights(y, h, a, b, d, &bp, &bm) {
                Some(w) => w,
                None => {
                    used = FluxScheme::Plain;
                    vec![1.0; n - 1]
                }
            },
        };

        let mut up = Vec::with_capacity(n - 1);
        let mut lo = Vec::with_capacity(n - 1);
        for i in 0..n - 1 {
            let k = weights[i] * d / (y[i + 1] - y[i]);
            up.push(k * bm[i] * y[i + 1] * y[i + 1]);
            lo.push(k * bp[i] * y[i] * y[i]);
        }
        Ok(Self { widths: h.to_vec(), up, lo, log_ratio, scheme: used })
    }

    /// The scheme actually in use; the moment-fitted weights fall back to
    /// plain ones when they would not be positive.
    pub fn scheme(&self) -> FluxScheme {
        self.scheme
    }

    pub fn len(&self) -> usize {
        self.widths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.widths.is_empty()
    }

    pub fn up(&self) -> &[f64] {
        &self.up
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    /// Face fluxes `F_0 … F_{n−2}`.
    pub fn fluxes(&self, f: &[f64]) -> Vec<f64> {
        (0..self.len() - 1).map(|i| self.up[i] * f[i + 1] - self.lo[i] * f[i]).collect()
    }

    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let n = self.len();
        let flux = self.fluxes(f);
        (0..n)
            .map(|i| {
                let right = if i + 1 < n { flux[i] } else { 0.0 };
                let left = if i > 0 { flux[i - 1] } else { 0.0 };
                (right - left) / self.widths[i]
            })
            .collect()
    }

    /// Transpose of `Q` with respect to the quadrature inner product,
    /// `Σ h ψ Q(f) = Σ h f Q*(ψ)`.
    pub fn adjoint_apply(&self, psi: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|j| {
                let right = if j + 1 < n { self.lo[j] * (psi[j + 1] - psi[j]) } else { 0.0 };
                let left = if j > 0 { self.up[j - 1] * (psi[j] - psi[j - 1]) } else { 0.0 };
                (right - left) / self.widths[j]
            })
            .collect()
    }

    /// Backward-Euler step `(I − τQ) u = f`.
    ///
    /// The matrix is an M-matrix, so `u ≥ 0` whenever `f ≥ 0`. The quadrature
    /// mass of `u` is reset to that of `f` to remove round-off drift.
    pub fn implicit_solve(&self, f: &[f64], tau: f64) -> Result<Vec<f64>> {
        if tau == 0.0 {
            return Ok(f.to_vec());
        }
        if !(tau > 0.0) {
            return Err(Error::InvalidParameter(format!("implicit step needs tau >= 0 (got {tau})")));
        }
        let n = self.len();
        let mut sub = vec![0.0; n];
        let mut diag = vec![1.0; n];
        let mut sup = vec![0.0; n];
        for i in 0..n {
            let s = tau / self.widths[i];
            if i + 1 < n {
                diag[i] += s * self.lo[i];
                sup[i] = -s * self.up[i];
            }
            if i > 0 {
                diag[i] += s * self.up[i - 1];
                sub[i] = -s * self.lo[i - 1];
            }
        }
        let mut u = tridiag::solve(&sub, &diag, &sup, f)?;
        let mass_in: f64 = f.iter().zip(&self.widths).map(|(v, h)| v * h).sum();
        let mass_out: f64 = u.iter().zip(&self.widths).map(|(v, h)| v * h).sum();
        if mass_out > 0.0 && mass_in > 0.0 {
            let r = mass_in / mass_out;
            u.iter_mut().for_each(|v| *v *= r);
        }
        Ok(u)
    }

    /// Natural logarithm of the unnormalised discrete steady state, zero at
    /// its maximum.
    pub fn log_steady_state(&self) -> Vec<f64> {
        let mut l = Vec::with_capacity(self.len());
        l.push(0.0);
        for r in &self.log_ratio {
            let last = *l.last().unwrap();
            l.push(last + r);
        }
        let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        l.iter_mut().for_each(|v| *v -= max);
        l
    }

    /// Discrete steady state with unit quadrature mass.
    pub fn steady_state(&self) -> Vec<f64> {
        let mut g: Vec<f64> = self.log_steady_state().into_iter().map(f64::exp).collect();
        let mass: f64 = g.iter().zip(&self.widths).map(|(v, h)| v * h).sum();
        g.iter_mut().for_each(|v| *v /= mass);
        g
    }
}

/// Face weights making the discrete first-moment balance exact.
///
/// The coefficient of `f_j` in `Σ y_j h_j (Qf)_j + (a M1 + b M0)` vanishes when
/// `d y_j² [w_j B(z_j) − w_{j−1} B(−z_{j−1})] + h_j (a y_j + b) = 0`. Below the
/// sign change of `a y + b` this is solved upwards from `w_{−1} = 0`, above it
/// downwards from `w_{n−1} = 0`, so every weight is a sum of positive terms.
///
/// The steady state lies in the kernel, so one node must carry the defect
/// `a M1(G) + b M0(G)` caused by truncating the domain. A homogeneous solution
/// of the upper recursion moves it from the meeting node to the last node,
/// where it plays the part of the boundary term `d y_max² f(y_max)` of the
/// truncated continuum problem. If that correction would break positivity or
/// overflow, the meeting node keeps the defect.
fn moment_weights(y: &[f64], h: &[f64], a: f64, b: f64, d: f64, bp: &[f64], bm: &[f64]) -> Option<Vec<f64>> {
    let n = y.len();
    let meet = y.iter().position(|&v| a * v + b >= 0.0).unwrap_or(n);
    let mut w = vec![0.0; n - 1];
    let mut prev = 0.0;
    for j in 0..meet.min(n - 1) {
        let inflow = if j > 0 { prev * bm[j - 1] * d * y[j] * y[j] } else { 0.0 };
        w[j] = (inflow - h[j] * (a * y[j] + b)) / (d * bp[j] * y[j] * y[j]);
        prev = w[j];
    }
    let mut next = 0.0;
    for j in (meet..n - 1).rev() {
        let k = j + 1;
        let outflow = if k < n - 1 { next * bp[k] * d * y[k] * y[k] } else { 0.0 };
        w[j] = (outflow + h[k] * (a * y[k] + b)) / (d * bm[j] * y[k] * y[k]);
        next = w[j];
    }
    if !w.iter().all(|v| *v > 0.0 && v.is_finite()) {
        return None;
    }
    if meet == 0 || meet >= n - 1 {
        return Some(w);
    }
    let ym2 = d * y[meet] * y[meet];
    let defect = ym2 * (w[meet] * bp[meet] - w[meet - 1] * bm[meet - 1]) + h[meet] * (a * y[meet] + b);
    let mut shifted = w.clone();
    let mut delta = -defect / (ym2 * bp[meet]);
    for j in meet..n - 1 {
        if j > meet {
            delta *= bm[j - 1] / bp[j];
        }
        shifted[j] += delta;
    }
    if shifted.iter().all(|v| *v > 0.0 && v.is_finite()) {
        Some(shifted)
    } else {
        Some(w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lognormal(grid: &WealthGrid, s2: f64) -> Vec<f64> {
        let f: Vec<f64> = grid
            .nodes()
            .iter()
            .map(|&y| {
                let l = y.ln() + 0.5 * s2;
                (-l * l / (2.0 * s2)).exp() / (y * (2.0 * std::f64::consts::PI * s2).sqrt())
            })
            .collect();
        let m = grid.integrate(&f);
        f.into_iter().map(|v| v / m).collect()
    }

    #[test]
    fn bernoulli_values() {
        assert_eq!(bernoulli(0.0), 1.0);
        assert!((bernoulli(1.0) - 1.0 / (1f64.exp() - 1.0)).abs() < 1e-15);
        assert!((bernoulli(-2.0) - 2.0 / (1.0 - (-2f64).exp())).abs() < 1e-15);
        assert_eq!(bernoulli(800.0), 0.0);
        assert!((bernoulli(-800.0) - 800.0).abs() < 1e-12);
        // B(z) - B(-z) = -z
        for z in [1e-12, 1e-6, 0.3, 5.0] {
            assert!((bernoulli(z) - bernoulli(-z) + z).abs() < 1e-14 * (1.0 + z));
        }
    }

    #[test]
    fn conservative_and_first_moment_exact() {
        let grid = WealthGrid::log_spaced(400, 1e-3, 1e7).unwrap();
        for (a, b) in [(2.0, -2.0), (1.5, -2.0), (3.0, -1.0)] {
            let op = CollisionOperator::new(&grid, a, b, 1.0, FluxScheme::MomentFitted).unwrap();
            assert_eq!(op.scheme(), FluxScheme::MomentFitted);
            let f = lognormal(&grid, 3f64.ln());
            let q = op.apply(&f);
            let m = grid.moments012(&f);
            assert!(grid.integrate(&q).abs() < 1e-13);
            let e1 = grid.moment(&q, 1) + a * m[1] + b * m[0];
            assert!(e1.abs() < 1e-9, "first moment balance {e1}");
        }
    }

    #[test]
    fn plain_scheme_first_moment_is_second_order() {
        let mut errs = Vec::new();
        for n in [200, 400, 800] {
            let grid = WealthGrid::log_spaced(n, 1e-3, 1e7).unwrap();
            let op = CollisionOperator::new(&grid, 1.5, -2.0, 1.0, FluxScheme::Plain).unwrap();
            let f = lognormal(&grid, 3f64.ln());
            let m = grid.moments012(&f);
            errs.push((grid.moment(&op.apply(&f), 1) + 1.5 * m[1] - 2.0 * m[0]).abs());
        }
        assert!(errs[0] / errs[1] > 3.5 && errs[1] / errs[2] > 3.5, "{errs:?}");
    }

    #[test]
    fn steady_state_is_annihilated() {
        let grid = WealthGrid::log_spaced(400, 1e-3, 1e3).unwrap();
        for scheme in [FluxScheme::MomentFitted, FluxScheme::Plain] {
            let op = CollisionOperator::new(&grid, 2.0, -2.0, 1.0, scheme).unwrap();
            let g = op.steady_state();
            assert!((grid.integrate(&g) - 1.0).abs() < 1e-14);
            let flux = op.fluxes(&g);
            let scale = op.lo().iter().zip(&g).map(|(l, v)| l * v).fold(0.0, f64::max);
            let worst = flux.iter().fold(0.0f64, |m, f| m.max(f.abs()));
            assert!(worst <= 1e-12 * scale, "{worst:e} vs {scale:e}");
        }
    }

    #[test]
    fn adjoint_is_quadrature_transpose() {
        let grid = WealthGrid::log_spaced(120, 1e-2, 1e3).unwrap();
        let op = CollisionOperator::new(&grid, 1.7, -1.3, 0.8, FluxScheme::MomentFitted).unwrap();
        let f = lognormal(&grid, 0.5);
        let psi: Vec<f64> = grid.nodes().iter().map(|y| (1.0 + y).ln() - 0.1 * y).collect();
        let lhs: f64 = grid.integrate(&op.apply(&f).iter().zip(&psi).map(|(q, p)| q * p).collect::<Vec<_>>());
        let rhs: f64 = grid.integrate(&op.adjoint_apply(&psi).iter().zip(&f).map(|(q, p)| q * p).collect::<Vec<_>>());
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
        // constants are in the kernel of the adjoint
        assert!(op.adjoint_apply(&vec![3.0; grid.len()]).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn implicit_solve_limits() {
        let grid = WealthGrid::log_spaced(400, 1e-3, 1e7).unwrap();
        let op = CollisionOperator::new(&grid, 2.0, -2.0, 1.0, FluxScheme::MomentFitted).unwrap();
        let f: Vec<f64> = lognormal(&grid, 1.0).iter().map(|v| 2.5 * v).collect();
        assert_eq!(op.implicit_solve(&f, 0.0).unwrap(), f);
        let u = op.implicit_solve(&f, 1e6).unwrap();
        assert!(u.iter().all(|&v| v >= 0.0));
        assert!((grid.integrate(&u) - grid.integrate(&f)).abs() < 1e-14 * grid.integrate(&f));
        let g: Vec<f64> = op.steady_state().iter().map(|v| 2.5 * v).collect();
        assert!(grid.l1_distance(&u, &g) < 1e-4);
        assert!(op.implicit_solve(&f, -1.0).is_err());
    }
}
