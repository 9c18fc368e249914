//! Generalized collision invariant of the risk-averse collision operator.
//!
//! For moments `Υ = (Υ1, Υ2)` the function `χ_Υ(y) = y²/2 − Υ1 y` solves the
//! adjoint problem `∂_y(y² G_Υ ∂_y χ) = [λ1(y − Υ1) + λ2(y² − Υ2)] G_Υ`, so
//! `∫ χ_Υ Q(f) dy = 0` for every density `f` whose first two moments are `Υ`.

use crate::equilibrium::{gibbs_general, moment_recursion};
use crate::error::{Error, Result};
use crate::fokker_planck::{CollisionOperator, FluxScheme};
use crate::grid::WealthGrid;
use crate::model::{self, ModelParams, MomentPair};
use crate::quad::exp_sinh;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GciFunction {
    pub upsilon1: f64,
}

impl GciFunction {
    pub fn new(upsilon1: f64) -> Self {
        Self { upsilon1 }
    }

    pub fn eval(&self, y: f64) -> f64 {
        gci_eval(self, y)
    }

    pub fn derivative(&self, y: f64) -> f64 {
        y - self.upsilon1
    }
}

pub fn gci_eval(chi: &GciFunction, y: f64) -> f64 {
    0.5 * y * y - chi.upsilon1 * y
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LagrangePair {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LagrangePair {
    /// `λ1(y − Υ1) + λ2(y² − Υ2)`.
    pub fn source(&self, m: &MomentPair, y: f64) -> f64 {
        self.lambda1 * (y - m.upsilon1()) + self.lambda2 * (y * y - m.upsilon2())
    }
}

/// `λ1 = Υ1Υ2/V + (1+κ)Υ1`, `λ2 = −Υ1²/V` with `V = Υ2 − Υ1²`.
pub fn lagrange_multipliers(m: &MomentPair, p: &ModelParams) -> LagrangePair {
    let (u1, u2) = (m.upsilon1(), m.upsilon2());
    let v = m.variance();
    LagrangePair { lambda1: u1 * u2 / v + (1.0 + p.kappa) * u1, lambda2: -u1 * u1 / v }
}

/// `λ1(Ῡ1 − Υ1) + λ2(Ῡ2 − Υ2)` for given Gibbs moments `Ῡ`.
pub fn solvability_residual(lam: &LagrangePair, m: &MomentPair, image: (f64, f64)) -> f64 {
    lam.lambda1 * (image.0 - m.upsilon1()) + lam.lambda2 * (image.1 - m.upsilon2())
}

/// Gibbs moments `Ῡ(G_Υ)` of the risk-averse coefficients from the recursion.
pub fn gibbs_image(m: &MomentPair, p: &ModelParams) -> Result<(f64, f64)> {
    let a = model::strategy_a(m, p);
    let b = model::strategy_b(m.upsilon1(), p);
    let r = moment_recursion(a, b, p.d, 2)?;
    Ok((r[0], r[1]))
}

/// Gibbs moments `Ῡ(G_Υ)` by double-exponential quadrature of the density.
pub fn gibbs_image_quadrature(m: &MomentPair, p: &ModelParams) -> Result<(f64, f64)> {
    let g = gibbs_general(m, p)?;
    let scale = g.beta / (g.alpha + 1.0);
    let mass = exp_sinh(|y| g.pdf(y), scale, 1e-13)?.value;
    let first = exp_sinh(|y| y * g.pdf(y), scale, 1e-13)?.value;
    let second = exp_sinh(|y| y * y * g.pdf(y), scale, 1e-13)?.value;
    Ok((first / mass, second / mass))
}

/// Discrete L1 norm of `∂_y(y² G_Υ χ′) − [λ1(y − Υ1) + λ2(y² − Υ2)] G_Υ`
/// with the inverse-Gamma Gibbs state of the general moment pair `m`.
///
/// The flux `y² G χ′` is evaluated exactly at cell faces and differenced.
pub fn adjoint_residual<C>(chi_prime: C, lam: &LagrangePair, m: &MomentPair, p: &ModelParams, grid: &WealthGrid) -> Result<f64>
where
    C: Fn(f64) -> f64,
{
    let g = gibbs_general(m, p)?;
    let faces = grid.faces();
    let flux: Vec<f64> = faces.iter().map(|&y| y * y * g.pdf(y) * chi_prime(y)).collect();
    let mut total = 0.0;
    for (i, (&y, &h)) in grid.nodes().iter().zip(grid.widths()).enumerate() {
        let lhs = (flux[i + 1] - flux[i]) / h;
        let rhs = lam.source(m, y) * g.pdf(y);
        total += (lhs - rhs).abs() * h;
    }
    Ok(total)
}

/// Relative tolerance on the moments of a density handed to [`annihilation_test`].
pub const MOMENT_MATCH_TOL: f64 = 1e-8;

/// `Σ χ_Υ Q(f) h` with the discrete collision operator at the moments `m`.
pub fn annihilation_test(f: &[f64], grid: &WealthGrid, m: &MomentPair, p: &ModelParams, scheme: FluxScheme) -> Result<f64> {
    let mm = grid.moments012(f);
    let found = [mm[1] / mm[0], mm[2] / mm[0]];
    let expected = [m.upsilon1(), m.upsilon2()];
    if ((found[0] - expected[0]) / expected[0]).abs() > MOMENT_MATCH_TOL
        || ((found[1] - expected[1]) / expected[1]).abs() > MOMENT_MATCH_TOL
    {
        return Err(Error::MomentMismatch { expected, found });
    }
    let a = model::strategy_a(m, p);
    let b = model::strategy_b(m.upsilon1(), p);
    let op = CollisionOperator::new(grid, a, b, p.d, scheme)?;
    let q = op.apply(f);
    let chi = GciFunction::new(m.upsilon1());
    Ok(grid
        .nodes()
        .iter()
        .zip(grid.widths())
        .zip(&q)
        .map(|((&y, &h), &qv)| chi.eval(y) * qv * h)
        .sum::<f64>()
        / mm[0])
}

/// Mixture of lognormal laws used as shape templates for random test densities.
#[derive(Debug, Clone, PartialEq)]
pub struct LogNormalMixture {
    /// `(weight, μ, σ)` of each component of `ln Y`.
    pub components: Vec<(f64, f64, f64)>,
}

impl LogNormalMixture {
    pub fn pdf(&self, u: f64) -> f64 {
        if u <= 0.0 {
            return 0.0;
        }
        let total: f64 = self.components.iter().map(|c| c.0).sum();
        self.components
            .iter()
            .map(|&(w, mu, s)| {
                let z = (u.ln() - mu) / s;
                w * (-0.5 * z * z).exp() / (u * s * (2.0 * std::f64::consts::PI).sqrt())
            })
            .sum::<f64>()
            / total
    }

    pub fn mean(&self) -> f64 {
        let total: f64 = self.components.iter().map(|c| c.0).sum();
        self.components.iter().map(|&(w, mu, s)| w * (mu + 0.5 * s * s).exp()).sum::<f64>() / total
    }

    pub fn second_moment(&self) -> f64 {
        let total: f64 = self.components.iter().map(|c| c.0).sum();
        self.components.iter().map(|&(w, mu, s)| w * (2.0 * mu + 2.0 * s * s).exp()).sum::<f64>() / total
    }

    /// Coefficient of variation of the continuous law.
    pub fn cv(&self) -> f64 {
        let m = self.mean();
        (self.second_moment() - m * m).sqrt() / m
    }

    /// Two-component template drawn from `rng`, redrawn until its coefficient
    /// of variation exceeds `min_cv`.
    pub fn random<R: rand::Rng>(rng: &mut R, min_cv: f64) -> Self {
        loop {
            let w = rng.random_range(0.2..0.8);
            let t = Self {
                components: vec![
                    (w, rng.random_range(-1.0..0.0), rng.random_range(0.9..1.2)),
                    (1.0 - w, rng.random_range(0.0..1.0), rng.random_range(0.3..0.8)),
                ],
            };
            if t.cv() > min_cv {
                return t;
            }
        }
    }
}

/// Root of `g` in `[lo, hi]` by the Illinois variant of false position;
/// `g(lo)` and `g(hi)` must differ in sign.
fn illinois<G: FnMut(f64) -> f64>(mut g: G, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let (mut glo, mut ghi) = (g(lo), g(hi));
    let mut side = 0i8;
    for _ in 0..200 {
        if hi - lo <= tol {
            break;
        }
        let mut x = (lo * ghi - hi * glo) / (ghi - glo);
        if !(x > lo && x < hi) {
            x = 0.5 * (lo + hi);
        }
        let gx = g(x);
        if gx == 0.0 {
            return x;
        }
        if (gx < 0.0) == (glo < 0.0) {
            lo = x;
            glo = gx;
            if side == -1 {
                ghi *= 0.5;
            }
            side = -1;
        } else {
            hi = x;
            ghi = gx;
            if side == 1 {
                glo *= 0.5;
            }
            side = 1;
        }
        if (hi - lo).abs() <= tol || gx.abs() <= 1e-15 {
            return x;
        }
    }
    0.5 * (lo + hi)
}

/// Density `T((y − c)/s)/s` on the grid, normalised, with `c ≥ 0` and `s > 0`
/// chosen by nested bracketed root finding so that its quadrature moments
/// equal `target`.
///
/// The shift is bracketed in `[0, Υ1)`, so templates whose coefficient of
/// variation is below that of the target cannot be matched.
pub fn moment_matched_density(template: &LogNormalMixture, target: &MomentPair, grid: &WealthGrid) -> Result<Vec<f64>> {
    let density = |c: f64, s: f64| -> Vec<f64> {
        let raw: Vec<f64> = grid.nodes().iter().map(|&y| template.pdf((y - c) / s) / s).collect();
        let mass = grid.integrate(&raw);
        raw.into_iter().map(|v| v / mass).collect()
    };
    let moments = |c: f64, s: f64| -> (f64, f64) {
        let m = grid.moments012(&density(c, s));
        (m[1] / m[0], m[2] / m[0] - (m[1] / m[0]).powi(2))
    };
    let (u1, var) = (target.upsilon1(), target.variance());

    // mean for fixed scale: increasing in c
    let shift_for = |s: f64| -> Option<f64> {
        let d0 = moments(0.0, s).0 - u1;
        if d0 > 0.0 {
            return None;
        }
        if d0 == 0.0 {
            return Some(0.0);
        }
        let top = u1 * (1.0 - 1e-12);
        if moments(top, s).0 < u1 {
            return None;
        }
        Some(illinois(|c| moments(c, s).0 - u1, 0.0, top, 1e-14 * u1))
    };

    let guess = var.sqrt() / (template.cv() * template.mean());
    let (mut s_lo, mut s_hi) = (guess * 0.25, guess * 4.0);
    let variance_at = |s: f64| -> Option<f64> { shift_for(s).map(|c| moments(c, s).1) };
    // with the mean pinned, the variance grows with the scale; an infeasible
    // (too large) scale is treated as too large
    if variance_at(s_lo).map_or(true, |v| v > var) {
        return Err(Error::InvalidParameter("template cannot reach the target variance".into()));
    }
    loop {
        match variance_at(s_hi) {
            Some(v) if v < var => {
                s_lo = s_hi;
                s_hi *= 2.0;
                if s_hi > 1e6 * guess {
                    return Err(Error::InvalidParameter("template cannot reach the target variance".into()));
                }
            }
            Some(_) => break,
            None => {
                // shrink towards the feasible side until the variance overshoots
                let mut hi = s_hi;
                let mut found = false;
                for _ in 0..200 {
                    let mid = 0.5 * (s_lo + hi);
                    match variance_at(mid) {
                        Some(v) if v < var => s_lo = mid,
                        Some(_) => {
                            hi = mid;
                            found = true;
                            break;
                        }
                        None => hi = mid,
                    }
                    if hi - s_lo <= 1e-15 * hi {
                        break;
                    }
                }
                if !found {
                    return Err(Error::InvalidParameter("template cannot reach the target variance".into()));
                }
                s_hi = hi;
                break;
            }
        }
    }
    let s = illinois(|s| variance_at(s).map_or(f64::INFINITY, |v| v - var), s_lo, s_hi, 1e-14 * s_hi);
    let c = shift_for(s).ok_or_else(|| Error::InvalidParameter("template cannot reach the target mean".into()))?;
    Ok(density(c, s))
}

/// Discrete Gibbs state times `1 + η q(y)`, where `q` is a log-Gaussian bump
/// minus three auxiliary bumps fixed so that mass and the first two moments
/// are unchanged.
///
/// `η` is capped at half the value that would make the density negative.
pub fn perturbed_gibbs(gibbs: &[f64], grid: &WealthGrid, center: f64, width: f64, amplitude: f64) -> Result<Vec<f64>> {
    let bump = |c: f64| -> Vec<f64> {
        grid.nodes()
            .iter()
            .zip(gibbs)
            .map(|(&y, &g)| {
                let z = (y / c).ln() / width;
                g * (-0.5 * z * z).exp()
            })
            .collect()
    };
    let main = bump(center);
    let aux = [bump(center * 0.5), bump(center * 1.6), bump(center * 3.0)];
    let target = grid.moments012(&main);
    let cols: Vec<[f64; 3]> = aux.iter().map(|v| grid.moments012(v)).collect();
    let matrix = [
        [cols[0][0], cols[1][0], cols[2][0]],
        [cols[0][1], cols[1][1], cols[2][1]],
        [cols[0][2], cols[1][2], cols[2][2]],
    ];
    let coef = solve3(matrix, target).ok_or_else(|| Error::SingularSystem("auxiliary bumps are linearly dependent".into()))?;
    let pert: Vec<f64> = (0..grid.len())
        .map(|i| main[i] - coef[0] * aux[0][i] - coef[1] * aux[1][i] - coef[2] * aux[2][i])
        .collect();
    let mut limit = f64::INFINITY;
    for (g, q) in gibbs.iter().zip(&pert) {
        if *q < 0.0 && *g > 0.0 {
            limit = limit.min(g / -q);
        }
    }
    let eta = amplitude.min(0.5 * limit);
    Ok(gibbs.iter().zip(&pert).map(|(g, q)| g + eta * q).collect())
}

fn solve3(m: [[f64; 3]; 3], r: [f64; 3]) -> Option<[f64; 3]> {
    let det = |a: [[f64; 3]; 3]| {
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    };
    let d = det(m);
    if d.abs() < 1e-300 {
        return None;
    }
    let mut out = [0.0; 3];
    for (k, o) in out.iter_mut().enumerate() {
        let mut mk = m;
        for row in 0..3 {
            mk[row][k] = r[row];
        }
        *o = det(mk) / d;
    }
    Some(out)
}

/// Solution of the discrete adjoint problem and its comparison with `χ_Υ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteAdjoint {
    /// Nodal values, zero at the node closest to `Υ1`.
    pub psi: Vec<f64>,
    /// Constant removed from the source to make the system solvable; the
    /// discrete counterpart of the solvability residual.
    pub solvability_shift: f64,
    /// Best fit `ψ ≈ α χ_Υ + β` in the Gibbs-weighted least-squares sense
    /// over `[Υ1/FIT_WINDOW, FIT_WINDOW·Υ1]`.
    pub alpha: f64,
    pub beta: f64,
    /// Relative weighted L2 misfit of that fit.
    pub misfit: f64,
}

/// Half-width, as a ratio to `Υ1`, of the window used to compare ψ with `χ_Υ`.
/// Near `y_max` the zero-flux condition bends ψ away from `χ_Υ`.
pub const FIT_WINDOW: f64 = 20.0;

/// Solves `Q*(ψ) = d[λ1(y − Υ1) + λ2(y² − Υ2)] − μ` with the quadrature
/// transpose of the discrete collision operator.
///
/// With `G` the discrete steady state, `G_j h_j Q*(ψ)_j` telescopes into face
/// terms `lo_j G_j (ψ_{j+1} − ψ_j)`, so ψ follows from two cumulative sums.
/// The shift `μ` is the Gibbs average of the source.
pub fn discrete_adjoint(m: &MomentPair, p: &ModelParams, grid: &WealthGrid, scheme: FluxScheme) -> Result<DiscreteAdjoint> {
    let a = model::strategy_a(m, p);
    let b = model::strategy_b(m.upsilon1(), p);
    let op = CollisionOperator::new(grid, a, b, p.d, scheme)?;
    let lam = lagrange_multipliers(m, p);
    let y = grid.nodes();
    let h = grid.widths();
    let n = grid.len();
    let log_g = op.log_steady_state();
    let g: Vec<f64> = log_g.iter().map(|l| l.exp()).collect();

    let mut rhs: Vec<f64> = y.iter().map(|&v| p.d * lam.source(m, v)).collect();
    let gmass: f64 = g.iter().zip(h).map(|(a, b)| a * b).sum();
    let mu = rhs.iter().zip(g.iter().zip(h)).map(|(r, (gv, hv))| r * gv * hv).sum::<f64>() / gmass;
    rhs.iter_mut().for_each(|r| *r -= mu);

    // S_j = P_j / G_j with P_j the discrete flux y²Gψ′ at face j
    let peak = log_g.iter().enumerate().fold(0, |best, (i, v)| if *v > log_g[best] { i } else { best });
    let mut s = vec![0.0; n - 1];
    let mut acc = 0.0;
    for j in 0..peak.min(n - 1) {
        let carry = if j > 0 { (log_g[j - 1] - log_g[j]).exp() } else { 0.0 };
        acc = acc * carry + h[j] * rhs[j];
        s[j] = acc;
    }
    for j in (peak..n - 1).rev() {
        let k = j + 1;
        let next = if k < n - 1 { s[k] } else { 0.0 };
        s[j] = (next - h[k] * rhs[k]) * (log_g[k] - log_g[j]).exp();
    }
    let mut psi = vec![0.0; n];
    for j in 0..n - 1 {
        psi[j + 1] = psi[j] + s[j] / op.lo()[j];
    }
    let anchor = y
        .iter()
        .enumerate()
        .fold(0, |best, (i, v)| if (v - m.upsilon1()).abs() < (y[best] - m.upsilon1()).abs() { i } else { best });
    let offset = psi[anchor];
    psi.iter_mut().for_each(|v| *v -= offset);

    // weighted least squares ψ ≈ α χ + β
    let chi = GciFunction::new(m.upsilon1());
    let u1 = m.upsilon1();
    let w: Vec<f64> = (0..n)
        .map(|i| if y[i] * FIT_WINDOW >= u1 && y[i] <= FIT_WINDOW * u1 { g[i] * h[i] } else { 0.0 })
        .collect();
    let (mut sw, mut sx, mut sxx, mut sy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        let x = chi.eval(y[i]);
        sw += w[i];
        sx += w[i] * x;
        sxx += w[i] * x * x;
        sy += w[i] * psi[i];
        sxy += w[i] * x * psi[i];
    }
    let alpha = (sw * sxy - sx * sy) / (sw * sxx - sx * sx);
    let beta = (sy - alpha * sx) / sw;
    let (mut err, mut norm) = (0.0, 0.0);
    for i in 0..n {
        let fit = alpha * chi.eval(y[i]) + beta;
        err += w[i] * (psi[i] - fit).powi(2);
        norm += w[i] * (psi[i] - sy / sw).powi(2);
    }
    Ok(DiscreteAdjoint { psi, solvability_shift: mu, alpha, beta, misfit: (err / norm).sqrt() })
}
