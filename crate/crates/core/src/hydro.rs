//! Closed equations for the agent density `ρ` and the mean wealth `Υ1`:
//!
//! ```text
//! ∂_t ρ + ∂_x(ρ U0) = 0
//! ρ ∂_t Υ1 + κ/(2Υ1) ∂_x(ρ U2) − κ ∂_x(ρ U1) − (1−κ)/2 Υ1 ∂_x(ρ U0) = 0
//! ```
//!
//! with `U_k(x; Υ1) = ∫ V(x, y) G(y) y^k dy` over the Gibbs state on the
//! constitutive manifold `Υ2 = (1+κ)/κ Υ1²`.

use serde::{Deserialize, Serialize};
use std::io::Write;

use rayon::prelude::*;

use crate::equilibrium::gibbs_closed_form;
use crate::error::{Error, Result};
use crate::grid::XGrid;
use crate::model::{ModelParams, VelocityField, WealthProfile};
use crate::quad::exp_sinh;

/// Lower bound imposed on `Υ1` in occupied cells.
pub const UPSILON_FLOOR: f64 = 1e-8;

/// Cells with `ρ` below this keep their `Υ1`.
pub const VACUUM_THRESHOLD: f64 = 1e-12;

pub const CFL: f64 = 0.9;

const QUAD_TOL: f64 = 1e-10;

/// Growth exponent of `ψ` at large wealth.
fn psi_growth(psi: WealthProfile) -> f64 {
    match psi {
        WealthProfile::One | WealthProfile::Saturating => 0.0,
    }
}

/// `∫ ψ(y) G(y) y^k dy` for `k = 0, 1, 2` with `G` on the manifold at `Υ1`.
///
/// Closed form for `ψ ≡ 1`, double-exponential quadrature otherwise.
pub fn psi_moments(psi: WealthProfile, upsilon1: f64, kappa: f64) -> Result<[f64; 3]> {
    if psi_growth(psi) + 2.0 >= kappa + 2.0 {
        return Err(Error::DivergentIntegral(format!(
            "velocity grows like y^{} in wealth; the second flux moment needs order below {}",
            psi_growth(psi),
            kappa + 2.0
        )));
    }
    match psi {
        WealthProfile::One => Ok([1.0, upsilon1, (1.0 + kappa) / kappa * upsilon1 * upsilon1]),
        WealthProfile::Saturating => {
            let g = gibbs_closed_form(upsilon1, kappa)?;
            let scale = g.beta / (g.alpha + 1.0);
            let mut out = [0.0; 3];
            for (k, o) in out.iter_mut().enumerate() {
                *o = exp_sinh(|y| y / (1.0 + y) * y.powi(k as i32) * g.pdf(y), scale, QUAD_TOL)?.value;
            }
            Ok(out)
        }
    }
}

/// Cell-centred `U0, U1, U2`.
#[derive(Debug, Clone, PartialEq)]
pub struct FluxCoefficients {
    pub u0: Vec<f64>,
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
}

pub fn flux_coefficients(x: &XGrid, upsilon1: &[f64], v: &VelocityField, kappa: f64) -> Result<FluxCoefficients> {
    let rows: Result<Vec<[f64; 3]>> = upsilon1
        .par_iter()
        .enumerate()
        .map(|(i, &u)| {
            let phi = v.phi(x.center(i));
            if phi == 0.0 {
                return Ok([0.0; 3]);
            }
            let m = psi_moments(v.psi, u.max(UPSILON_FLOOR), kappa)?;
            Ok([phi * m[0], phi * m[1], phi * m[2]])
        })
        .collect();
    let rows = rows?;
    Ok(FluxCoefficients {
        u0: rows.iter().map(|r| r[0]).collect(),
        u1: rows.iter().map(|r| r[1]).collect(),
        u2: rows.iter().map(|r| r[2]).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacroState {
    pub x: XGrid,
    pub rho: Vec<f64>,
    pub upsilon1: Vec<f64>,
    pub time: f64,
}

impl MacroState {
    pub fn new(x: XGrid, rho: Vec<f64>, upsilon1: Vec<f64>) -> Result<Self> {
        if rho.len() != x.len() || upsilon1.len() != x.len() {
            return Err(Error::InvalidParameter("macro fields must match the grid".into()));
        }
        if rho.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return Err(Error::InvalidParameter("density must be finite and nonnegative".into()));
        }
        if rho.iter().zip(&upsilon1).any(|(r, u)| *r > VACUUM_THRESHOLD && !(*u >= UPSILON_FLOOR && u.is_finite())) {
            return Err(Error::InvalidParameter(format!("mean wealth must be at least {UPSILON_FLOOR} in occupied cells")));
        }
        Ok(Self { x, rho, upsilon1, time: 0.0 })
    }

    pub fn total_mass(&self) -> f64 {
        self.rho.iter().sum::<f64>() * self.x.dx()
    }

    /// `Υ2 = (1+κ)/κ Υ1²`.
    pub fn upsilon2(&self, kappa: f64) -> Vec<f64> {
        self.upsilon1.iter().map(|u| (1.0 + kappa) / kappa * u * u).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacroScheme {
    /// Upwind density, centred differences for the wealth equation.
    #[default]
    Centered,
    /// Upwind transport of `ρ`, `ρΥ1`, `ρΥ2` followed by projection onto the
    /// manifold at fixed variance.
    Relaxation,
}

/// Largest stable step, `CFL·Δx / max(|U0| + |∂U1/∂Υ1|)`.
pub fn centered_dt_max(s: &MacroState, v: &VelocityField, kappa: f64) -> Result<f64> {
    let mut speed: f64 = 0.0;
    for i in 0..s.x.len() {
        let phi = v.phi(s.x.center(i)).abs();
        if phi == 0.0 {
            continue;
        }
        let u = s.upsilon1[i].max(UPSILON_FLOOR);
        let m = psi_moments(v.psi, u, kappa)?;
        let h = 1e-6 * u;
        let slope = (psi_moments(v.psi, u + h, kappa)?[1] - psi_moments(v.psi, u - h, kappa)?[1]) / (2.0 * h);
        speed = speed.max(phi * (m[0].abs() + slope.abs()));
    }
    Ok(if speed == 0.0 { f64::INFINITY } else { CFL * s.x.dx() / speed })
}

/// Largest stable step of the relaxation scheme, `CFL·Δx / max|V|`.
pub fn relaxation_dt_max(x: &XGrid, v: &VelocityField) -> f64 {
    let speed = v.max_speed();
    if speed == 0.0 {
        f64::INFINITY
    } else {
        CFL * x.dx() / speed
    }
}

/// Per-step diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepReport {
    /// Occupied cells where `Υ1` was raised to the floor.
    pub floor_hits: usize,
}

/// Upwind face fluxes `φ(x_f)·ρ·m_k(Υ1)` with the upwind cell's values;
/// zero at both ends.
fn upwind_fluxes(s: &MacroState, v: &VelocityField, moments: &[[f64; 3]], weight: impl Fn(usize, usize) -> f64) -> Vec<[f64; 3]> {
    let n = s.x.len();
    (0..=n)
        .map(|f| {
            if f == 0 || f == n {
                return [0.0; 3];
            }
            let phi = v.phi(s.x.face(f));
            let c = if phi >= 0.0 { f - 1 } else { f };
            let mut out = [0.0; 3];
            for (k, o) in out.iter_mut().enumerate() {
                *o = phi * weight(c, k) * moments[c][k];
            }
            out
        })
        .collect()
}

fn cell_psi_moments(s: &MacroState, v: &VelocityField, kappa: f64) -> Result<Vec<[f64; 3]>> {
    s.upsilon1.par_iter().map(|u| psi_moments(v.psi, u.max(UPSILON_FLOOR), kappa)).collect()
}

/// Explicit step of the centred scheme.
pub fn step_centered(s: &mut MacroState, p: &ModelParams, v: &VelocityField, dt: f64) -> Result<StepReport> {
    if v.is_zero() {
        s.time += dt;
        return Ok(StepReport::default());
    }
    let dt_max = centered_dt_max(s, v, p.kappa)?;
    if dt > dt_max * (1.0 + 1e-12) {
        return Err(Error::CflViolation { dt, dt_max });
    }
    let n = s.x.len();
    let dx = s.x.dx();
    let k = p.kappa;
    let moments = cell_psi_moments(s, v, k)?;
    let rho_flux = upwind_fluxes(s, v, &moments, |c, _| s.rho[c]);

    // ρ U_k at cell centres, averaged onto faces; boundary faces carry zero
    let g: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            let phi = v.phi(s.x.center(i));
            [0, 1, 2].map(|kk| s.rho[i] * phi * moments[i][kk])
        })
        .collect();
    let face = |f: usize, kk: usize| if f == 0 || f == n { 0.0 } else { 0.5 * (g[f - 1][kk] + g[f][kk]) };

    let mut report = StepReport::default();
    let mut upsilon = s.upsilon1.clone();
    for i in 0..n {
        if s.rho[i] <= VACUUM_THRESHOLD {
            continue;
        }
        let dg = [0, 1, 2].map(|kk| (face(i + 1, kk) - face(i, kk)) / dx);
        let u = s.upsilon1[i];
        let rhs = k * dg[1] + 0.5 * (1.0 - k) * u * dg[0] - k / (2.0 * u) * dg[2];
        let next = u + dt * rhs / s.rho[i];
        if !(next >= UPSILON_FLOOR) {
            report.floor_hits += 1;
            upsilon[i] = UPSILON_FLOOR;
        } else {
            upsilon[i] = next;
        }
    }
    for i in 0..n {
        s.rho[i] -= dt / dx * (rho_flux[i + 1][0] - rho_flux[i][0]);
    }
    s.upsilon1 = upsilon;
    s.time += dt;
    Ok(report)
}

/// Upwind step for `(ρ, ρΥ1, ρΥ2)` and projection `Υ1 = sqrt(κ·variance)`.
pub fn step_relaxation(s: &mut MacroState, p: &ModelParams, v: &VelocityField, dt: f64) -> Result<StepReport> {
    if v.is_zero() {
        s.time += dt;
        return Ok(StepReport::default());
    }
    let dt_max = relaxation_dt_max(&s.x, v);
    if dt > dt_max * (1.0 + 1e-12) {
        return Err(Error::CflViolation { dt, dt_max });
    }
    let n = s.x.len();
    let lam = dt / s.x.dx();
    let k = p.kappa;
    let moments = cell_psi_moments(s, v, k)?;
    let flux = upwind_fluxes(s, v, &moments, |c, _| s.rho[c]);
    let mut report = StepReport::default();
    for i in 0..n {
        let u = s.upsilon1[i];
        let mut m = [s.rho[i], s.rho[i] * u, s.rho[i] * (1.0 + k) / k * u * u];
        for (kk, mk) in m.iter_mut().enumerate() {
            *mk -= lam * (flux[i + 1][kk] - flux[i][kk]);
        }
        s.rho[i] = m[0];
        if m[0] > VACUUM_THRESHOLD {
            let mean = m[1] / m[0];
            let var = m[2] / m[0] - mean * mean;
            let next = (k * var).sqrt();
            if !(next >= UPSILON_FLOOR) {
                report.floor_hits += 1;
                s.upsilon1[i] = UPSILON_FLOOR;
            } else {
                s.upsilon1[i] = next;
            }
        }
    }
    s.time += dt;
    Ok(report)
}

pub fn step(s: &mut MacroState, p: &ModelParams, v: &VelocityField, dt: f64, scheme: MacroScheme) -> Result<StepReport> {
    match scheme {
        MacroScheme::Centered => step_centered(s, p, v, dt),
        MacroScheme::Relaxation => step_relaxation(s, p, v, dt),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacroConfig {
    pub dt: f64,
    pub t_final: f64,
    pub scheme: MacroScheme,
    pub output_times: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacroRun {
    pub snapshots: Vec<MacroState>,
    pub steps: usize,
    pub max_step_mass_drift: f64,
    pub floor_hits: usize,
    pub warnings: Vec<String>,
}

pub fn run(init: &MacroState, p: &ModelParams, v: &VelocityField, cfg: &MacroConfig) -> Result<MacroRun> {
    if !(cfg.dt > 0.0) || !(cfg.t_final >= 0.0) {
        return Err(Error::Validation(vec![format!("macro.dt must be positive and t_final nonnegative (got {}, {})", cfg.dt, cfg.t_final)]));
    }
    v.validate()?;
    let mut s = init.clone();
    let m0 = s.total_mass();
    let mut targets = cfg.output_times.clone();
    if targets.last().is_none_or(|t| *t < cfg.t_final) {
        targets.push(cfg.t_final);
    }
    let mut out = MacroRun { snapshots: Vec::new(), steps: 0, max_step_mass_drift: 0.0, floor_hits: 0, warnings: Vec::new() };
    let mut mass = m0;
    let tol = 1e-9 * cfg.dt;
    for &target in &targets {
        while s.time < target - tol {
            let h = cfg.dt.min(target - s.time);
            let start = s.time;
            let report = step(&mut s, p, v, h, cfg.scheme)?;
            s.time = start + h;
            out.steps += 1;
            if report.floor_hits > 0 {
                out.floor_hits += report.floor_hits;
                let msg = format!("mean wealth floored in {} cells at t = {}", report.floor_hits, s.time);
                log::warn!("{msg}");
                out.warnings.push(msg);
            }
            let now = s.total_mass();
            if m0 > 0.0 {
                out.max_step_mass_drift = out.max_step_mass_drift.max((now - mass).abs() / m0);
            }
            mass = now;
        }
        s.time = target;
        out.snapshots.push(s.clone());
    }
    Ok(out)
}

/// `t,x,rho,upsilon1,upsilon2` rows with `Υ2` on the manifold.
pub fn write_csv<W: Write>(out: &mut W, states: &[MacroState], kappa: f64) -> Result<()> {
    writeln!(out, "t,x,rho,upsilon1,upsilon2")?;
    for s in states {
        let u2 = s.upsilon2(kappa);
        for i in 0..s.x.len() {
            writeln!(out, "{},{},{},{},{}", s.time, s.x.center(i), s.rho[i], s.upsilon1[i], u2[i])?;
        }
    }
    Ok(())
}
