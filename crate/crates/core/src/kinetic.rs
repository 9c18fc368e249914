//! Finite-volume solver for `∂_t f + ∂_x(V f) = Q(f)/ε` on `[0, 1] × [y_min, y_max]`.
//!
//! Transport is first-order upwind in `x`, collision is a backward-Euler step
//! of the exponentially fitted operator in each `x`-cell, and the two are
//! combined by operator splitting. The collision coefficients come from the
//! moments of the cell they act on.

use serde::{Deserialize, Serialize};
use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fokker_planck::{CollisionOperator, FluxScheme};
use crate::grid::{WealthGrid, XGrid};
use crate::model::{self, ModelParams, MomentPair, VelocityField, VARIANCE_FLOOR};

/// Cells with `ρ` below this are vacuum: no moments, no collision.
pub const VACUUM_THRESHOLD: f64 = 1e-12;

/// Fraction of the upwind stability limit allowed for a transport step.
pub const CFL: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct KineticState {
    pub x: XGrid,
    pub y: WealthGrid,
    /// Cell averages, `f[i * ny + j]` for x-cell `i` and wealth node `j`.
    pub f: Vec<f64>,
    pub time: f64,
}

impl KineticState {
    pub fn new(x: XGrid, y: WealthGrid, f: Vec<f64>) -> Result<Self> {
        if f.len() != x.len() * y.len() {
            return Err(Error::InvalidParameter(format!(
                "density has {} entries for a {}×{} grid",
                f.len(),
                x.len(),
                y.len()
            )));
        }
        if f.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidParameter("density must be finite and nonnegative".into()));
        }
        Ok(Self { x, y, f, time: 0.0 })
    }

    /// `f(x, y) = ρ(x)·g(y)`, with `g` rescaled to unit quadrature mass.
    pub fn separable<R: Fn(f64) -> f64>(x: XGrid, y: WealthGrid, rho: R, g: &[f64]) -> Result<Self> {
        let mass = y.integrate(g);
        if !(mass > 0.0) {
            return Err(Error::InvalidParameter("wealth profile has no mass on the grid".into()));
        }
        let mut f = Vec::with_capacity(x.len() * y.len());
        for i in 0..x.len() {
            let r = rho(x.center(i));
            f.extend(g.iter().map(|v| r * v / mass));
        }
        Self::new(x, y, f)
    }

    pub fn slice(&self, i: usize) -> &[f64] {
        let ny = self.y.len();
        &self.f[i * ny..(i + 1) * ny]
    }

    pub fn total_mass(&self) -> f64 {
        let ny = self.y.len();
        self.f.chunks(ny).map(|s| self.y.integrate(s)).sum::<f64>() * self.x.dx()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentField {
    pub rho: Vec<f64>,
    pub upsilon1: Vec<f64>,
    pub upsilon2: Vec<f64>,
    pub vacuum: Vec<bool>,
}

impl MomentField {
    /// Validated moments of cell `i`; `None` for vacuum or degenerate cells.
    pub fn pair(&self, i: usize) -> Option<MomentPair> {
        if self.vacuum[i] {
            return None;
        }
        MomentPair::new(self.upsilon1[i], self.upsilon2[i]).ok()
    }
}

/// `ρ`, `Υ1`, `Υ2` of one wealth profile; `None` below the vacuum threshold.
pub fn slice_moments(grid: &WealthGrid, f: &[f64]) -> Option<(f64, f64, f64)> {
    let m = grid.moments012(f);
    if !(m[0] > VACUUM_THRESHOLD) {
        return None;
    }
    Some((m[0], m[1] / m[0], m[2] / m[0]))
}

pub fn moments(s: &KineticState) -> MomentField {
    let n = s.x.len();
    let mut out = MomentField {
        rho: vec![0.0; n],
        upsilon1: vec![0.0; n],
        upsilon2: vec![0.0; n],
        vacuum: vec![true; n],
    };
    for i in 0..n {
        if let Some((r, u1, u2)) = slice_moments(&s.y, s.slice(i)) {
            out.rho[i] = r;
            out.upsilon1[i] = u1;
            out.upsilon2[i] = u2;
            out.vacuum[i] = false;
        }
    }
    out
}

/// Risk-averse `(a, b)` at the given moments; a degenerate pair gets the
/// on-manifold values `a = d(1+κ)`, `b = −(1+κ)dΥ1`.
pub fn coefficients(upsilon1: f64, upsilon2: f64, p: &ModelParams) -> (f64, f64) {
    let b = model::strategy_b(upsilon1, p);
    let var = upsilon2 - upsilon1 * upsilon1;
    if var > VARIANCE_FLOOR * upsilon1 * upsilon1 {
        (p.d * upsilon2 / var, b)
    } else {
        (p.d * (1.0 + p.kappa), b)
    }
}

/// `C[f, m](f)`: the collision operator with coefficients frozen at `m`.
/// Vacuum input (`m = None`) gives zero.
pub fn collision_apply(f: &[f64], grid: &WealthGrid, m: Option<&MomentPair>, p: &ModelParams, scheme: FluxScheme) -> Result<Vec<f64>> {
    let Some(m) = m else {
        return Ok(vec![0.0; f.len()]);
    };
    let (a, b) = coefficients(m.upsilon1(), m.upsilon2(), p);
    Ok(CollisionOperator::new(grid, a, b, p.d, scheme)?.apply(f))
}

/// Backward-Euler collision step `(I − τC[·, m]) f⁺ = f` with coefficients
/// frozen at `m`.
pub fn collision_step(f: &[f64], grid: &WealthGrid, m: Option<&MomentPair>, p: &ModelParams, tau: f64, scheme: FluxScheme) -> Result<Vec<f64>> {
    let Some(m) = m else {
        return Ok(f.to_vec());
    };
    let (a, b) = coefficients(m.upsilon1(), m.upsilon2(), p);
    CollisionOperator::new(grid, a, b, p.d, scheme)?.implicit_solve(f, tau)
}

/// Coefficients of a backward-Euler collision step whose moment image keeps
/// the variance of the input.
///
/// With `r` a free variation parameter, `a = d(1+r)/r` and
/// `b = −(1+κ)dΥ1⁺(r)` where `Υ1⁺(r) = Υ1/(1 + τd(1/r − κ))` is the implicit
/// image of the mean. The image of the second moment is then
/// `(Υ2 + 2τ(1+κ)dΥ1⁺²)/(1 + 2τd/r)`, and `r` is fixed by bisection in
/// `ln r` so that the image variance equals `Υ2 − Υ1²`. As `τ → ∞` this
/// gives `r → 1/κ`, the manifold.
pub fn variance_preserving_coefficients(m: &MomentPair, p: &ModelParams, tau: f64) -> Result<(f64, f64)> {
    let (u1, u2, var) = (m.upsilon1(), m.upsilon2(), m.variance());
    let (d, k) = (p.d, p.kappa);
    let s = tau * d;
    let mean = |r: f64| u1 / (1.0 + s * (1.0 / r - k));
    let excess = |r: f64| {
        let m1 = mean(r);
        (u2 + 2.0 * tau * (1.0 + k) * d * m1 * m1) / (1.0 + 2.0 * s / r) - m1 * m1 - var
    };
    // below the root the excess is negative; above it (up to the pole of the
    // mean, or infinity) it is positive
    let mut lo = -700.0f64;
    let mut hi = if s * k > 1.0 { -(k - 1.0 / s).ln() } else { 700.0 };
    if !(excess(lo.exp()) < 0.0) {
        return Err(Error::NonConvergence { iterations: 0, residual: excess(lo.exp()) });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let e = excess(mid.exp());
        if e.is_nan() || e > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-15 * (1.0 + hi.abs()) {
            break;
        }
    }
    let r = (0.5 * (lo + hi)).exp();
    let m1 = mean(r);
    if !(m1 > 0.0 && m1.is_finite()) {
        return Err(Error::NonConvergence { iterations: 200, residual: f64::NAN });
    }
    Ok((d * (1.0 + r) / r, -(1.0 + k) * d * m1))
}

/// How the coefficients of a collision step are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollisionUpdate {
    /// Frozen at the moments of the input.
    Lagged,
    /// Solved so that the moment image keeps the variance of the input.
    #[default]
    VariancePreserving,
}

/// One collision step of a single profile; vacuum profiles pass through.
pub fn collide(f: &[f64], grid: &WealthGrid, p: &ModelParams, tau: f64, update: CollisionUpdate, scheme: FluxScheme) -> Result<Vec<f64>> {
    let Some((_, u1, u2)) = slice_moments(grid, f) else {
        return Ok(f.to_vec());
    };
    let pair = MomentPair::new(u1, u2).ok();
    let (a, b) = match (update, pair) {
        (CollisionUpdate::VariancePreserving, Some(m)) => variance_preserving_coefficients(&m, p, tau)?,
        _ => coefficients(u1, u2, p),
    };
    CollisionOperator::new(grid, a, b, p.d, scheme)?.implicit_solve(f, tau)
}

/// Largest stable transport step, `CFL·Δx/max|V|`.
pub fn transport_dt_max(x: &XGrid, v: &VelocityField) -> f64 {
    let speed = v.max_speed();
    if speed == 0.0 {
        f64::INFINITY
    } else {
        CFL * x.dx() / speed
    }
}

/// Upwind update of every wealth row; no flux through `x = 0, 1`.
pub fn transport_step(s: &mut KineticState, v: &VelocityField, dt: f64) -> Result<()> {
    if v.is_zero() {
        s.time += dt;
        return Ok(());
    }
    let dt_max = transport_dt_max(&s.x, v);
    if dt > dt_max * (1.0 + 1e-12) {
        return Err(Error::CflViolation { dt, dt_max });
    }
    let (nx, ny) = (s.x.len(), s.y.len());
    let lam = dt / s.x.dx();
    let psi: Vec<f64> = s.y.nodes().iter().map(|&y| v.psi(y)).collect();
    // face velocity factors for interior faces 1..nx-1
    let phi: Vec<f64> = (0..=nx).map(|i| if i == 0 || i == nx { 0.0 } else { v.phi(s.x.face(i)) }).collect();
    let old = &s.f;
    let flux = |i: usize, j: usize| -> f64 {
        // face i sits between cells i-1 and i
        if i == 0 || i == nx {
            return 0.0;
        }
        let u = phi[i] * psi[j];
        if u >= 0.0 {
            u * old[(i - 1) * ny + j]
        } else {
            u * old[i * ny + j]
        }
    };
    let mut next = vec![0.0; nx * ny];
    next.par_chunks_mut(ny).enumerate().for_each(|(i, row)| {
        for (j, out) in row.iter_mut().enumerate() {
            *out = old[i * ny + j] - lam * (flux(i + 1, j) - flux(i, j));
        }
    });
    s.f = next;
    s.time += dt;
    Ok(())
}

/// Collision in every `x`-cell, with local or global moments.
pub fn collision_sweep(s: &mut KineticState, p: &ModelParams, tau: f64, cfg: &KineticConfig) -> Result<()> {
    let ny = s.y.len();
    let grid = &s.y;
    match cfg.coupling {
        KineticCoupling::Local => {
            let rows: Result<Vec<Vec<f64>>> =
                s.f.par_chunks(ny).map(|row| collide(row, grid, p, tau, cfg.collision, cfg.flux)).collect();
            s.f = rows?.concat();
        }
        KineticCoupling::Global => {
            let mut pooled = vec![0.0; ny];
            for row in s.f.chunks(ny) {
                pooled.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            let Some((_, u1, u2)) = slice_moments(grid, &pooled) else {
                return Ok(());
            };
            let (a, b) = match (cfg.collision, MomentPair::new(u1, u2)) {
                (CollisionUpdate::VariancePreserving, Ok(m)) => variance_preserving_coefficients(&m, p, tau)?,
                _ => coefficients(u1, u2, p),
            };
            let op = CollisionOperator::new(grid, a, b, p.d, cfg.flux)?;
            let rows: Result<Vec<Vec<f64>>> = s
                .f
                .par_chunks(ny)
                .map(|row| if grid.integrate(row) > VACUUM_THRESHOLD { op.implicit_solve(row, tau) } else { Ok(row.to_vec()) })
                .collect();
            s.f = rows?.concat();
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Splitting {
    /// Transport, then collision.
    #[default]
    Lie,
    /// Half transport, collision, half transport.
    Strang,
}

/// Where the collision coefficients take their moments from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KineticCoupling {
    #[default]
    Local,
    Global,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KineticConfig {
    pub dt: f64,
    pub t_final: f64,
    pub splitting: Splitting,
    pub collision: CollisionUpdate,
    pub flux: FluxScheme,
    pub coupling: KineticCoupling,
    pub output_times: Vec<f64>,
}

impl KineticConfig {
    pub fn new(dt: f64, t_final: f64) -> Self {
        Self {
            dt,
            t_final,
            splitting: Splitting::default(),
            collision: CollisionUpdate::default(),
            flux: FluxScheme::default(),
            coupling: KineticCoupling::default(),
            output_times: Vec::new(),
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            v.push(format!("kinetic.dt must be positive (got {})", self.dt));
        }
        if !(self.t_final >= 0.0 && self.t_final.is_finite()) {
            v.push(format!("kinetic.t_final must be nonnegative (got {})", self.t_final));
        }
        if self.output_times.windows(2).any(|w| w[1] <= w[0]) {
            v.push("output times must be strictly increasing".to_string());
        }
        if self.output_times.iter().any(|t| *t < 0.0 || *t > self.t_final) {
            v.push("output times must lie in [0, t_final]".to_string());
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KineticRun {
    pub snapshots: Vec<KineticState>,
    pub steps: usize,
    pub initial_mass: f64,
    /// Largest `|M_{n+1} − M_n|/M_0` over all steps.
    pub max_step_mass_drift: f64,
}

/// Integrates to `cfg.t_final`, shortening steps to land on output times.
pub fn evolve(init: &KineticState, p: &ModelParams, v: &VelocityField, cfg: &KineticConfig) -> Result<KineticRun> {
    let bad = cfg.violations();
    if !bad.is_empty() {
        return Err(Error::Validation(bad));
    }
    v.validate()?;
    let dt_max = transport_dt_max(&init.x, v);
    if cfg.dt > dt_max {
        return Err(Error::CflViolation { dt: cfg.dt, dt_max });
    }
    let mut s = init.clone();
    let m0 = s.total_mass();
    let mut targets = cfg.output_times.clone();
    if targets.last().is_none_or(|t| *t < cfg.t_final) {
        targets.push(cfg.t_final);
    }
    let mut snapshots = Vec::with_capacity(targets.len());
    let mut steps = 0;
    let mut drift: f64 = 0.0;
    let mut mass = m0;
    let tol = 1e-9 * cfg.dt;
    for &target in &targets {
        while s.time < target - tol {
            let h = cfg.dt.min(target - s.time);
            let start = s.time;
            let tau = h / p.epsilon;
            match cfg.splitting {
                Splitting::Lie => {
                    transport_step(&mut s, v, h)?;
                    collision_sweep(&mut s, p, tau, cfg)?;
                }
                Splitting::Strang => {
                    transport_step(&mut s, v, 0.5 * h)?;
                    collision_sweep(&mut s, p, tau, cfg)?;
                    transport_step(&mut s, v, 0.5 * h)?;
                }
            }
            s.time = start + h;
            steps += 1;
            let now = s.total_mass();
            if m0 > 0.0 {
                drift = drift.max((now - mass).abs() / m0);
            }
            mass = now;
        }
        s.time = target;
        snapshots.push(s.clone());
    }
    Ok(KineticRun { snapshots, steps, initial_mass: m0, max_step_mass_drift: drift })
}

/// `(0, −(aΥ1 + b)ρ, (2(d − a)Υ2 − 2bΥ1)ρ)` per cell; zero in vacuum.
pub fn hierarchy_rhs(s: &KineticState, p: &ModelParams) -> Vec<[f64; 3]> {
    let m = moments(s);
    (0..s.x.len())
        .map(|i| {
            if m.vacuum[i] {
                return [0.0; 3];
            }
            let (u1, u2, rho) = (m.upsilon1[i], m.upsilon2[i], m.rho[i]);
            let (a, b) = coefficients(u1, u2, p);
            [0.0, -(a * u1 + b) * rho, (2.0 * (p.d - a) * u2 - 2.0 * b * u1) * rho]
        })
        .collect()
}

/// `t,x,y,f` rows for densities above `threshold`.
pub fn write_field_csv<W: Write>(out: &mut W, states: &[KineticState], threshold: f64) -> Result<()> {
    writeln!(out, "t,x,y,f")?;
    for s in states {
        let ny = s.y.len();
        for i in 0..s.x.len() {
            let x = s.x.center(i);
            for (j, &y) in s.y.nodes().iter().enumerate() {
                let v = s.f[i * ny + j];
                if v > threshold {
                    writeln!(out, "{},{},{},{}", s.time, x, y, v)?;
                }
            }
        }
    }
    Ok(())
}

/// `t,x,rho,upsilon1,upsilon2` rows; vacuum cells carry zero moments.
pub fn write_moments_csv<W: Write>(out: &mut W, states: &[KineticState]) -> Result<()> {
    writeln!(out, "t,x,rho,upsilon1,upsilon2")?;
    for s in states {
        let m = moments(s);
        for i in 0..s.x.len() {
            writeln!(out, "{},{},{},{},{}", s.time, s.x.center(i), m.rho[i], m.upsilon1[i], m.upsilon2[i])?;
        }
    }
    Ok(())
}
