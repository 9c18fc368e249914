//! Agent-based simulation of the mean-field wealth dynamics.
//!
//! Each agent carries a configuration `x ∈ [0, 1]` and a wealth `y > 0`:
//!
//! ```text
//! dX = V(X, Y) dt
//! dY = −(a Y + b)/ε dt + sqrt(2d/ε) Y dB
//! ```
//!
//! where `a`, `b` are the risk-averse coefficients evaluated at the empirical
//! moments of the agents sharing the trader's market (all agents, or those in
//! the same configuration bin). The moments are frozen over a step.
//!
//! Random numbers come from ChaCha8 streams keyed by `(seed, step, chunk)`
//! with fixed chunks of [`CHUNK`] agents, and all reductions run over those
//! chunks in order, so results do not depend on the thread count.

use serde::{Deserialize, Serialize};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, LogNormal, StandardNormal};
use rayon::prelude::*;

use statrs::function::gamma::ln_gamma;

use crate::equilibrium::InverseGamma;
use crate::error::{Error, Result};
use crate::model::{self, ModelParams, MomentPair, VelocityField, VARIANCE_FLOOR};

/// Agents per RNG stream and per partial sum.
pub const CHUNK: usize = 4096;

/// Smallest admissible occupation of a configuration bin in binned coupling.
pub const MIN_BIN_COUNT: usize = 10;

/// RNG stream reserved for the initial sampling.
const INIT_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coupling {
    /// Every agent trades with the whole market.
    Global,
    /// Agents trade with the market of their configuration bin.
    Binned { n_bins: usize },
}

impl Coupling {
    pub fn n_bins(&self) -> usize {
        match self {
            Coupling::Global => 1,
            Coupling::Binned { n_bins } => *n_bins,
        }
    }

    pub fn bin_of(&self, x: f64) -> usize {
        let n = self.n_bins();
        ((x * n as f64) as usize).min(n - 1)
    }
}

/// Time discretisation of the wealth equation with frozen `a`, `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WealthScheme {
    /// Exact geometric step for `−aY` followed by an explicit `−b` step.
    Lie,
    /// Half exact affine drift, exact noise factor, half exact affine drift.
    #[default]
    Strang,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleConfig {
    pub n_agents: usize,
    pub dt: f64,
    pub t_final: f64,
    pub coupling: Coupling,
    pub seed: u64,
    pub scheme: WealthScheme,
    /// Snapshot times in `[0, t_final]`, increasing. The final time is always
    /// recorded.
    pub output_times: Vec<f64>,
}

impl ParticleConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.n_agents == 0 {
            v.push("particles.n_agents must be positive".to_string());
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            v.push(format!("particles.dt must be positive (got {})", self.dt));
        }
        if !(self.t_final >= 0.0 && self.t_final.is_finite()) {
            v.push(format!("particles.t_final must be nonnegative (got {})", self.t_final));
        }
        if self.coupling.n_bins() == 0 {
            v.push("particles.n_bins must be positive".to_string());
        }
        if self.output_times.windows(2).any(|w| w[1] <= w[0]) {
            v.push("output times must be strictly increasing".to_string());
        }
        if self.output_times.iter().any(|t| *t < 0.0 || *t > self.t_final) {
            v.push("output times must lie in [0, t_final]".to_string());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentEnsemble {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub time: f64,
    /// Number of steps taken; selects the RNG stream of the next step.
    pub step: u64,
    pub seed: u64,
}

impl AgentEnsemble {
    pub fn new(x: Vec<f64>, y: Vec<f64>, seed: u64) -> Result<Self> {
        if x.len() != y.len() || x.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "ensemble needs matching nonempty arrays (got {} positions, {} wealths)",
                x.len(),
                y.len()
            )));
        }
        if let Some(bad) = y.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidParameter(format!("wealth must be positive (got {bad})")));
        }
        if let Some(bad) = x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::OutOfDomain(*bad));
        }
        Ok(Self { x, y, time: 0.0, step: 0, seed })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Raw empirical statistics of one market.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinStats {
    pub count: usize,
    /// Fraction of all agents in the bin, divided by the bin width.
    pub rho: f64,
    pub upsilon1: f64,
    pub upsilon2: f64,
}

impl BinStats {
    /// The moments as a validated pair; fails for empty or degenerate bins.
    pub fn moment_pair(&self) -> Result<MomentPair> {
        if self.count == 0 {
            return Err(Error::InsufficientSupport("empty bin".into()));
        }
        MomentPair::new(self.upsilon1, self.upsilon2)
    }
}

fn ordered_sums(e: &AgentEnsemble, n_bins: usize, coupling: Coupling) -> Vec<(usize, f64, f64)> {
    let partial: Vec<Vec<(usize, f64, f64)>> = e
        .x
        .par_chunks(CHUNK)
        .zip(e.y.par_chunks(CHUNK))
        .map(|(xs, ys)| {
            let mut acc = vec![(0usize, 0.0, 0.0); n_bins];
            for (&x, &y) in xs.iter().zip(ys) {
                let s = &mut acc[coupling.bin_of(x)];
                s.0 += 1;
                s.1 += y;
                s.2 += y * y;
            }
            acc
        })
        .collect();
    let mut total = vec![(0usize, 0.0, 0.0); n_bins];
    for chunk in partial {
        for (t, c) in total.iter_mut().zip(chunk) {
            t.0 += c.0;
            t.1 += c.1;
            t.2 += c.2;
        }
    }
    total
}

/// Per-market means of `y` and `y²`; one entry for global coupling.
///
/// In binned mode every occupied bin must hold at least [`MIN_BIN_COUNT`]
/// agents.
pub fn empirical_moments(e: &AgentEnsemble, coupling: Coupling) -> Result<Vec<BinStats>> {
    if e.is_empty() {
        return Err(Error::InsufficientSupport("empty ensemble".into()));
    }
    let n_bins = coupling.n_bins();
    let sums = ordered_sums(e, n_bins, coupling);
    let n = e.len() as f64;
    let mut out = Vec::with_capacity(n_bins);
    for (bin, (count, s1, s2)) in sums.into_iter().enumerate() {
        if let Coupling::Binned { .. } = coupling {
            if count > 0 && count < MIN_BIN_COUNT {
                return Err(Error::SparseBin { bin, count, min: MIN_BIN_COUNT });
            }
        }
        let c = count.max(1) as f64;
        out.push(BinStats {
            count,
            rho: count as f64 / n * n_bins as f64,
            upsilon1: s1 / c,
            upsilon2: s2 / c,
        });
    }
    Ok(out)
}

/// Moments of the whole ensemble as a validated pair.
pub fn global_moments(e: &AgentEnsemble) -> Result<MomentPair> {
    empirical_moments(e, Coupling::Global)?[0].moment_pair()
}

/// Coefficients `(a, b)` used by the agents of one market.
///
/// A market whose relative variance is below the floor falls back to the
/// on-manifold values `a = d(1+κ)`, `b = −(1+κ)dΥ1`.
pub fn market_coefficients(stats: &BinStats, p: &ModelParams) -> (f64, f64) {
    let u1 = stats.upsilon1.max(0.0);
    let b = model::strategy_b(u1, p);
    let var = stats.upsilon2 - u1 * u1;
    if stats.count == 0 || !(var > VARIANCE_FLOOR * u1 * u1) || u1 <= 0.0 {
        return (p.d * (1.0 + p.kappa), b);
    }
    (p.d * stats.upsilon2 / var, b)
}

/// Exact solution of `y' = −(a y + b)` over `t`.
fn affine_flow(y: f64, a: f64, b: f64, t: f64) -> f64 {
    if a == 0.0 {
        return y - b * t;
    }
    let e = (-a * t).exp();
    // y e^{−at} − (b/a)(1 − e^{−at}), written to keep both terms nonnegative
    y * e - b * (-(-a * t).exp_m1()) / a
}

/// One wealth update with frozen coefficients; `z` is a standard normal.
pub fn wealth_update(y: f64, a: f64, b: f64, d: f64, dt: f64, z: f64, scheme: WealthScheme) -> f64 {
    let noise = (2.0 * d * dt).sqrt() * z;
    match scheme {
        WealthScheme::Lie => y * ((-a - d) * dt + noise).exp() - b * dt,
        WealthScheme::Strang => {
            let half = affine_flow(y, a, b, 0.5 * dt);
            let mid = half * (-d * dt + noise).exp();
            affine_flow(mid, a, b, 0.5 * dt)
        }
    }
}

fn chunk_rng(seed: u64, stream: u64, chunk: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos((chunk as u128) << 32);
    rng
}

/// Advances the ensemble by `dt`; returns the market statistics it used.
pub fn step(e: &mut AgentEnsemble, p: &ModelParams, v: &VelocityField, coupling: Coupling, scheme: WealthScheme, dt: f64) -> Result<Vec<BinStats>> {
    let stats = empirical_moments(e, coupling)?;
    let coef: Vec<(f64, f64)> = stats.iter().map(|s| market_coefficients(s, p)).collect();
    let rate_dt = dt / p.epsilon;
    let (seed, stream) = (e.seed, e.step);
    let moving = !v.is_zero();
    e.x.par_chunks_mut(CHUNK)
        .zip(e.y.par_chunks_mut(CHUNK))
        .enumerate()
        .for_each(|(c, (xs, ys))| {
            let mut rng = chunk_rng(seed, stream, c);
            for (x, y) in xs.iter_mut().zip(ys.iter_mut()) {
                let (a, b) = coef[coupling.bin_of(*x)];
                let z: f64 = StandardNormal.sample(&mut rng);
                if moving {
                    *x = (*x + v.phi(*x) * v.psi(*y) * dt).clamp(0.0, 1.0);
                }
                *y = wealth_update(*y, a, b, p.d, rate_dt, z, scheme);
            }
        });
    e.step += 1;
    e.time += dt;
    Ok(stats)
}

/// Wealth law of the initial ensemble.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WealthInit {
    InverseGamma { alpha: f64, beta: f64 },
    LogNormal { mean: f64, variance: f64 },
    Gamma { shape: f64, scale: f64 },
    Constant(f64),
}

impl WealthInit {
    /// Probability density; `None` for the point mass.
    pub fn pdf(&self, y: f64) -> Option<f64> {
        if y <= 0.0 {
            return Some(0.0);
        }
        Some(match *self {
            WealthInit::InverseGamma { alpha, beta } => InverseGamma { alpha, beta }.pdf(y),
            WealthInit::LogNormal { mean, variance } => {
                let s2 = (1.0 + variance / (mean * mean)).ln();
                let z = y.ln() - (mean.ln() - 0.5 * s2);
                (-0.5 * z * z / s2).exp() / (y * (2.0 * std::f64::consts::PI * s2).sqrt())
            }
            WealthInit::Gamma { shape, scale } => {
                ((shape - 1.0) * y.ln() - y / scale - ln_gamma(shape) - shape * scale.ln()).exp()
            }
            WealthInit::Constant(_) => return None,
        })
    }

    /// Mean and variance of the law.
    pub fn mean_variance(&self) -> (f64, f64) {
        match *self {
            WealthInit::InverseGamma { alpha, beta } => {
                let m = beta / (alpha - 1.0);
                (m, if alpha > 2.0 { m * m / (alpha - 2.0) } else { f64::INFINITY })
            }
            WealthInit::LogNormal { mean, variance } => (mean, variance),
            WealthInit::Gamma { shape, scale } => (shape * scale, shape * scale * scale),
            WealthInit::Constant(c) => (c, 0.0),
        }
    }
}

/// Configuration law of the initial ensemble.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PositionInit {
    Uniform,
    /// Density `1 + amplitude·cos(mode·πx)` with `|amplitude| < 1`.
    Cosine { amplitude: f64, mode: u32 },
}

/// Wealth multiplier `1 + amplitude·sin(mode·πx)` for an agent at `x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WealthModulation {
    pub amplitude: f64,
    pub mode: u32,
}

impl WealthModulation {
    pub fn factor(&self, x: f64) -> f64 {
        1.0 + self.amplitude * (self.mode as f64 * std::f64::consts::PI * x).sin()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialSampler {
    pub wealth: WealthInit,
    pub position: PositionInit,
    pub modulation: Option<WealthModulation>,
}

fn sample_wealth(law: &WealthInit, rng: &mut ChaCha8Rng) -> Result<f64> {
    Ok(match *law {
        WealthInit::InverseGamma { alpha, beta } => {
            let g = Gamma::new(alpha, 1.0 / beta).map_err(|e| Error::InvalidParameter(e.to_string()))?;
            1.0 / g.sample(rng)
        }
        WealthInit::LogNormal { mean, variance } => {
            let s2 = (1.0 + variance / (mean * mean)).ln();
            let ln = LogNormal::new(mean.ln() - 0.5 * s2, s2.sqrt()).map_err(|e| Error::InvalidParameter(e.to_string()))?;
            ln.sample(rng)
        }
        WealthInit::Gamma { shape, scale } => {
            let g = Gamma::new(shape, scale).map_err(|e| Error::InvalidParameter(e.to_string()))?;
            g.sample(rng)
        }
        WealthInit::Constant(c) => c,
    })
}

fn sample_position(law: &PositionInit, rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.random();
    match *law {
        PositionInit::Uniform => u,
        PositionInit::Cosine { amplitude, mode } => {
            // invert x + A sin(kπx)/(kπ) = u by bisection
            let k = mode as f64 * std::f64::consts::PI;
            let cdf = |x: f64| x + amplitude * (k * x).sin() / k;
            let (mut lo, mut hi) = (0.0, 1.0);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if cdf(mid) < u {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        }
    }
}

impl PositionInit {
    pub fn pdf(&self, x: f64) -> f64 {
        match *self {
            PositionInit::Uniform => 1.0,
            PositionInit::Cosine { amplitude, mode } => 1.0 + amplitude * (mode as f64 * std::f64::consts::PI * x).cos(),
        }
    }
}

impl InitialSampler {
    pub fn validate(&self) -> Result<()> {
        let bad = match self.wealth {
            WealthInit::InverseGamma { alpha, beta } => !(alpha > 0.0 && beta > 0.0),
            WealthInit::LogNormal { mean, variance } => !(mean > 0.0 && variance > 0.0),
            WealthInit::Gamma { shape, scale } => !(shape > 0.0 && scale > 0.0),
            WealthInit::Constant(c) => !(c > 0.0),
        };
        if bad {
            return Err(Error::InvalidParameter(format!("invalid initial wealth law {:?}", self.wealth)));
        }
        if let PositionInit::Cosine { amplitude, mode } = self.position {
            if !(amplitude.abs() < 1.0) || mode == 0 {
                return Err(Error::InvalidParameter(format!(
                    "cosine density needs |amplitude| < 1 and mode ≥ 1 (got {amplitude}, {mode})"
                )));
            }
        }
        if let Some(m) = self.modulation {
            if !(m.amplitude.abs() < 1.0) || m.mode == 0 {
                return Err(Error::InvalidParameter(format!(
                    "wealth modulation needs |amplitude| < 1 and mode ≥ 1 (got {}, {})",
                    m.amplitude, m.mode
                )));
            }
        }
        Ok(())
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<AgentEnsemble> {
        self.validate()?;
        let chunks: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut rng = chunk_rng(seed, INIT_STREAM, c);
                let len = CHUNK.min(n - c * CHUNK);
                let mut xs = Vec::with_capacity(len);
                let mut ys = Vec::with_capacity(len);
                for _ in 0..len {
                    let x = sample_position(&self.position, &mut rng);
                    let y = sample_wealth(&self.wealth, &mut rng)?;
                    xs.push(x);
                    ys.push(self.modulation.map_or(y, |m| y * m.factor(x)));
                }
                Ok((xs, ys))
            })
            .collect();
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for c in chunks {
            let (xs, ys) = c?;
            x.extend(xs);
            y.extend(ys);
        }
        AgentEnsemble::new(x, y, seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub time: f64,
    pub ensemble: AgentEnsemble,
    pub stats: Vec<BinStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleRun {
    pub snapshots: Vec<Snapshot>,
    pub steps: u64,
    /// Agent count at every snapshot.
    pub agent_counts: Vec<usize>,
}

/// Samples the initial ensemble and integrates to `cfg.t_final`.
///
/// The step is shortened where needed to land on each output time.
pub fn run(cfg: &ParticleConfig, p: &ModelParams, v: &VelocityField, init: &InitialSampler) -> Result<ParticleRun> {
    cfg.validate()?;
    v.validate()?;
    let mut e = init.sample(cfg.n_agents, cfg.seed)?;
    let mut targets = cfg.output_times.clone();
    if targets.last().is_none_or(|t| *t < cfg.t_final) {
        targets.push(cfg.t_final);
    }
    let mut snapshots = Vec::with_capacity(targets.len());
    let tol = 1e-9 * cfg.dt;
    for &target in &targets {
        while e.time < target - tol {
            let h = cfg.dt.min(target - e.time);
            step(&mut e, p, v, cfg.coupling, cfg.scheme, h)?;
        }
        e.time = target;
        let stats = empirical_moments(&e, cfg.coupling)?;
        snapshots.push(Snapshot { time: target, ensemble: e.clone(), stats });
    }
    let agent_counts = snapshots.iter().map(|s| s.ensemble.len()).collect();
    Ok(ParticleRun { steps: e.step, snapshots, agent_counts })
}

/// Mass-normalised 2-D histogram, row-major with `y` fastest; agents outside
/// the edges are dropped but still count towards the normalisation.
pub fn histogram(e: &AgentEnsemble, x_edges: &[f64], y_edges: &[f64]) -> Result<Vec<f64>> {
    check_edges(x_edges)?;
    check_edges(y_edges)?;
    let (nx, ny) = (x_edges.len() - 1, y_edges.len() - 1);
    let mut counts = vec![0usize; nx * ny];
    for (&x, &y) in e.x.iter().zip(&e.y) {
        if let (Some(i), Some(j)) = (locate(x_edges, x), locate(y_edges, y)) {
            counts[i * ny + j] += 1;
        }
    }
    let n = e.len() as f64;
    Ok(counts
        .iter()
        .enumerate()
        .map(|(k, &c)| {
            let (i, j) = (k / ny, k % ny);
            c as f64 / (n * (x_edges[i + 1] - x_edges[i]) * (y_edges[j + 1] - y_edges[j]))
        })
        .collect())
}

/// Wealth density estimate on `edges`, normalised by the total agent count.
pub fn wealth_histogram(y: &[f64], edges: &[f64]) -> Result<Vec<f64>> {
    check_edges(edges)?;
    let mut counts = vec![0usize; edges.len() - 1];
    for &v in y {
        if let Some(j) = locate(edges, v) {
            counts[j] += 1;
        }
    }
    let n = y.len() as f64;
    Ok(counts.iter().enumerate().map(|(j, &c)| c as f64 / (n * (edges[j + 1] - edges[j]))).collect())
}

/// `n + 1` logarithmically spaced edges from `lo` to `hi`.
pub fn log_edges(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..=n).map(|k| (a + (b - a) * k as f64 / n as f64).exp()).collect()
}

fn check_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidParameter("bin edges must be strictly increasing".into()));
    }
    Ok(())
}

fn locate(edges: &[f64], v: f64) -> Option<usize> {
    let last = edges.len() - 1;
    if v < edges[0] || v > edges[last] {
        return None;
    }
    let k = edges.partition_point(|e| *e <= v);
    Some(k.saturating_sub(1).min(last - 1))
}

/// Writes `t,agent_id,x,y` rows for every snapshot.
pub fn write_agents_csv<W: Write>(out: &mut W, run: &ParticleRun) -> Result<()> {
    writeln!(out, "t,agent_id,x,y")?;
    for s in &run.snapshots {
        for (k, (x, y)) in s.ensemble.x.iter().zip(&s.ensemble.y).enumerate() {
            writeln!(out, "{},{},{},{}", s.time, k, x, y)?;
        }
    }
    Ok(())
}

/// Writes `t,bin,rho,upsilon1,upsilon2` rows for every snapshot.
pub fn write_summary_csv<W: Write>(out: &mut W, run: &ParticleRun) -> Result<()> {
    writeln!(out, "t,bin,rho,upsilon1,upsilon2")?;
    for s in &run.snapshots {
        for (k, b) in s.stats.iter().enumerate() {
            writeln!(out, "{},{},{},{},{}", s.time, k, b.rho, b.upsilon1, b.upsilon2)?;
        }
    }
    Ok(())
}
