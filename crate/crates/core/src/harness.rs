//! Scenario files, orchestration of the solvers and cross-scale reports.
//!
//! A scenario is a TOML file. Only `[params]` is mandatory and it must give
//! `d`, `kappa` and `epsilon` explicitly; every other section falls back to
//! the defaults of its `*Spec` type. Wealth grids are given in units of the
//! reference mean wealth of the run that uses them.
//!
//! ```toml
//! seed = 7
//! scales = ["equilibrium", "kinetic"]
//!
//! [params]
//! d = 1.0
//! kappa = 1.0
//! epsilon = 0.1
//!
//! [grid]
//! nx = 64
//! ny = 400
//!
//! [initial.wealth]
//! law = "lognormal"
//! mean = 1.0
//! variance = 1.0
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::equilibrium::{gibbs_closed_form, gibbs_numeric, inverse_gamma_moment, moment_recursion};
use crate::error::{Error, Result};
use crate::fokker_planck::FluxScheme;
use crate::gci::{self, GciFunction, LogNormalMixture};
use crate::grid::{WealthGrid, XGrid};
use crate::hydro::{self, MacroConfig, MacroRun, MacroScheme, MacroState};
use crate::kinetic::{self, CollisionUpdate, KineticConfig, KineticCoupling, KineticRun, KineticState, Splitting};
use crate::model::{self, ConfigProfile, ModelParams, MomentPair, VelocityField, WealthProfile};
use crate::particles::{
    self, Coupling, InitialSampler, ParticleConfig, ParticleRun, PositionInit, WealthInit, WealthModulation, WealthScheme,
};
use crate::stats::{self, LinearFit};

/// Name of the manifest written into every output directory.
pub const MANIFEST: &str = "manifest.json";

/// Relative per-step mass drift above which a run is flagged.
pub const MASS_DRIFT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Equilibrium,
    Gci,
    Particles,
    Kinetic,
    Macro,
}

impl Scale {
    pub fn name(&self) -> &'static str {
        match self {
            Scale::Equilibrium => "equilibrium",
            Scale::Gci => "gci",
            Scale::Particles => "particles",
            Scale::Kinetic => "kinetic",
            Scale::Macro => "macro",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsSpec {
    pub d: f64,
    pub kappa: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiKind {
    #[default]
    Zero,
    Sine,
    Compact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiKind {
    #[default]
    One,
    Saturating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VelocitySpec {
    pub phi: PhiKind,
    pub psi: PsiKind,
    pub v0: f64,
    /// Centre and half-width of the compact bump.
    pub center: Option<f64>,
    pub width: Option<f64>,
}

impl Default for VelocitySpec {
    fn default() -> Self {
        Self { phi: PhiKind::Zero, psi: PsiKind::One, v0: 1.0, center: None, width: None }
    }
}

impl VelocitySpec {
    fn field(&self) -> std::result::Result<VelocityField, String> {
        let phi = match self.phi {
            PhiKind::Zero => ConfigProfile::Zero,
            PhiKind::Sine => ConfigProfile::SineBump,
            PhiKind::Compact => match (self.center, self.width) {
                (Some(center), Some(width)) => ConfigProfile::CompactBump { center, width },
                _ => return Err("velocity.phi = \"compact\" needs velocity.center and velocity.width".into()),
            },
        };
        let psi = match self.psi {
            PsiKind::One => WealthProfile::One,
            PsiKind::Saturating => WealthProfile::Saturating,
        };
        let v = VelocityField { phi, psi, v0: self.v0 };
        v.validate().map_err(|e| format!("velocity: {e}"))?;
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeSpec {
    pub t_final: f64,
    /// Extra snapshot times; `t_final` is always written.
    pub output_times: Vec<f64>,
}

impl Default for TimeSpec {
    fn default() -> Self {
        Self { t_final: 1.0, output_times: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    /// Wealth bounds in units of the reference mean wealth.
    pub y_min: f64,
    pub y_max: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { nx: 64, ny: 400, y_min: 1e-3, y_max: 1e3 }
    }
}

impl GridSpec {
    pub fn x(&self) -> Result<XGrid> {
        XGrid::new(self.nx)
    }

    pub fn wealth(&self, unit: f64) -> Result<WealthGrid> {
        WealthGrid::log_spaced(self.ny, self.y_min * unit, self.y_max * unit)
    }

    fn wealth_with(&self, n: usize, unit: f64) -> Result<WealthGrid> {
        WealthGrid::log_spaced(n, self.y_min * unit, self.y_max * unit)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
pub enum WealthSpec {
    /// Equilibrium law with mean `upsilon1`.
    Gibbs { upsilon1: f64 },
    InverseGamma { alpha: f64, beta: f64 },
    Lognormal { mean: f64, variance: f64 },
    Gamma { shape: f64, scale: f64 },
    Constant { value: f64 },
}

impl Default for WealthSpec {
    fn default() -> Self {
        WealthSpec::Gibbs { upsilon1: 1.0 }
    }
}

impl WealthSpec {
    pub fn law(&self, kappa: f64) -> WealthInit {
        match *self {
            WealthSpec::Gibbs { upsilon1 } => WealthInit::InverseGamma { alpha: kappa + 2.0, beta: (1.0 + kappa) * upsilon1 },
            WealthSpec::InverseGamma { alpha, beta } => WealthInit::InverseGamma { alpha, beta },
            WealthSpec::Lognormal { mean, variance } => WealthInit::LogNormal { mean, variance },
            WealthSpec::Gamma { shape, scale } => WealthInit::Gamma { shape, scale },
            WealthSpec::Constant { value } => WealthInit::Constant(value),
        }
    }
}

/// `1 + amplitude·cos(mode·πx)` for densities, `1 + amplitude·sin(mode·πx)`
/// for the mean-wealth modulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Harmonic {
    pub amplitude: f64,
    pub mode: u32,
}

impl Default for Harmonic {
    fn default() -> Self {
        Self { amplitude: 0.0, mode: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialSpec {
    pub wealth: WealthSpec,
    /// Agent density in `x`.
    pub rho: Harmonic,
    /// Multiplier of every agent's wealth as a function of `x`.
    pub mean: Harmonic,
}

impl InitialSpec {
    pub fn sampler(&self, kappa: f64) -> InitialSampler {
        let position = if self.rho.amplitude == 0.0 {
            PositionInit::Uniform
        } else {
            PositionInit::Cosine { amplitude: self.rho.amplitude, mode: self.rho.mode }
        };
        let modulation = (self.mean.amplitude != 0.0)
            .then_some(WealthModulation { amplitude: self.mean.amplitude, mode: self.mean.mode });
        InitialSampler { wealth: self.wealth.law(kappa), position, modulation }
    }

    /// Mean of the unmodulated wealth law; wealth grids are scaled by it.
    pub fn reference_mean(&self, kappa: f64) -> f64 {
        self.wealth.law(kappa).mean_variance().0
    }

    /// `f(x_i, y) = ρ(x_i)·g(y/s_i)/s_i` with each slice normalised to `ρ(x_i)`.
    pub fn kinetic_state(&self, x: XGrid, y: WealthGrid, kappa: f64) -> Result<KineticState> {
        let sampler = self.sampler(kappa);
        let mut f = Vec::with_capacity(x.len() * y.len());
        for i in 0..x.len() {
            let xc = x.center(i);
            let s = sampler.modulation.map_or(1.0, |m| m.factor(xc));
            let row: Vec<f64> = y
                .nodes()
                .iter()
                .map(|&v| sampler.wealth.pdf(v / s).map(|p| p / s))
                .collect::<Option<_>>()
                .ok_or_else(|| Error::InvalidParameter("a point-mass wealth law has no kinetic density".into()))?;
            let mass = y.integrate(&row);
            if !(mass > 0.0) {
                return Err(Error::InvalidParameter("initial wealth law has no mass on the wealth grid".into()));
            }
            let rho = sampler.position.pdf(xc);
            f.extend(row.iter().map(|v| rho * v / mass));
        }
        KineticState::new(x, y, f)
    }

    /// Density and the mean wealth on the manifold with the initial variance,
    /// `Υ1 = sqrt(κ·Var)`.
    pub fn macro_state(&self, x: XGrid, kappa: f64) -> Result<MacroState> {
        let sampler = self.sampler(kappa);
        let (_, var) = sampler.wealth.mean_variance();
        if !var.is_finite() || var <= 0.0 {
            return Err(Error::InvalidParameter(format!("macro initial data needs a finite positive wealth variance (got {var})")));
        }
        let centers = x.centers();
        let rho = centers.iter().map(|&c| sampler.position.pdf(c)).collect();
        let u1 = centers
            .iter()
            .map(|&c| {
                let s = sampler.modulation.map_or(1.0, |m| m.factor(c));
                (kappa * var).sqrt() * s
            })
            .collect();
        MacroState::new(x, rho, u1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EquilibriumSpec {
    pub upsilon1: f64,
    /// Moment orders tabulated against the recursion.
    pub moments: Vec<usize>,
}

impl Default for EquilibriumSpec {
    fn default() -> Self {
        Self { upsilon1: 1.0, moments: vec![0, 1, 2] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GciSpec {
    pub upsilon1: f64,
    pub upsilon2: f64,
    /// Wealth node counts of the refinement study.
    pub nodes: Vec<usize>,
    /// Random moment-matched densities per node count.
    pub samples: usize,
    pub flux: FluxScheme,
}

impl Default for GciSpec {
    fn default() -> Self {
        Self { upsilon1: 1.0, upsilon2: 2.0, nodes: vec![200, 400, 800], samples: 20, flux: FluxScheme::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingKind {
    Global,
    #[default]
    Binned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParticleSpec {
    pub n_agents: usize,
    /// Defaults to `min(ε/100, t_final/100)`.
    pub dt: Option<f64>,
    pub coupling: CouplingKind,
    /// Defaults to `grid.nx`.
    pub n_bins: Option<usize>,
    pub scheme: WealthScheme,
    /// Write every agent at every snapshot.
    pub write_agents: bool,
}

impl Default for ParticleSpec {
    fn default() -> Self {
        Self { n_agents: 10_000, dt: None, coupling: CouplingKind::Binned, n_bins: None, scheme: WealthScheme::default(), write_agents: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KineticSpec {
    /// Defaults to the transport stability limit, or `t_final/100` without transport.
    pub dt: Option<f64>,
    pub splitting: Splitting,
    pub collision: CollisionUpdate,
    pub flux: FluxScheme,
    pub coupling: KineticCoupling,
    /// Field CSV rows with `f` at or below this value are skipped.
    pub threshold: f64,
}

impl Default for KineticSpec {
    fn default() -> Self {
        Self {
            dt: None,
            splitting: Splitting::default(),
            collision: CollisionUpdate::default(),
            flux: FluxScheme::default(),
            coupling: KineticCoupling::default(),
            threshold: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MacroSpec {
    /// Defaults to the stability limit of the initial state.
    pub dt: Option<f64>,
    pub scheme: MacroScheme,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSpec {
    /// Kinetic runs compared with the macro run.
    pub epsilons: Vec<f64>,
    /// Particle runs compared with the kinetic run.
    pub agents: Vec<usize>,
    /// Wealth bins of the particle–kinetic histogram distance; must divide `grid.ny`.
    pub wealth_bins: usize,
}

impl Default for CompareSpec {
    fn default() -> Self {
        Self { epsilons: Vec::new(), agents: Vec::new(), wealth_bins: 50 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailSource {
    Equilibrium,
    Kinetic,
    Particles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TailFitSpec {
    pub source: TailSource,
    pub lo: f64,
    pub hi: f64,
}

/// The file layout of a scenario, with defaults filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_scales")]
    pub scales: Vec<Scale>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub params: ParamsSpec,
    #[serde(default)]
    pub velocity: VelocitySpec,
    #[serde(default)]
    pub time: TimeSpec,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub initial: InitialSpec,
    #[serde(default)]
    pub equilibrium: EquilibriumSpec,
    #[serde(default)]
    pub gci: GciSpec,
    #[serde(default)]
    pub particles: ParticleSpec,
    #[serde(default)]
    pub kinetic: KineticSpec,
    #[serde(default, rename = "macro")]
    pub macro_: MacroSpec,
    #[serde(default)]
    pub compare: CompareSpec,
    #[serde(default)]
    pub tail_fit: Option<TailFitSpec>,
}

fn default_scales() -> Vec<Scale> {
    vec![Scale::Equilibrium]
}

fn positive(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

impl ScenarioSpec {
    /// Every broken constraint of the file.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let p = ModelParams { d: self.params.d, kappa: self.params.kappa, epsilon: self.params.epsilon };
        v.extend(p.violations().into_iter().map(|m| format!("params.{m}")));
        if let Err(m) = self.velocity.field() {
            v.push(m);
        }
        if self.scales.is_empty() {
            v.push("scales must name at least one of equilibrium, gci, particles, kinetic, macro".into());
        }
        let t = &self.time;
        if !(t.t_final >= 0.0 && t.t_final.is_finite()) {
            v.push(format!("time.t_final must be nonnegative (got {})", t.t_final));
        }
        if t.output_times.windows(2).any(|w| w[1] <= w[0]) {
            v.push("time.output_times must be strictly increasing".into());
        }
        if t.output_times.iter().any(|s| !(*s >= 0.0 && *s <= t.t_final)) {
            v.push("time.output_times must lie in [0, t_final]".into());
        }
        let g = &self.grid;
        if g.nx == 0 {
            v.push("grid.nx must be positive".into());
        }
        if g.ny < 3 {
            v.push(format!("grid.ny must be at least 3 (got {})", g.ny));
        }
        if !(positive(g.y_min) && g.y_max > g.y_min && g.y_max.is_finite()) {
            v.push(format!("grid needs 0 < y_min < y_max (got {}, {})", g.y_min, g.y_max));
        }
        self.initial_violations(&mut v);
        let e = &self.equilibrium;
        if !positive(e.upsilon1) {
            v.push(format!("equilibrium.upsilon1 must be positive (got {})", e.upsilon1));
        }
        let c = &self.gci;
        if !(positive(c.upsilon1) && c.upsilon2 > c.upsilon1 * c.upsilon1 && c.upsilon2.is_finite()) {
            v.push(format!("gci needs upsilon1 > 0 and upsilon2 > upsilon1² (got {}, {})", c.upsilon1, c.upsilon2));
        }
        if c.nodes.iter().any(|n| *n < 3) {
            v.push("gci.nodes entries must be at least 3".into());
        }
        let pa = &self.particles;
        if pa.n_agents == 0 {
            v.push("particles.n_agents must be positive".into());
        }
        if pa.dt.is_some_and(|d| !positive(d)) {
            v.push("particles.dt must be positive".into());
        }
        if pa.n_bins == Some(0) {
            v.push("particles.n_bins must be positive".into());
        }
        if self.kinetic.dt.is_some_and(|d| !positive(d)) {
            v.push("kinetic.dt must be positive".into());
        }
        if !(self.kinetic.threshold >= 0.0) {
            v.push("kinetic.threshold must be nonnegative".into());
        }
        if self.macro_.dt.is_some_and(|d| !positive(d)) {
            v.push("macro.dt must be positive".into());
        }
        let cmp = &self.compare;
        if cmp.epsilons.iter().any(|e| !positive(*e)) {
            v.push("compare.epsilons must be positive".into());
        }
        if cmp.agents.contains(&0) {
            v.push("compare.agents must be positive".into());
        }
        if cmp.wealth_bins == 0 || g.ny % cmp.wealth_bins.max(1) != 0 {
            v.push(format!("compare.wealth_bins must divide grid.ny (got {} and {})", cmp.wealth_bins, g.ny));
        }
        if let Some(tf) = &self.tail_fit {
            if !(positive(tf.lo) && tf.hi > tf.lo && tf.hi.is_finite()) {
                v.push(format!("tail_fit needs 0 < lo < hi (got {}, {})", tf.lo, tf.hi));
            }
        }
        v
    }

    fn initial_violations(&self, v: &mut Vec<String>) {
        let ini = &self.initial;
        if let WealthSpec::Gibbs { upsilon1 } = ini.wealth {
            if !positive(upsilon1) {
                v.push(format!("initial.wealth.upsilon1 must be positive (got {upsilon1})"));
                return;
            }
        }
        for (name, h) in [("rho", ini.rho), ("mean", ini.mean)] {
            if !(h.amplitude.abs() < 1.0) || h.mode == 0 {
                v.push(format!("initial.{name} needs |amplitude| < 1 and mode ≥ 1 (got {}, {})", h.amplitude, h.mode));
            }
        }
        let kappa = self.params.kappa;
        if !positive(kappa) && matches!(ini.wealth, WealthSpec::Gibbs { .. }) {
            return;
        }
        if let Err(e) = ini.sampler(kappa).validate() {
            v.push(format!("initial.wealth: {e}"));
            return;
        }
        let needs_density = self.scales.contains(&Scale::Kinetic)
            || !self.compare.epsilons.is_empty()
            || !self.compare.agents.is_empty();
        if needs_density && matches!(ini.wealth, WealthSpec::Constant { .. }) {
            v.push("initial.wealth: kinetic runs need a wealth law with a density".into());
        }
        let needs_variance = self.scales.contains(&Scale::Macro) || !self.compare.epsilons.is_empty();
        if needs_variance && !ini.wealth.law(kappa).mean_variance().1.is_finite() {
            v.push("initial.wealth: macro runs need a wealth law with finite variance".into());
        }
    }
}

/// A validated scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub params: ModelParams,
    pub velocity: VelocityField,
}

impl Scenario {
    pub fn from_spec(spec: ScenarioSpec) -> Result<Self> {
        let bad = spec.violations();
        if !bad.is_empty() {
            return Err(Error::Validation(bad));
        }
        let params = ModelParams::new(spec.params.d, spec.params.kappa, spec.params.epsilon)?;
        let velocity = spec.velocity.field().map_err(|m| Error::Validation(vec![m]))?;
        Ok(Self { spec, params, velocity })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.spec.seed = seed;
        self
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        let mut s = self.clone();
        s.spec.params.epsilon = epsilon;
        s.params = ModelParams::new(self.params.d, self.params.kappa, epsilon)?;
        Ok(s)
    }

    fn output_times(&self) -> Vec<f64> {
        self.spec.time.output_times.clone()
    }

    pub fn particle_config(&self) -> ParticleConfig {
        let t = self.spec.time.t_final;
        let pa = &self.spec.particles;
        let dt = pa.dt.unwrap_or_else(|| uniform_step((0.01 * self.params.epsilon).min(t / 100.0), t));
        let coupling = match pa.coupling {
            CouplingKind::Global => Coupling::Global,
            CouplingKind::Binned => Coupling::Binned { n_bins: pa.n_bins.unwrap_or(self.spec.grid.nx) },
        };
        ParticleConfig {
            n_agents: pa.n_agents,
            dt,
            t_final: t,
            coupling,
            seed: self.spec.seed,
            scheme: pa.scheme,
            output_times: self.output_times(),
        }
    }

    pub fn kinetic_config(&self) -> Result<KineticConfig> {
        let t = self.spec.time.t_final;
        let k = &self.spec.kinetic;
        let x = self.spec.grid.x()?;
        let limit = kinetic::transport_dt_max(&x, &self.velocity).min(t / 100.0);
        let dt = k.dt.unwrap_or_else(|| uniform_step(limit, t));
        Ok(KineticConfig {
            dt,
            t_final: t,
            splitting: k.splitting,
            collision: k.collision,
            flux: k.flux,
            coupling: k.coupling,
            output_times: self.output_times(),
        })
    }

    pub fn macro_config(&self, init: &MacroState) -> Result<MacroConfig> {
        let t = self.spec.time.t_final;
        let m = &self.spec.macro_;
        let mut limit = hydro::relaxation_dt_max(&init.x, &self.velocity);
        if m.scheme == MacroScheme::Centered {
            limit = limit.min(hydro::centered_dt_max(init, &self.velocity, self.params.kappa)?);
        }
        let dt = m.dt.unwrap_or_else(|| uniform_step(limit.min(t / 100.0), t));
        Ok(MacroConfig { dt, t_final: t, scheme: m.scheme, output_times: self.output_times() })
    }

    pub fn wealth_unit(&self) -> f64 {
        self.spec.initial.reference_mean(self.params.kappa)
    }

    pub fn kinetic_initial(&self) -> Result<KineticState> {
        let y = self.spec.grid.wealth(self.wealth_unit())?;
        self.spec.initial.kinetic_state(self.spec.grid.x()?, y, self.params.kappa)
    }

    pub fn macro_initial(&self) -> Result<MacroState> {
        self.spec.initial.macro_state(self.spec.grid.x()?, self.params.kappa)
    }
}

/// Largest step `≤ limit` that divides `t` evenly.
fn uniform_step(limit: f64, t: f64) -> f64 {
    if !(t > 0.0) {
        return if limit.is_finite() && limit > 0.0 { limit } else { 1.0 };
    }
    t / (t / limit).ceil().max(1.0)
}

/// Reads, parses and validates a scenario file.
pub fn parse_scenario(path: &Path) -> Result<Scenario> {
    let text = fs::read_to_string(path).map_err(|e| Error::Parse(format!("cannot read {}: {e}", path.display())))?;
    parse_scenario_str(&text)
}

pub fn parse_scenario_str(text: &str) -> Result<Scenario> {
    let spec: ScenarioSpec = toml::from_str(text).map_err(|e| Error::Parse(with_suggestion(&e.to_string())))?;
    Scenario::from_spec(spec)
}

/// Appends a "did you mean" hint to unknown-key and unknown-variant messages.
fn with_suggestion(msg: &str) -> String {
    let Some(pos) = msg.find("unknown field `").or_else(|| msg.find("unknown variant `")) else {
        return msg.to_string();
    };
    let rest = &msg[pos..];
    let start = rest.find('`').map(|i| i + 1).unwrap_or(0);
    let Some(len) = rest[start..].find('`') else {
        return msg.to_string();
    };
    let bad = &rest[start..start + len];
    let expected: Vec<&str> = rest[start + len + 1..].split('`').skip(1).step_by(2).collect();
    let best = expected
        .iter()
        .map(|c| (strsim::levenshtein(bad, c), *c))
        .min()
        .filter(|(d, c)| *d <= 2.max(c.len() / 3));
    match best {
        Some((_, c)) => format!("{}\ndid you mean `{c}`?", msg.trim_end()),
        None => msg.to_string(),
    }
}

/// Per-cell fields of one snapshot on a uniform `x` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentFrame {
    pub time: f64,
    pub rho: Vec<f64>,
    pub upsilon1: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentTrajectory {
    pub label: String,
    pub frames: Vec<MomentFrame>,
}

impl MomentTrajectory {
    pub fn from_kinetic(run: &KineticRun) -> Self {
        let frames = run
            .snapshots
            .iter()
            .map(|s| {
                let m = kinetic::moments(s);
                MomentFrame { time: s.time, rho: m.rho, upsilon1: m.upsilon1 }
            })
            .collect();
        Self { label: "kinetic".into(), frames }
    }

    pub fn from_macro(run: &MacroRun) -> Self {
        let frames = run
            .snapshots
            .iter()
            .map(|s| MomentFrame { time: s.time, rho: s.rho.clone(), upsilon1: s.upsilon1.clone() })
            .collect();
        Self { label: "macro".into(), frames }
    }

    /// Per-bin density and mean wealth of the particle markets.
    pub fn from_particles(run: &ParticleRun) -> Self {
        let frames = run
            .snapshots
            .iter()
            .map(|s| MomentFrame {
                time: s.time,
                rho: s.stats.iter().map(|b| b.rho).collect(),
                upsilon1: s.stats.iter().map(|b| b.upsilon1).collect(),
            })
            .collect();
        Self { label: "particles".into(), frames }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameNorms {
    pub t: f64,
    pub rho_l1: f64,
    pub rho_linf: f64,
    pub upsilon1_l1: f64,
    pub upsilon1_linf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub a: String,
    pub b: String,
    /// Cells of the common grid.
    pub cells: usize,
    pub frames: Vec<FrameNorms>,
}

fn same_time(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(1.0)
}

/// Norms between two frames after restriction to the coarser grid. `ρ` is
/// averaged, `Υ1` is averaged with weight `ρ`.
pub fn frame_norms(a: &MomentFrame, b: &MomentFrame) -> Result<FrameNorms> {
    let n = a.rho.len().min(b.rho.len());
    let ra = stats::restrict(&a.rho, n)?;
    let rb = stats::restrict(&b.rho, n)?;
    let ua = stats::restrict_weighted(&a.rho, &a.upsilon1, n)?;
    let ub = stats::restrict_weighted(&b.rho, &b.upsilon1, n)?;
    let w = 1.0 / n as f64;
    Ok(FrameNorms {
        t: a.time,
        rho_l1: stats::l1(&ra, &rb, w),
        rho_linf: stats::linf(&ra, &rb),
        upsilon1_l1: stats::l1(&ua, &ub, w),
        upsilon1_linf: stats::linf(&ua, &ub),
    })
}

/// Norms at every output time the two trajectories share.
pub fn compare(a: &MomentTrajectory, b: &MomentTrajectory) -> Result<PairReport> {
    let mut frames = Vec::new();
    let mut cells = 0;
    for fa in &a.frames {
        if let Some(fb) = b.frames.iter().find(|f| same_time(f.time, fa.time)) {
            frames.push(frame_norms(fa, fb)?);
            cells = fa.rho.len().min(fb.rho.len());
        }
    }
    if frames.is_empty() {
        return Err(Error::IncompatibleDomain(format!("{} and {} share no output time", a.label, b.label)));
    }
    Ok(PairReport { a: a.label.clone(), b: b.label.clone(), cells, frames })
}

/// `Σ_k |P_k − Q_k|` between the wealth marginal of a kinetic state and the
/// empirical law of `y`, on `bins` groups of consecutive wealth cells. Agents
/// outside the wealth grid count fully towards the distance.
pub fn wealth_l1(s: &KineticState, y: &[f64], bins: usize) -> Result<f64> {
    let ny = s.y.len();
    if bins == 0 || ny % bins != 0 {
        return Err(Error::IncompatibleDomain(format!("{bins} wealth bins do not tile {ny} cells")));
    }
    let r = ny / bins;
    let mut cell = vec![0.0; ny];
    for i in 0..s.x.len() {
        for (c, (f, h)) in cell.iter_mut().zip(s.slice(i).iter().zip(s.y.widths())) {
            *c += f * h;
        }
    }
    let total: f64 = cell.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InsufficientSupport("kinetic state has no mass".into()));
    }
    let edges: Vec<f64> = (0..=bins).map(|k| s.y.faces()[k * r]).collect();
    let density = particles::wealth_histogram(y, &edges)?;
    let mut inside = 0.0;
    let mut dist = 0.0;
    for k in 0..bins {
        let p: f64 = cell[k * r..(k + 1) * r].iter().sum::<f64>() / total;
        let q = density[k] * (edges[k + 1] - edges[k]);
        inside += q;
        dist += (p - q).abs();
    }
    Ok(dist + (1.0 - inside).max(0.0))
}

/// Wealth marginal `∫ f dx / M` of a kinetic state on its nodes.
pub fn kinetic_marginal(s: &KineticState) -> Vec<f64> {
    let ny = s.y.len();
    let mut g = vec![0.0; ny];
    for i in 0..s.x.len() {
        for (gj, f) in g.iter_mut().zip(s.slice(i)) {
            *gj += f * s.x.dx();
        }
    }
    let mass = s.total_mass();
    g.iter().map(|v| v / mass).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub value: f64,
    pub rho_l1: f64,
    pub upsilon1_l1: f64,
    pub wealth_l1: Option<f64>,
    /// The quantity the sweep slope is fitted to.
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    /// `epsilon` or `n_agents`.
    pub parameter: String,
    pub reference: String,
    pub entries: Vec<SweepEntry>,
    /// Consecutive error ratios.
    pub ratios: Vec<f64>,
    /// Least-squares slope of `ln error` against `ln value`.
    pub slope: Option<f64>,
    pub slope_stderr: Option<f64>,
}

impl SweepReport {
    fn new(parameter: &str, reference: &str, entries: Vec<SweepEntry>) -> Self {
        let ratios = entries.windows(2).map(|w| w[1].error / w[0].error).collect();
        let (lx, ly): (Vec<f64>, Vec<f64>) = entries
            .iter()
            .filter(|e| e.error > 0.0)
            .map(|e| (e.value.ln(), e.error.ln()))
            .unzip();
        let fit = stats::least_squares(&lx, &ly).ok();
        Self {
            parameter: parameter.into(),
            reference: reference.into(),
            entries,
            ratios,
            slope: fit.map(|f| f.slope),
            slope_stderr: fit.map(|f| f.stderr),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailReport {
    pub source: TailSource,
    pub lo: f64,
    pub hi: f64,
    pub slope: f64,
    pub stderr: f64,
    pub points: usize,
    /// `−(κ + 3)`.
    pub expected: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConservationEntry {
    /// Largest relative mass change of a single step.
    pub max_step_mass_drift: Option<f64>,
    /// Agent count at every snapshot.
    pub agent_counts: Option<Vec<usize>>,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub pairs: Vec<PairReport>,
    pub sweeps: Vec<SweepReport>,
    pub tail: Option<TailReport>,
    pub conservation: BTreeMap<String, ConservationEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scenario_echo: serde_json::Value,
    pub seed: u64,
    pub version: String,
    pub outputs: Vec<OutputEntry>,
    /// Wall-clock seconds per task.
    pub timings: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
    /// Error message of every task that failed.
    pub failures: BTreeMap<String, String>,
    /// Scalar results worth a glance, such as table gaps and residuals.
    pub diagnostics: BTreeMap<String, f64>,
}

impl Manifest {
    pub fn succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Scale(Scale),
    Compare,
    TailFit,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Scale(s) => s.name(),
            Task::Compare => "compare",
            Task::TailFit => "tail_fit",
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Runs the scales listed in the scenario, then the comparison when it has
/// something to compare and the tail fit when configured.
pub fn run_scenario(s: &Scenario, out: &Path) -> Result<Manifest> {
    let mut tasks: Vec<Task> = s.spec.scales.iter().map(|c| Task::Scale(*c)).collect();
    let dynamic = s.spec.scales.iter().filter(|c| matches!(c, Scale::Particles | Scale::Kinetic | Scale::Macro)).count();
    if dynamic >= 2 || !s.spec.compare.epsilons.is_empty() || !s.spec.compare.agents.is_empty() {
        tasks.push(Task::Compare);
    }
    if s.spec.tail_fit.is_some() {
        tasks.push(Task::TailFit);
    }
    run_tasks(s, out, &tasks)
}

/// Runs `tasks` in order, writing into `out`. Task failures are recorded in
/// the manifest; only I/O on the manifest itself is returned as an error.
pub fn run_tasks(s: &Scenario, out: &Path, tasks: &[Task]) -> Result<Manifest> {
    fs::create_dir_all(out)?;
    let echo = serde_json::to_value(&s.spec).map_err(|e| Error::Io(e.to_string()))?;
    let mut r = Runner {
        s,
        out: out.to_path_buf(),
        manifest: Manifest {
            scenario_echo: echo,
            seed: s.spec.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            outputs: Vec::new(),
            timings: BTreeMap::new(),
            warnings: Vec::new(),
            failures: BTreeMap::new(),
            diagnostics: BTreeMap::new(),
        },
        particles: None,
        kinetic: None,
        macro_run: None,
        report: ComparisonReport::default(),
        reported: false,
    };
    for task in tasks {
        r.run(*task);
    }
    if r.reported {
        let json = serde_json::to_string_pretty(&r.report).map_err(|e| Error::Io(e.to_string()))?;
        r.write_bytes("report.json", json.as_bytes())?;
    }
    let manifest = r.manifest;
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(out.join(MANIFEST), json)?;
    Ok(manifest)
}

/// Paths whose content no longer matches the hash in the manifest of `dir`.
pub fn verify_manifest(dir: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
    let mut bad = Vec::new();
    for o in &m.outputs {
        match fs::read(dir.join(&o.path)) {
            Ok(bytes) if sha256_hex(&bytes) == o.sha256 => {}
            _ => bad.push(o.path.clone()),
        }
    }
    Ok(bad)
}

struct Runner<'a> {
    s: &'a Scenario,
    out: PathBuf,
    manifest: Manifest,
    particles: Option<ParticleRun>,
    kinetic: Option<KineticRun>,
    macro_run: Option<MacroRun>,
    report: ComparisonReport,
    reported: bool,
}

impl Runner<'_> {
    fn run(&mut self, task: Task) {
        let start = Instant::now();
        let result = match task {
            Task::Scale(Scale::Equilibrium) => self.equilibrium(),
            Task::Scale(Scale::Gci) => self.gci(),
            Task::Scale(Scale::Particles) => self.particles().map(|_| ()),
            Task::Scale(Scale::Kinetic) => self.kinetic().map(|_| ()),
            Task::Scale(Scale::Macro) => self.macro_scale().map(|_| ()),
            Task::Compare => self.compare(),
            Task::TailFit => self.tail_fit(),
        };
        let name = task.name();
        *self.manifest.timings.entry(name.to_string()).or_default() += start.elapsed().as_secs_f64();
        if let Err(e) = result {
            log::error!("{name} failed: {e}");
            self.manifest.failures.insert(name.to_string(), e.to_string());
        }
    }

    fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.out.join(name), bytes)?;
        self.manifest.outputs.retain(|o| o.path != name);
        self.manifest.outputs.push(OutputEntry { path: name.to_string(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    fn write_csv<F>(&mut self, name: &str, fill: F) -> Result<()>
    where
        F: FnOnce(&mut BufWriter<Vec<u8>>) -> Result<()>,
    {
        let mut buf = BufWriter::new(Vec::new());
        fill(&mut buf)?;
        let bytes = buf.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        self.write_bytes(name, &bytes)
    }

    fn warn(&mut self, msg: String) {
        log::warn!("{msg}");
        self.manifest.warnings.push(msg);
    }

    fn conservation(&mut self, scale: &str, drift: Option<f64>, counts: Option<Vec<usize>>, ok: bool) {
        self.report
            .conservation
            .insert(scale.into(), ConservationEntry { max_step_mass_drift: drift, agent_counts: counts, ok });
    }

    fn equilibrium(&mut self) -> Result<()> {
        let spec = &self.s.spec.equilibrium;
        let p = self.s.params;
        let u1 = spec.upsilon1;
        let g = gibbs_closed_form(u1, p.kappa)?;
        let grid = self.s.spec.grid.wealth(u1)?;
        let m = MomentPair::on_manifold(u1, p.kappa)?;
        let (a, b) = (model::strategy_a(&m, &p), model::strategy_b(u1, &p));
        let numeric = gibbs_numeric(a, b, p.d, &grid)?;
        let exact = g.sample_on(&grid);
        let gap = grid.l1_distance(&exact, &numeric.values);
        self.manifest.diagnostics.insert("equilibrium.l1_gap".into(), gap);
        self.write_csv("equilibrium.csv", |w| {
            writeln!(w, "y,closed_form,numeric")?;
            for ((y, e), n) in grid.nodes().iter().zip(&exact).zip(&numeric.values) {
                writeln!(w, "{y},{e},{n}")?;
            }
            Ok(())
        })?;
        let k_max = spec.moments.iter().copied().max().unwrap_or(0);
        let rows: Vec<(usize, f64, f64)> = if k_max == 0 {
            spec.moments.iter().map(|&k| (k, 1.0, 1.0)).collect()
        } else {
            let rec = moment_recursion(a, b, p.d, k_max)?;
            spec.moments
                .iter()
                .map(|&k| Ok((k, inverse_gamma_moment(&g, k)?, if k == 0 { 1.0 } else { rec[k - 1] })))
                .collect::<Result<_>>()?
        };
        self.write_csv("equilibrium_moments.csv", |w| {
            writeln!(w, "order,closed_form,recursion")?;
            for (k, c, r) in &rows {
                writeln!(w, "{k},{c},{r}")?;
            }
            Ok(())
        })
    }

    fn gci(&mut self) -> Result<()> {
        let spec = self.s.spec.gci.clone();
        let p = self.s.params;
        let m = MomentPair::new(spec.upsilon1, spec.upsilon2)?;
        let lam = gci::lagrange_multipliers(&m, &p);
        let image = gci::gibbs_image(&m, &p)?;
        let solvability = gci::solvability_residual(&lam, &m, image);
        let chi = GciFunction::new(spec.upsilon1);
        let min_cv = 1.05 * m.variance().sqrt() / m.upsilon1();
        let mut rng = ChaCha8Rng::seed_from_u64(self.s.spec.seed);
        let templates: Vec<LogNormalMixture> = (0..spec.samples).map(|_| LogNormalMixture::random(&mut rng, min_cv)).collect();
        let mut rows = Vec::new();
        for &n in &spec.nodes {
            let grid = self.s.spec.grid.wealth_with(n, spec.upsilon1)?;
            let adjoint = gci::adjoint_residual(|y| chi.derivative(y), &lam, &m, &p, &grid)?;
            let worst = templates
                .par_iter()
                .map(|t| {
                    let f = gci::moment_matched_density(t, &m, &grid)?;
                    gci::annihilation_test(&f, &grid, &m, &p, spec.flux).map(f64::abs)
                })
                .collect::<Result<Vec<f64>>>()?
                .into_iter()
                .fold(0.0, f64::max);
            rows.push((n, adjoint, worst));
        }
        self.write_csv("gci.csv", |w| {
            writeln!(w, "nodes,adjoint_residual,annihilation_max,solvability_residual")?;
            for (n, adj, ann) in &rows {
                writeln!(w, "{n},{adj},{ann},{solvability}")?;
            }
            Ok(())
        })
    }

    fn particles(&mut self) -> Result<&ParticleRun> {
        if self.particles.is_none() {
            let cfg = self.s.particle_config();
            let sampler = self.s.spec.initial.sampler(self.s.params.kappa);
            let run = particles::run(&cfg, &self.s.params, &self.s.velocity, &sampler)?;
            if self.s.spec.particles.write_agents {
                self.write_csv("particles_agents.csv", |w| particles::write_agents_csv(w, &run))?;
            }
            self.write_csv("particles_summary.csv", |w| particles::write_summary_csv(w, &run))?;
            let ok = run.agent_counts.iter().all(|c| *c == cfg.n_agents);
            if !ok {
                self.warn(format!("particle count changed: {:?}", run.agent_counts));
            }
            self.conservation("particles", None, Some(run.agent_counts.clone()), ok);
            self.particles = Some(run);
        }
        Ok(self.particles.as_ref().expect("set above"))
    }

    fn kinetic(&mut self) -> Result<&KineticRun> {
        if self.kinetic.is_none() {
            let init = self.s.kinetic_initial()?;
            let cfg = self.s.kinetic_config()?;
            let run = kinetic::evolve(&init, &self.s.params, &self.s.velocity, &cfg)?;
            let threshold = self.s.spec.kinetic.threshold;
            self.write_csv("kinetic_field.csv", |w| kinetic::write_field_csv(w, &run.snapshots, threshold))?;
            self.write_csv("kinetic_moments.csv", |w| kinetic::write_moments_csv(w, &run.snapshots))?;
            let ok = run.max_step_mass_drift <= MASS_DRIFT_TOL;
            if !ok {
                self.warn(format!("kinetic mass drift {:e} per step", run.max_step_mass_drift));
            }
            self.manifest.diagnostics.insert("kinetic.max_step_mass_drift".into(), run.max_step_mass_drift);
            self.conservation("kinetic", Some(run.max_step_mass_drift), None, ok);
            self.kinetic = Some(run);
        }
        Ok(self.kinetic.as_ref().expect("set above"))
    }

    fn macro_scale(&mut self) -> Result<&MacroRun> {
        if self.macro_run.is_none() {
            let init = self.s.macro_initial()?;
            let cfg = self.s.macro_config(&init)?;
            let run = hydro::run(&init, &self.s.params, &self.s.velocity, &cfg)?;
            let kappa = self.s.params.kappa;
            self.write_csv("macro.csv", |w| hydro::write_csv(w, &run.snapshots, kappa))?;
            for msg in &run.warnings {
                self.manifest.warnings.push(format!("macro: {msg}"));
            }
            let ok = run.max_step_mass_drift <= MASS_DRIFT_TOL;
            if !ok {
                self.warn(format!("macro mass drift {:e} per step", run.max_step_mass_drift));
            }
            self.manifest.diagnostics.insert("macro.max_step_mass_drift".into(), run.max_step_mass_drift);
            self.conservation("macro", Some(run.max_step_mass_drift), None, ok);
            self.macro_run = Some(run);
        }
        Ok(self.macro_run.as_ref().expect("set above"))
    }

    fn compare(&mut self) -> Result<()> {
        self.reported = true;
        let mut trajectories = Vec::new();
        if let Some(r) = &self.particles {
            trajectories.push(MomentTrajectory::from_particles(r));
        }
        if let Some(r) = &self.kinetic {
            trajectories.push(MomentTrajectory::from_kinetic(r));
        }
        if let Some(r) = &self.macro_run {
            trajectories.push(MomentTrajectory::from_macro(r));
        }
        let cmp = self.s.spec.compare.clone();
        if trajectories.len() < 2 && cmp.epsilons.is_empty() && cmp.agents.is_empty() {
            return Err(Error::InvalidParameter("compare needs two dynamic scales or a sweep".into()));
        }
        let mut pairs = Vec::new();
        for i in 0..trajectories.len() {
            for j in i + 1..trajectories.len() {
                pairs.push(compare(&trajectories[i], &trajectories[j])?);
            }
        }
        if !cmp.epsilons.is_empty() {
            let sweep = self.epsilon_sweep(&cmp.epsilons)?;
            self.report.sweeps.push(sweep);
        }
        if !cmp.agents.is_empty() {
            let sweep = self.agent_sweep(&cmp.agents, cmp.wealth_bins)?;
            self.report.sweeps.push(sweep);
        }
        self.report.pairs = pairs;
        let report = self.report.clone();
        self.write_csv("compare_norms.csv", |w| {
            writeln!(w, "a,b,t,rho_l1,rho_linf,upsilon1_l1,upsilon1_linf")?;
            for p in &report.pairs {
                for f in &p.frames {
                    writeln!(w, "{},{},{},{},{},{},{}", p.a, p.b, f.t, f.rho_l1, f.rho_linf, f.upsilon1_l1, f.upsilon1_linf)?;
                }
            }
            Ok(())
        })?;
        if !report.sweeps.is_empty() {
            self.write_csv("sweep.csv", |w| {
                writeln!(w, "parameter,value,rho_l1,upsilon1_l1,wealth_l1,error")?;
                for s in &report.sweeps {
                    for e in &s.entries {
                        let wl = e.wealth_l1.map(|v| v.to_string()).unwrap_or_default();
                        writeln!(w, "{},{},{},{},{},{}", s.parameter, e.value, e.rho_l1, e.upsilon1_l1, wl, e.error)?;
                    }
                }
                Ok(())
            })?;
        }
        Ok(())
    }

    /// Terminal kinetic fields at each `ε` against the terminal macro fields;
    /// the error is the sum of the `ρ` and `Υ1` L1 norms.
    fn epsilon_sweep(&mut self, epsilons: &[f64]) -> Result<SweepReport> {
        let reference = MomentTrajectory::from_macro(self.macro_scale()?);
        let last = reference.frames.last().expect("runs keep the final time").clone();
        let s = self.s;
        let init = s.kinetic_initial()?;
        let entries = epsilons
            .par_iter()
            .map(|&eps| {
                let se = s.with_epsilon(eps)?;
                let run = kinetic::evolve(&init, &se.params, &se.velocity, &se.kinetic_config()?)?;
                let traj = MomentTrajectory::from_kinetic(&run);
                let n = frame_norms(traj.frames.last().expect("runs keep the final time"), &last)?;
                Ok(SweepEntry {
                    value: eps,
                    rho_l1: n.rho_l1,
                    upsilon1_l1: n.upsilon1_l1,
                    wealth_l1: None,
                    error: n.rho_l1 + n.upsilon1_l1,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SweepReport::new("epsilon", "macro", entries))
    }

    /// Terminal particle ensembles of each size against the terminal kinetic
    /// state; the error is the wealth histogram distance.
    fn agent_sweep(&mut self, agents: &[usize], bins: usize) -> Result<SweepReport> {
        let reference = self.kinetic()?.snapshots.last().expect("runs keep the final time").clone();
        let ref_frame = MomentTrajectory::from_kinetic(self.kinetic.as_ref().expect("run above"))
            .frames
            .pop()
            .expect("runs keep the final time");
        let s = self.s;
        let sampler = s.spec.initial.sampler(s.params.kappa);
        let entries = agents
            .iter()
            .map(|&n| {
                let mut cfg = s.particle_config();
                cfg.n_agents = n;
                let run = particles::run(&cfg, &s.params, &s.velocity, &sampler)?;
                let snap = run.snapshots.last().expect("runs keep the final time");
                let traj = MomentTrajectory::from_particles(&run);
                let norms = frame_norms(traj.frames.last().expect("runs keep the final time"), &ref_frame)?;
                let wl = wealth_l1(&reference, &snap.ensemble.y, bins)?;
                Ok(SweepEntry { value: n as f64, rho_l1: norms.rho_l1, upsilon1_l1: norms.upsilon1_l1, wealth_l1: Some(wl), error: wl })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SweepReport::new("n_agents", "kinetic", entries))
    }

    fn tail_fit(&mut self) -> Result<()> {
        self.reported = true;
        let spec = self.s.spec.tail_fit.clone().ok_or_else(|| Error::InvalidParameter("scenario has no [tail_fit] section".into()))?;
        let (y, density) = match spec.source {
            TailSource::Equilibrium => {
                let u1 = self.s.spec.equilibrium.upsilon1;
                let grid = self.s.spec.grid.wealth(u1)?;
                let g = gibbs_closed_form(u1, self.s.params.kappa)?;
                (grid.nodes().to_vec(), g.sample_on(&grid))
            }
            TailSource::Kinetic => {
                let s = self.kinetic()?.snapshots.last().expect("runs keep the final time");
                (s.y.nodes().to_vec(), kinetic_marginal(s))
            }
            TailSource::Particles => {
                let unit = self.s.wealth_unit();
                let g = &self.s.spec.grid;
                let (lo, hi) = (g.y_min * unit, g.y_max * unit);
                let per_decade = 20.0;
                let n = ((hi / lo).log10() * per_decade).ceil() as usize;
                let edges = particles::log_edges(lo, hi, n);
                let run = self.particles()?;
                let y = &run.snapshots.last().expect("runs keep the final time").ensemble.y;
                let density = particles::wealth_histogram(y, &edges)?;
                (edges.windows(2).map(|w| (w[0] * w[1]).sqrt()).collect(), density)
            }
        };
        self.write_csv("tail_density.csv", |w| {
            writeln!(w, "y,density")?;
            for (a, b) in y.iter().zip(&density) {
                writeln!(w, "{a},{b}")?;
            }
            Ok(())
        })?;
        let fit: LinearFit = stats::tail_fit(&y, &density, spec.lo, spec.hi)?;
        let report = TailReport {
            source: spec.source,
            lo: spec.lo,
            hi: spec.hi,
            slope: fit.slope,
            stderr: fit.stderr,
            points: fit.points,
            expected: -(self.s.params.kappa + 3.0),
        };
        self.write_csv("tail_fit.csv", |w| {
            writeln!(w, "source,lo,hi,slope,stderr,points,expected")?;
            let src = serde_json::to_value(report.source).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            writeln!(w, "{src},{},{},{},{},{},{}", report.lo, report.hi, report.slope, report.stderr, report.points, report.expected)?;
            Ok(())
        })?;
        self.report.tail = Some(report);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[params]\nd = 1.0\nkappa = 1.0\nepsilon = 0.5\n";

    #[test]
    fn minimal_file_gets_documented_defaults() {
        let s = parse_scenario_str(MINIMAL).unwrap();
        assert_eq!(s.spec.grid, GridSpec { nx: 64, ny: 400, y_min: 1e-3, y_max: 1e3 });
        assert_eq!(s.spec.scales, vec![Scale::Equilibrium]);
        assert!(s.velocity.is_zero());
        assert_eq!(s.spec.initial.wealth, WealthSpec::Gibbs { upsilon1: 1.0 });
    }

    #[test]
    fn physical_parameters_are_required() {
        let err = parse_scenario_str("[params]\nd = 1.0\nkappa = 1.0\n").unwrap_err();
        assert!(matches!(&err, Error::Parse(m) if m.contains("epsilon")), "{err}");
    }

    #[test]
    fn negative_kappa_is_reported_with_every_other_violation() {
        let text = "[params]\nd = 1.0\nkappa = -1.0\nepsilon = 0.5\n[grid]\nny = 2\n";
        match parse_scenario_str(text).unwrap_err() {
            Error::Validation(v) => {
                assert!(v.iter().any(|m| m.contains("kappa must be positive")), "{v:?}");
                assert!(v.iter().any(|m| m.contains("grid.ny")), "{v:?}");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn misspelt_keys_get_a_suggestion() {
        let err = parse_scenario_str("[params]\nd = 1.0\nkapa = 1.0\nepsilon = 0.5\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("kapa") && msg.contains("did you mean `kappa`"), "{msg}");
        assert!(msg.contains("line"), "{msg}");
        let err = parse_scenario_str(&format!("{MINIMAL}[velocity]\nphi = \"sinus\"\n")).unwrap_err();
        assert!(err.to_string().contains("did you mean `sine`"), "{err}");
        let err = parse_scenario_str(&format!("{MINIMAL}[initial.wealth]\nlaw = \"gibbs\"\nupsilon = 1.0\n")).unwrap_err();
        assert!(err.to_string().contains("did you mean `upsilon1`"), "{err}");
    }

    #[test]
    fn uniform_step_divides_the_horizon() {
        assert_eq!(uniform_step(0.3, 1.0), 0.25);
        assert_eq!(uniform_step(2.0, 1.0), 1.0);
        assert_eq!(uniform_step(f64::INFINITY, 0.0), 1.0);
    }

    #[test]
    fn identical_trajectories_have_zero_norms() {
        let f = MomentFrame { time: 1.0, rho: vec![1.0, 2.0, 3.0, 4.0], upsilon1: vec![0.5, 1.0, 1.5, 2.0] };
        let t = MomentTrajectory { label: "a".into(), frames: vec![f] };
        let r = compare(&t, &t).unwrap();
        let n = &r.frames[0];
        assert_eq!((n.rho_l1, n.rho_linf, n.upsilon1_l1, n.upsilon1_linf), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn comparison_restricts_to_the_coarse_grid() {
        let fine = MomentFrame { time: 0.0, rho: vec![1.0, 3.0, 2.0, 2.0], upsilon1: vec![2.0, 4.0, 1.0, 1.0] };
        let coarse = MomentFrame { time: 0.0, rho: vec![2.0, 2.0], upsilon1: vec![3.5, 1.0] };
        let a = MomentTrajectory { label: "fine".into(), frames: vec![fine.clone()] };
        let b = MomentTrajectory { label: "coarse".into(), frames: vec![coarse] };
        let r = compare(&a, &b).unwrap();
        assert_eq!(r.cells, 2);
        assert!(r.frames[0].rho_l1 == 0.0 && r.frames[0].upsilon1_linf < 1e-15);
        let odd = MomentTrajectory { label: "odd".into(), frames: vec![MomentFrame { time: 0.0, rho: vec![1.0; 3], upsilon1: vec![1.0; 3] }] };
        assert!(matches!(compare(&a, &odd), Err(Error::IncompatibleDomain(_))));
        let later = MomentTrajectory { label: "later".into(), frames: vec![MomentFrame { time: 2.0, ..fine }] };
        assert!(matches!(compare(&a, &later), Err(Error::IncompatibleDomain(_))));
    }

    #[test]
    fn sweep_slope_recovers_a_power_law() {
        let entries = [1e4, 4e4, 1.6e5]
            .iter()
            .map(|&n: &f64| SweepEntry { value: n, rho_l1: 0.0, upsilon1_l1: 0.0, wealth_l1: None, error: 3.0 / n.sqrt() })
            .collect();
        let s = SweepReport::new("n_agents", "kinetic", entries);
        assert!((s.slope.unwrap() + 0.5).abs() < 1e-12);
        assert!(s.ratios.iter().all(|r| (r - 0.5).abs() < 1e-12));
    }

    #[test]
    fn kinetic_and_macro_initial_data_agree() {
        let text = format!(
            "{MINIMAL}[grid]\nnx = 8\nny = 400\ny_max = 1e7\n[initial]\nrho = {{ amplitude = 0.5, mode = 2 }}\nmean = {{ amplitude = 0.3, mode = 2 }}\n"
        );
        let s = parse_scenario_str(&text).unwrap();
        let k = s.kinetic_initial().unwrap();
        let m = s.macro_initial().unwrap();
        let km = kinetic::moments(&k);
        for i in 0..8 {
            assert!((km.rho[i] - m.rho[i]).abs() < 1e-12);
            assert!((km.upsilon1[i] / m.upsilon1[i] - 1.0).abs() < 1e-4, "{} {}", km.upsilon1[i], m.upsilon1[i]);
        }
    }
}
