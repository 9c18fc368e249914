//! Model constants, the risk-averse trading strategy and the velocity catalog.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Relative variance below which a moment pair is treated as degenerate.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Physical constants of the scaled model.
///
/// `d` is the volatility rate (the SDE noise amplitude is `sqrt(2d)`), `kappa`
/// the target inverse risk level and `epsilon` the ratio between the trading
/// time scale and the time scale of motion in configuration space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    pub d: f64,
    pub kappa: f64,
    pub epsilon: f64,
}

impl ModelParams {
    pub fn new(d: f64, kappa: f64, epsilon: f64) -> Result<Self> {
        let p = Self { d, kappa, epsilon };
        let v = p.violations();
        if v.is_empty() {
            Ok(p)
        } else {
            Err(Error::InvalidParameter(v.join("; ")))
        }
    }

    /// Every broken invariant, in declaration order.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.d > 0.0 && self.d.is_finite()) {
            v.push(format!("d must be positive (got {})", self.d));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            v.push(format!(
                "kappa must be positive for the equilibrium variance to be finite (got {})",
                self.kappa
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            v.push(format!("epsilon must be positive (got {})", self.epsilon));
        }
        v
    }
}

/// First and second wealth moments with strictly positive variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentPair {
    upsilon1: f64,
    upsilon2: f64,
}

impl MomentPair {
    pub fn new(upsilon1: f64, upsilon2: f64) -> Result<Self> {
        if !(upsilon1 > 0.0 && upsilon1.is_finite() && upsilon2.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "moments must be finite with upsilon1 > 0 (got {upsilon1}, {upsilon2})"
            )));
        }
        if (upsilon2 - upsilon1 * upsilon1) / (upsilon1 * upsilon1) < VARIANCE_FLOOR {
            return Err(Error::DegenerateVariance { upsilon1, upsilon2 });
        }
        Ok(Self { upsilon1, upsilon2 })
    }

    /// The point of the constitutive manifold with mean `upsilon1`.
    pub fn on_manifold(upsilon1: f64, kappa: f64) -> Result<Self> {
        Self::new(upsilon1, manifold_upsilon2(upsilon1, kappa))
    }

    pub fn upsilon1(&self) -> f64 {
        self.upsilon1
    }

    pub fn upsilon2(&self) -> f64 {
        self.upsilon2
    }

    pub fn variance(&self) -> f64 {
        self.upsilon2 - self.upsilon1 * self.upsilon1
    }

    /// `(Υ2 − Υ1²)/Υ1²`, equal to `1/κ` at equilibrium.
    pub fn variation(&self) -> f64 {
        self.variance() / (self.upsilon1 * self.upsilon1)
    }
}

/// `Υ2 = (1+κ)/κ·Υ1²`.
pub fn manifold_upsilon2(upsilon1: f64, kappa: f64) -> f64 {
    (1.0 + kappa) / kappa * upsilon1 * upsilon1
}

/// Trading frequency `a = d·Υ2/(Υ2 − Υ1²)`.
pub fn strategy_a(m: &MomentPair, p: &ModelParams) -> f64 {
    p.d * m.upsilon2 / m.variance()
}

/// Linear coefficient `b = −(1+κ)·d·Υ1`.
pub fn strategy_b(upsilon1: f64, p: &ModelParams) -> f64 {
    -(1.0 + p.kappa) * p.d * upsilon1
}

/// Quadratic cost `Φ(y) = ½a(y + b/a)²` of an agent holding wealth `y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostFunction {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl CostFunction {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0) {
            return Err(Error::InvalidParameter(format!("trading frequency must be positive (got {a})")));
        }
        Ok(Self { a, b, c: b * b / (2.0 * a) })
    }

    pub fn risk_averse(m: &MomentPair, p: &ModelParams) -> Self {
        let a = strategy_a(m, p);
        let b = strategy_b(m.upsilon1, p);
        Self { a, b, c: b * b / (2.0 * a) }
    }

    /// `½a·y² + b·y + c`, which is `½a(y + b/a)²` for the chosen `c`.
    pub fn eval(&self, y: f64) -> f64 {
        0.5 * self.a * y * y + self.b * y + self.c
    }

    /// `−Φ′(y)`.
    pub fn drift(&self, y: f64) -> f64 {
        -(self.a * y + self.b)
    }
}

pub fn best_reply_drift(y: f64, m: &MomentPair, p: &ModelParams) -> f64 {
    CostFunction::risk_averse(m, p).drift(y)
}

pub fn cost_eval(y: f64, m: &MomentPair, p: &ModelParams) -> f64 {
    let c = CostFunction::risk_averse(m, p);
    let s = y + c.b / c.a;
    0.5 * c.a * s * s
}

/// Configuration factor `φ(x)` of the velocity field on `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConfigProfile {
    Zero,
    /// `sin(πx)`.
    SineBump,
    /// `(1 − r²)²` with `r = (x − center)/width`, zero outside `|r| < 1`.
    CompactBump { center: f64, width: f64 },
}

/// Wealth factor `ψ(y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WealthProfile {
    One,
    /// `y/(1 + y)`.
    Saturating,
}

/// Separable velocity `V(x, y) = v0·φ(x)·ψ(y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocityField {
    pub phi: ConfigProfile,
    pub psi: WealthProfile,
    pub v0: f64,
}

impl VelocityField {
    pub fn zero() -> Self {
        Self { phi: ConfigProfile::Zero, psi: WealthProfile::One, v0: 0.0 }
    }

    pub fn sine(v0: f64, psi: WealthProfile) -> Self {
        Self { phi: ConfigProfile::SineBump, psi, v0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.v0.is_finite() {
            return Err(Error::InvalidParameter("velocity amplitude must be finite".into()));
        }
        if let ConfigProfile::CompactBump { center, width } = self.phi {
            if !(width > 0.0 && center - width >= 0.0 && center + width <= 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "compact bump support [{}, {}] must lie inside [0, 1]",
                    center - width,
                    center + width
                )));
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.v0 == 0.0 || self.phi == ConfigProfile::Zero
    }

    /// `v0·φ(x)`; no domain check, callers stay inside `[0, 1]`.
    pub fn phi(&self, x: f64) -> f64 {
        let shape = match self.phi {
            ConfigProfile::Zero => 0.0,
            ConfigProfile::SineBump => {
                if x <= 0.0 || x >= 1.0 {
                    0.0
                } else {
                    (PI * x).sin()
                }
            }
            ConfigProfile::CompactBump { center, width } => {
                let r = (x - center) / width;
                if r.abs() >= 1.0 {
                    0.0
                } else {
                    let s = 1.0 - r * r;
                    s * s
                }
            }
        };
        self.v0 * shape
    }

    pub fn psi(&self, y: f64) -> f64 {
        match self.psi {
            WealthProfile::One => 1.0,
            WealthProfile::Saturating => y / (1.0 + y),
        }
    }

    /// Upper bound of `|ψ|` on `[0, ∞)`.
    pub fn psi_sup(&self) -> f64 {
        1.0
    }

    pub fn max_speed(&self) -> f64 {
        self.v0.abs() * self.psi_sup()
    }
}

pub fn velocity_eval(v: &VelocityField, x: f64, y: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::OutOfDomain(x));
    }
    Ok(v.phi(x) * v.psi(y))
}
