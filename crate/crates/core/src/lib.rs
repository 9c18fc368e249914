//! Multiscale simulation of a mean-field wealth model.
//!
//! Agents trade with a market whose coefficients depend on the first two
//! wealth moments. The same dynamics is available at three levels:
//!
//! * [`particles`]: N interacting agents driven by a geometric Brownian noise,
//! * [`kinetic`]: the Fokker-Planck equation for the agent density `f(x, y, t)`,
//! * [`hydro`]: the closed system for the agent density `ρ(x, t)` and mean wealth `Υ1(x, t)`.
//!
//! [`equilibrium`] and [`gci`] hold the analytic objects the three levels are
//! checked against, and [`harness`] ties everything to scenario files.

pub mod error;
pub mod model;
pub mod grid;
pub mod quad;
pub mod tridiag;
pub mod fokker_planck;
pub mod equilibrium;
pub mod gci;
pub mod particles;
pub mod kinetic;
pub mod hydro;
pub mod stats;
pub mod harness;

pub use error::{Error, Result};
pub use model::{ModelParams, MomentPair, VelocityField};
