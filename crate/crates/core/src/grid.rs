//! Discretisations of the wealth half-line and the configuration interval.

use crate::error::{Error, Result};

/// Finite-volume grid on `[y_min, y_max]` with log-uniform cell faces.
///
/// Nodes sit at the geometric centres of the cells and quadratures use the
/// cell widths, `∫ v dy ≈ Σ v_i h_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct WealthGrid {
    nodes: Vec<f64>,
    widths: Vec<f64>,
    faces: Vec<f64>,
}

impl WealthGrid {
    pub fn log_spaced(n: usize, y_min: f64, y_max: f64) -> Result<Self> {
        if n < 3 {
            return Err(Error::InvalidParameter(format!("wealth grid needs at least 3 nodes (got {n})")));
        }
        if !(y_min > 0.0 && y_max > y_min && y_max.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "wealth grid needs 0 < y_min < y_max (got {y_min}, {y_max})"
            )));
        }
        let (l0, l1) = (y_min.ln(), y_max.ln());
        let step = (l1 - l0) / n as f64;
        let mut faces: Vec<f64> = (0..=n).map(|i| (l0 + step * i as f64).exp()).collect();
        faces[0] = y_min;
        faces[n] = y_max;
        let nodes = faces.windows(2).map(|w| (w[0] * w[1]).sqrt()).collect();
        let widths = faces.windows(2).map(|w| w[1] - w[0]).collect();
        Ok(Self { nodes, widths, faces })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    pub fn faces(&self) -> &[f64] {
        &self.faces
    }

    pub fn y_min(&self) -> f64 {
        self.faces[0]
    }

    pub fn y_max(&self) -> f64 {
        self.faces[self.faces.len() - 1]
    }

    /// Log spacing of the faces.
    pub fn log_step(&self) -> f64 {
        (self.y_max() / self.y_min()).ln() / self.len() as f64
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        values.iter().zip(&self.widths).map(|(v, h)| v * h).sum()
    }

    /// `Σ y_i^k v_i h_i`.
    pub fn moment(&self, values: &[f64], k: i32) -> f64 {
        values
            .iter()
            .zip(self.nodes.iter().zip(&self.widths))
            .map(|(v, (y, h))| v * y.powi(k) * h)
            .sum()
    }

    /// `(M0, M1, M2)` in one pass.
    pub fn moments012(&self, values: &[f64]) -> [f64; 3] {
        let mut m = [0.0; 3];
        for ((v, y), h) in values.iter().zip(&self.nodes).zip(&self.widths) {
            let w = v * h;
            m[0] += w;
            m[1] += w * y;
            m[2] += w * y * y;
        }
        m
    }

    /// `Σ |u_i − v_i| h_i`.
    pub fn l1_distance(&self, u: &[f64], v: &[f64]) -> f64 {
        u.iter().zip(v).zip(&self.widths).map(|((a, b), h)| (a - b).abs() * h).sum()
    }
}

/// Uniform cells on the configuration interval `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct XGrid {
    n: usize,
}

impl XGrid {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("configuration grid needs at least one cell".into()));
        }
        Ok(Self { n })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dx(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) / self.n as f64
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.center(i)).collect()
    }

    /// Position of face `i`, `0 ≤ i ≤ n`.
    pub fn face(&self, i: usize) -> f64 {
        i as f64 / self.n as f64
    }

    /// Cell containing `x`, with `x = 1` assigned to the last cell.
    pub fn locate(&self, x: f64) -> usize {
        ((x * self.n as f64).floor().max(0.0) as usize).min(self.n - 1)
    }
}
