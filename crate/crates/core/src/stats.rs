//! Regression, norms and grid restriction for cross-scale comparisons.

use crate::error::{Error, Result};

/// Minimum number of points for a tail fit.
pub const MIN_TAIL_POINTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope.
    pub stderr: f64,
    pub points: usize,
}

/// Ordinary least squares `y ≈ slope·x + intercept`.
pub fn least_squares(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    let n = x.len();
    if n != y.len() || n < 2 {
        return Err(Error::InsufficientSupport(format!("least squares needs two or more paired points (got {n})")));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientSupport("abscissae are all equal".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let stderr = if n > 2 {
        let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
        (sse / (nf - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(LinearFit { slope, intercept, stderr, points: n })
}

/// Slope of `ln f` against `ln y` over `[lo, hi]`.
///
/// Rows outside the window or with nonpositive density are skipped. A window
/// below the tail is accepted and simply yields a slope unrelated to the
/// tail exponent.
pub fn tail_fit(y: &[f64], density: &[f64], lo: f64, hi: f64) -> Result<LinearFit> {
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::InvalidParameter(format!("tail window [{lo}, {hi}] must be positive and nonempty")));
    }
    if y.len() != density.len() {
        return Err(Error::InvalidParameter("wealth and density columns differ in length".into()));
    }
    let (lx, ly): (Vec<f64>, Vec<f64>) = y
        .iter()
        .zip(density)
        .filter(|(v, f)| **v >= lo && **v <= hi && **f > 0.0)
        .map(|(v, f)| (v.ln(), f.ln()))
        .unzip();
    if lx.len() < MIN_TAIL_POINTS {
        return Err(Error::InsufficientSupport(format!(
            "tail window [{lo}, {hi}] holds {} usable points, at least {MIN_TAIL_POINTS} needed",
            lx.len()
        )));
    }
    least_squares(&lx, &ly)
}

/// `Σ |a − b| · w` with uniform weight `w`.
pub fn l1(a: &[f64], b: &[f64], w: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() * w
}

pub fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Cell averages of a uniform fine field on a coarser uniform grid.
///
/// The fine cell count must be a multiple of the coarse one, which keeps the
/// restriction conservative: `Σ coarse · H = Σ fine · h`.
pub fn restrict(fine: &[f64], n_coarse: usize) -> Result<Vec<f64>> {
    if n_coarse == 0 || fine.len() % n_coarse != 0 {
        return Err(Error::IncompatibleDomain(format!(
            "cannot restrict {} cells onto {n_coarse}",
            fine.len()
        )));
    }
    let r = fine.len() / n_coarse;
    Ok(fine.chunks(r).map(|c| c.iter().sum::<f64>() / r as f64).collect())
}

/// Density-weighted restriction of a per-agent quantity `q`: returns the
/// coarse averages of `ρ q` divided by the coarse `ρ`, zero where `ρ` vanishes.
pub fn restrict_weighted(rho: &[f64], q: &[f64], n_coarse: usize) -> Result<Vec<f64>> {
    let rq: Vec<f64> = rho.iter().zip(q).map(|(a, b)| a * b).collect();
    let num = restrict(&rq, n_coarse)?;
    let den = restrict(rho, n_coarse)?;
    Ok(num.iter().zip(&den).map(|(a, b)| if *b > 0.0 { a / b } else { 0.0 }).collect())
}
