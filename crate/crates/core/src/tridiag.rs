use crate::error::{Error, Result};

/// Solves a tridiagonal system with the Thomas algorithm.
///
/// Row `i` reads `sub[i]·u[i−1] + diag[i]·u[i] + sup[i]·u[i+1] = rhs[i]`;
/// `sub[0]` and `sup[n−1]` are ignored. No pivoting, so the matrix should be
/// diagonally dominant (row- or column-wise).
pub fn solve(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    if sub.len() != n || sup.len() != n || rhs.len() != n {
        return Err(Error::SingularSystem("tridiagonal bands have inconsistent lengths".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut c = vec![0.0; n];
    let mut u = vec![0.0; n];
    let mut beta = diag[0];
    if beta == 0.0 || !beta.is_finite() {
        return Err(Error::SingularSystem("zero pivot in row 0".into()));
    }
    u[0] = rhs[0] / beta;
    for i in 1..n {
        c[i] = sup[i - 1] / beta;
        beta = diag[i] - sub[i] * c[i];
        if beta == 0.0 || !beta.is_finite() {
            return Err(Error::SingularSystem(format!("zero pivot in row {i}")));
        }
        u[i] = (rhs[i] - sub[i] * u[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        let next = u[i + 1];
        u[i] -= c[i + 1] * next;
    }
    Ok(u)
}
