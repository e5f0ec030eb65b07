//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Default diagonal inflation applied to Gram matrices.
pub const DEFAULT_JITTER: f64 = 1e-6;

/// Largest jitter tried before giving up.
pub const MAX_JITTER: f64 = 1e-2;

/// Cholesky factor of `m + jitter * I` together with the jitter that was
/// actually needed.
pub struct JitteredCholesky {
    pub chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

/// Factorizes `m + jitter * I`, escalating the jitter by ×10 up to
/// [`MAX_JITTER`] when the factorization fails.
///
/// A zero starting jitter is tried once as-is and then escalated from
/// [`DEFAULT_JITTER`].
pub fn cholesky_with_jitter(m: &DMatrix<f64>, jitter: f64) -> Result<JitteredCholesky> {
    let mut j = jitter.max(0.0);
    loop {
        let mut a = m.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += j;
        }
        if a.iter().all(|v| v.is_finite()) {
            if let Some(chol) = Cholesky::new(a) {
                if chol.l().diagonal().iter().all(|d| *d > 0.0 && d.is_finite()) {
                    return Ok(JitteredCholesky { chol, jitter: j });
                }
            }
        }
        if j >= MAX_JITTER {
            return Err(Error::Conditioning { jitter: j });
        }
        j = if j == 0.0 {
            DEFAULT_JITTER
        } else {
            (j * 10.0).min(MAX_JITTER)
        };
    }
}

/// Factorizes a matrix that must already be positive definite.
pub fn cholesky(m: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m).ok_or(Error::Conditioning { jitter: 0.0 })
}

/// `log |A|` from a Cholesky factor of `A`.
pub fn chol_logdet(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Solves `L x = b` for the lower-triangular Cholesky factor.
pub fn solve_lower(chol: &Cholesky<f64, Dyn>, b: &DVector<f64>) -> DVector<f64> {
    chol.l_dirty()
        .solve_lower_triangular(b)
        .expect("cholesky factor has a positive diagonal")
}

pub fn sup_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Symmetrizes in place by averaging with the transpose.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// `½ log |I + δ C|`, the covariance-complexity (regret) term for a Gram
/// matrix `C`.
pub fn regret_term(c: &DMatrix<f64>, delta: f64) -> Result<f64> {
    if c.nrows() != c.ncols() {
        return Err(Error::Dimension(format!(
            "regret term needs a square matrix, got {}x{}",
            c.nrows(),
            c.ncols()
        )));
    }
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "regret delta must be a non-negative finite number, got {delta}"
        )));
    }
    let n = c.nrows();
    let a = DMatrix::identity(n, n) + c * delta;
    Ok(0.5 * chol_logdet(&cholesky(a)?))
}
