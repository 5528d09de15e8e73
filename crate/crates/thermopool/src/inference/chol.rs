//! Cholesky factors of correlation matrices: the unconstrained transform,
//! its Jacobian, the LKJ density, and gradient chaining.
//!
//! A correlation Cholesky factor `L` (lower triangular, unit-norm rows,
//! positive diagonal) is parameterized by one unconstrained value per
//! strict-lower-triangle entry via canonical partial correlations:
//! `t[i][j] = tanh(y[i][j])`, filled row by row,
//!
//! ```text
//! L[i][j] = t[i][j] * sqrt(1 - sum_{j' < j} L[i][j']^2)
//! L[i][i] = sqrt(1 - sum_{j < i} L[i][j]^2)
//! ```
//!
//! Strict-lower entries are stored row-major: index of (i, j) with j < i is
//! `i*(i-1)/2 + j`.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CholError {
    #[error("invalid correlation Cholesky factor: {0}")]
    InvalidCholesky(String),
}

/// Number of strict-lower-triangle entries for dimension `m`.
pub fn n_lower(m: usize) -> usize {
    m * (m - 1) / 2
}

pub fn lower_index(i: usize, j: usize) -> usize {
    debug_assert!(j < i);
    i * (i - 1) / 2 + j
}

/// The filled factor plus the intermediates gradients need.
#[derive(Debug, Clone)]
pub struct CholFactor {
    pub m: usize,
    /// Row-major m*m; upper triangle is zero.
    pub l: Vec<f64>,
    /// tanh values per strict-lower entry.
    pub t: Vec<f64>,
    /// sech^2 = 1 - t^2 per strict-lower entry, computed stably.
    pub sech2: Vec<f64>,
    /// sqrt of the remaining squared row norm before filling each entry.
    pub w: Vec<f64>,
    /// log |d L_lower / d y|.
    pub log_jacobian: f64,
}

/// log(1 - tanh(y)^2) without cancellation for large |y|.
fn ln_sech2(y: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - y.abs() - (-2.0 * y.abs()).exp().ln_1p())
}

/// Builds the factor from unconstrained values (length `n_lower(m)`).
pub fn chol_from_unconstrained(y: &[f64], m: usize) -> CholFactor {
    assert_eq!(y.len(), n_lower(m));
    let mut l = vec![0.0; m * m];
    let mut t = vec![0.0; y.len()];
    let mut sech2 = vec![0.0; y.len()];
    let mut w = vec![0.0; y.len()];
    let mut log_jacobian = 0.0;
    if m > 0 {
        l[0] = 1.0;
    }
    for i in 1..m {
        let mut rem = 1.0f64;
        let mut log_rem = 0.0f64;
        for j in 0..i {
            let idx = lower_index(i, j);
            let ti = y[idx].tanh();
            let ls = ln_sech2(y[idx]);
            let si = ls.exp();
            let wi = rem.max(0.0).sqrt();
            l[i * m + j] = ti * wi;
            t[idx] = ti;
            sech2[idx] = si;
            w[idx] = wi;
            log_jacobian += 0.5 * log_rem + ls;
            rem *= si;
            log_rem += ls;
        }
        l[i * m + i] = rem.max(0.0).sqrt();
    }
    CholFactor {
        m,
        l,
        t,
        sech2,
        w,
        log_jacobian,
    }
}

/// Inverse of [`chol_from_unconstrained`] given the strict-lower entries of a
/// valid factor.
pub fn unconstrained_from_lower(lower: &[f64], m: usize) -> Vec<f64> {
    assert_eq!(lower.len(), n_lower(m));
    let mut y = vec![0.0; lower.len()];
    for i in 1..m {
        // Mirror the forward recursion's multiplicative remainder update;
        // the subtractive form `rem -= L^2` cancels badly when rem is small.
        let mut rem = 1.0f64;
        for j in 0..i {
            let idx = lower_index(i, j);
            let t = lower[idx] / rem.max(0.0).sqrt();
            y[idx] = t.atanh();
            rem *= ln_sech2(y[idx]).exp();
        }
    }
    y
}

/// Unnormalized LKJ log density on correlation Cholesky factors:
/// `sum over rows k = 2..=m of (m - k + 2*eta - 2) * ln L[k][k]` (1-indexed).
/// The normalizing constant is omitted throughout the crate.
pub fn lkj_cholesky_logdensity_factor(fac: &CholFactor, eta: f64) -> f64 {
    let m = fac.m;
    let mut lp = 0.0;
    for i in 1..m {
        let exponent = (m - (i + 1)) as f64 + 2.0 * eta - 2.0;
        lp += exponent * fac.l[i * m + i].ln();
    }
    lp
}

/// Validating entry point over a row-major lower-triangular matrix.
pub fn lkj_cholesky_logdensity(l: &[f64], m: usize, eta: f64) -> Result<f64, CholError> {
    if l.len() != m * m {
        return Err(CholError::InvalidCholesky(format!(
            "expected {}x{m} matrix",
            m
        )));
    }
    for i in 0..m {
        for j in (i + 1)..m {
            if l[i * m + j] != 0.0 {
                return Err(CholError::InvalidCholesky(
                    "upper triangle must be zero".into(),
                ));
            }
        }
        if l[i * m + i] <= 0.0 {
            return Err(CholError::InvalidCholesky(
                "diagonal must be positive".into(),
            ));
        }
        let norm: f64 = (0..=i).map(|j| l[i * m + j] * l[i * m + j]).sum();
        if (norm - 1.0).abs() > 1e-8 {
            return Err(CholError::InvalidCholesky(format!(
                "row {i} has norm {norm}, expected 1"
            )));
        }
    }
    let mut lp = 0.0;
    for i in 1..m {
        let exponent = (m - (i + 1)) as f64 + 2.0 * eta - 2.0;
        lp += exponent * l[i * m + i].ln();
    }
    Ok(lp)
}

/// Chains a gradient with respect to the filled entries of `L` (strict lower
/// plus diagonal, row-major m*m in `dl`) back to the unconstrained values,
/// adding the gradient of the transform's own log-Jacobian.
pub fn chain_grad_to_unconstrained(fac: &CholFactor, dl: &[f64]) -> Vec<f64> {
    let m = fac.m;
    let mut dy = vec![0.0; n_lower(m)];
    for i in 1..m {
        for n in 0..i {
            let idx = lower_index(i, n);
            let t = fac.t[idx];
            let s = fac.sech2[idx];
            let wv = fac.w[idx];
            // Entries at columns j > n (including the diagonal) all scale by
            // sqrt(1 - t^2); their derivative w.r.t. y is -t * L[i][j].
            let mut tail = 0.0;
            for j in (n + 1)..=i {
                tail += dl[i * m + j] * fac.l[i * m + j];
            }
            dy[idx] = s * dl[i * m + n] * wv - t * tail - t * (i + 1 - n) as f64;
        }
    }
    dy
}
