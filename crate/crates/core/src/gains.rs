//! Least-squares estimation of the path gains from the structured models.

use nalgebra::{DMatrix, DVector};

use crate::channel::C64;
use crate::error::{JlboError, Result};
use crate::linalg::pinv_solve;

#[derive(Debug, Clone, PartialEq)]
pub struct LsSolution {
    pub estimate: DVector<C64>,
    pub residual_norm: f64,
    pub rank_used: usize,
    /// `sigma_max / sigma_min` over the retained singular values.
    pub condition_estimate: f64,
}

/// Minimum-norm least-squares solution of `y = A x` by truncated SVD.
pub fn ls_estimate(y: &DVector<C64>, a: &DMatrix<C64>) -> Result<LsSolution> {
    if a.is_empty() {
        return Err(JlboError::Dimension("empty design matrix".into()));
    }
    if a.nrows() != y.len() {
        return Err(JlboError::Dimension(format!(
            "design has {} rows, observation has {}",
            a.nrows(),
            y.len()
        )));
    }
    if a.nrows() < a.ncols() {
        return Err(JlboError::Dimension(format!(
            "fewer observations ({}) than unknown gains ({})",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().chain(y.iter()).any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(JlboError::NonFinite("least-squares input".into()));
    }
    let sol = pinv_solve(a, y)?;
    let residual_norm = (y - a * &sol.x).norm();
    let condition_estimate = if sol.rank > 0 { sol.sigma_max / sol.sigma_min_kept } else { f64::INFINITY };
    Ok(LsSolution {
        estimate: sol.x,
        residual_norm,
        rank_used: sol.rank,
        condition_estimate,
    })
}

/// Observation used for the `g` step after `h` has been estimated. The
/// estimate of `h` enters through `Lambda`, so the signal passes through.
pub fn update_residual_signal(y: &DVector<C64>, gamma: &DMatrix<C64>, h_hat: &DVector<C64>) -> Result<DVector<C64>> {
    if gamma.nrows() != y.len() || gamma.ncols() != h_hat.len() {
        return Err(JlboError::Dimension("gamma, y and h do not conform".into()));
    }
    Ok(y.clone())
}
