//! Dense helpers: truncated-SVD least squares, regularized Hermitian
//! inversion and principal eigenvectors.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::channel::C64;
use crate::error::{JlboError, Result};

/// Relative singular-value cutoff of every pseudo-inverse.
pub const SVD_CUTOFF: f64 = 1e-10;
/// Condition number above which Hermitian inverses are ridged.
pub const RIDGE_CONDITION: f64 = 1e12;

pub struct PinvSolve<T> {
    pub x: T,
    pub rank: usize,
    pub sigma_max: f64,
    pub sigma_min_kept: f64,
}

/// Minimum-norm least squares `A^+ y` with singular values below
/// `SVD_CUTOFF * sigma_max` discarded.
pub fn pinv_solve(a: &DMatrix<C64>, y: &DVector<C64>) -> Result<PinvSolve<DVector<C64>>> {
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().ok_or_else(|| JlboError::Eigen("svd without U".into()))?;
    let v_t = svd.v_t.as_ref().ok_or_else(|| JlboError::Eigen("svd without V".into()))?;
    let s = &svd.singular_values;
    let smax = s.iter().cloned().fold(0.0, f64::max);
    let cut = SVD_CUTOFF * smax;
    let uy = u.adjoint() * y;
    let mut z = DVector::<C64>::zeros(s.len());
    let mut rank = 0;
    let mut smin = f64::INFINITY;
    for k in 0..s.len() {
        if s[k] > cut && s[k] > 0.0 {
            z[k] = uy[k] / s[k];
            rank += 1;
            smin = smin.min(s[k]);
        }
    }
    Ok(PinvSolve {
        x: v_t.adjoint() * z,
        rank,
        sigma_max: smax,
        sigma_min_kept: smin,
    })
}

/// Real counterpart of [`pinv_solve`].
pub fn pinv_solve_real(a: &DMatrix<f64>, y: &DVector<f64>) -> Result<PinvSolve<DVector<f64>>> {
    damped_solve_real(a, y, 0.0)
}

/// Minimizer of `||a x - y||^2 + mu sigma_max^2 ||x||^2` over the kept
/// singular directions; `mu = 0` is the pseudo-inverse solution.
pub fn damped_solve_real(a: &DMatrix<f64>, y: &DVector<f64>, mu: f64) -> Result<PinvSolve<DVector<f64>>> {
    if !(mu >= 0.0) || !mu.is_finite() {
        return Err(JlboError::InvalidConfig(format!("damping must be finite and non-negative, got {mu}")));
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().ok_or_else(|| JlboError::Eigen("svd without U".into()))?;
    let v_t = svd.v_t.as_ref().ok_or_else(|| JlboError::Eigen("svd without V".into()))?;
    let s = &svd.singular_values;
    let smax = s.iter().cloned().fold(0.0, f64::max);
    let cut = SVD_CUTOFF * smax;
    let uy = u.transpose() * y;
    let mut z = DVector::<f64>::zeros(s.len());
    let mut rank = 0;
    let mut smin = f64::INFINITY;
    for k in 0..s.len() {
        if s[k] > cut && s[k] > 0.0 {
            z[k] = uy[k] * s[k] / (s[k] * s[k] + mu * smax * smax);
            rank += 1;
            smin = smin.min(s[k]);
        }
    }
    Ok(PinvSolve {
        x: v_t.transpose() * z,
        rank,
        sigma_max: smax,
        sigma_min_kept: smin,
    })
}

/// Numerical rank with the pseudo-inverse cutoff.
pub fn rank_real(a: &DMatrix<f64>) -> usize {
    if a.is_empty() {
        return 0;
    }
    let s = a.clone().singular_values();
    let smax = s.iter().cloned().fold(0.0, f64::max);
    s.iter().filter(|&&v| v > SVD_CUTOFF * smax && v > 0.0).count()
}

pub fn hermitian_part(m: &DMatrix<C64>) -> DMatrix<C64> {
    (m + m.adjoint()) * C64::new(0.5, 0.0)
}

/// Eigenvalues (ascending) and eigenvectors of a Hermitian matrix.
pub fn hermitian_eigen(m: &DMatrix<C64>) -> Result<(Vec<f64>, DMatrix<C64>)> {
    if m.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(JlboError::NonFinite("eigen-decomposition input".into()));
    }
    let eig = SymmetricEigen::try_new(hermitian_part(m), f64::EPSILON, 10_000)
        .ok_or_else(|| JlboError::Eigen("Hermitian eigen-decomposition did not converge".into()))?;
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = DMatrix::zeros(m.nrows(), m.ncols());
    for (k, &i) in order.iter().enumerate() {
        vecs.set_column(k, &eig.eigenvectors.column(i));
    }
    Ok((vals, vecs))
}

pub struct RegularizedInverse {
    pub inverse: DMatrix<C64>,
    pub ridge: f64,
    pub condition: f64,
}

/// Inverse of a Hermitian positive semidefinite matrix. The matrix is first
/// equilibrated to unit diagonal; when the condition number of the result
/// exceeds `RIDGE_CONDITION` its diagonal is loaded with
/// `1e-12 * trace / dim`.
pub fn hermitian_inverse(m: &DMatrix<C64>) -> Result<RegularizedInverse> {
    let dim = m.nrows();
    if dim == 0 {
        return Ok(RegularizedInverse {
            inverse: DMatrix::zeros(0, 0),
            ridge: 0.0,
            condition: 1.0,
        });
    }
    if m.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(JlboError::NonFinite("matrix to invert".into()));
    }
    let scale: Vec<f64> = (0..dim)
        .map(|i| {
            let d = m[(i, i)].re;
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let eq = DMatrix::from_fn(dim, dim, |i, k| m[(i, k)] * (scale[i] * scale[k]));
    let (vals, vecs) = hermitian_eigen(&eq)?;
    let lmax = vals[dim - 1];
    let lmin = vals[0];
    let condition = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
    let mut ridge = 0.0;
    if !(condition <= RIDGE_CONDITION) {
        let trace: f64 = (0..dim).map(|i| eq[(i, i)].re).sum();
        ridge = 1e-12 * trace / dim as f64;
    }
    let shifted: Vec<f64> = vals.iter().map(|v| v + ridge).collect();
    if !(shifted[0] > 0.0) || !(lmax > 0.0) {
        return Err(JlboError::SingularFim(format!(
            "smallest eigenvalue {:e} after ridge {:e}",
            shifted[0], ridge
        )));
    }
    let mut scaled = vecs.clone();
    for (k, v) in shifted.iter().enumerate() {
        scaled.column_mut(k).scale_mut(1.0 / v);
    }
    let inv_eq = scaled * vecs.adjoint();
    let inverse = hermitian_part(&DMatrix::from_fn(dim, dim, |i, k| inv_eq[(i, k)] * (scale[i] * scale[k])));
    Ok(RegularizedInverse {
        inverse,
        ridge,
        condition,
    })
}

/// Largest eigenvalue and a unit eigenvector of a Hermitian matrix. Among
/// numerically tied top eigenvalues the first returned by the solver is used;
/// the vector is normalized so its largest-magnitude entry is real positive.
pub fn principal_eigvec(m: &DMatrix<C64>) -> Result<(f64, DVector<C64>)> {
    let (vals, vecs) = hermitian_eigen(m)?;
    let k = vals.len() - 1;
    let mut v: DVector<C64> = vecs.column(k).into_owned();
    let big = v
        .iter()
        .enumerate()
        .fold((0, 0.0), |acc, (i, z)| if z.norm() > acc.1 + 1e-12 { (i, z.norm()) } else { acc })
        .0;
    if v[big].norm() > 0.0 {
        let ph = v[big].conj() / v[big].norm();
        v *= ph;
    }
    let nv = v.norm();
    Ok((vals[k], v / C64::new(nv, 0.0)))
}

pub fn real_stack_matrix(m: &DMatrix<C64>) -> DMatrix<f64> {
    let (r, c) = m.shape();
    DMatrix::from_fn(2 * r, c, |i, j| if i < r { m[(i, j)].re } else { m[(i - r, j)].im })
}

pub fn real_stack_vector(v: &DVector<C64>) -> DVector<f64> {
    let r = v.len();
    DVector::from_fn(2 * r, |i, _| if i < r { v[i].re } else { v[i - r].im })
}

/// Concatenates vectors end to end.
pub fn stack_vectors(parts: &[DVector<C64>]) -> DVector<C64> {
    DVector::from_iterator(parts.iter().map(|p| p.len()).sum(), parts.iter().flat_map(|p| p.iter().copied()))
}

/// Stacks matrices with equal column counts on top of each other.
pub fn stack_rows(parts: &[DMatrix<C64>]) -> DMatrix<C64> {
    let cols = parts.first().map_or(0, |p| p.ncols());
    let mut out = DMatrix::zeros(parts.iter().map(|p| p.nrows()).sum(), cols);
    let mut r0 = 0;
    for p in parts {
        out.rows_mut(r0, p.nrows()).copy_from(p);
        r0 += p.nrows();
    }
    out
}
