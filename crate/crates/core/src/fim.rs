//! Fisher information and Cramér-Rao bounds for the two halves of the
//! location vector.
//!
//! For the RIS half the unknowns are `(kappa2, h)` with `g` known and the
//! observation is `y = Gamma(kappa2) h + n`, `n ~ CN(0, sigma2 I)`. The FIM is
//! `sigma2^-1 [J Gamma]^H [J Gamma]` with `J = d(Gamma h)/d kappa2`; the UE half
//! is the same with `(kappa1, g)` and `Lambda`. The expected FIM averages the
//! location block over the gain prior and drops the cross blocks.
//!
//! Coordinates of κ that cannot influence the signal (the line-of-sight
//! scatterer slots) give zero rows and columns; bounds are taken over the
//! remaining coordinates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::channel::{ArrayRole, C64};
use crate::error::{JlboError, Result};
use crate::geometry::{legs, Half, Leg, Scene};
use crate::linalg::hermitian_inverse;
use crate::sensitivity::{single_half, HalfDesign};
use crate::signal::{BeamformingState, LinkConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct FisherInfo {
    pub half: Half,
    /// Location coordinates first (in half order), then the gains.
    pub fim: DMatrix<C64>,
    pub sigma2: f64,
    pub kappa_dim: usize,
    /// Which location coordinates influence the signal.
    pub active: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrlbValue {
    /// RIS half `(kappa2, h)`.
    pub crlb1: f64,
    /// UE half `(kappa1, g)`.
    pub crlb2: f64,
    pub total: f64,
}

fn check_sigma2(sigma2: f64) -> Result<()> {
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(JlboError::InvalidConfig(format!("noise variance must be positive, got {sigma2}")));
    }
    Ok(())
}

fn own_other<'a>(half: Half, g: &'a DVector<C64>, h: &'a DVector<C64>) -> (&'a DVector<C64>, &'a DVector<C64>) {
    match half {
        Half::Ris => (h, g),
        Half::Ue => (g, h),
    }
}

fn design(scene: &Scene, bf: &BeamformingState, g: &DVector<C64>, h: &DVector<C64>, link: &LinkConfig, half: Half) -> Result<HalfDesign> {
    if scene.check_shape()? != link.layout {
        return Err(JlboError::Dimension("scene and link layouts differ".into()));
    }
    bf.check(link)?;
    if g.len() != link.layout.n_gains_g() || h.len() != link.layout.n_gains_h() {
        return Err(JlboError::Dimension("gain vector lengths do not match the layout".into()));
    }
    let (_, other) = own_other(half, g, h);
    single_half(scene, bf, other, link, half)
}

fn assemble(half: Half, d: &HalfDesign, kappa_block: DMatrix<C64>, cross: Option<DMatrix<C64>>, sigma2: f64, link: &LinkConfig) -> FisherInfo {
    let p = d.dim();
    let q = d.model.ncols();
    let mut fim = DMatrix::zeros(p + q, p + q);
    fim.view_mut((0, 0), (p, p)).copy_from(&kappa_block);
    if let Some(c) = cross {
        fim.view_mut((0, p), (p, q)).copy_from(&c);
        fim.view_mut((p, 0), (q, p)).copy_from(&c.adjoint());
    }
    fim.view_mut((p, p), (q, q)).copy_from(&(d.model.adjoint() * &d.model));
    fim /= C64::new(sigma2, 0.0);
    FisherInfo {
        half,
        fim,
        sigma2,
        kappa_dim: p,
        active: d.active(&link.layout),
    }
}

/// FIM of one half at the given gains.
pub fn fisher_information(
    scene: &Scene,
    bf: &BeamformingState,
    g: &DVector<C64>,
    h: &DVector<C64>,
    sigma2: f64,
    link: &LinkConfig,
    half: Half,
) -> Result<FisherInfo> {
    check_sigma2(sigma2)?;
    let d = design(scene, bf, g, h, link, half)?;
    let (own, _) = own_other(half, g, h);
    let j = d.jacobian(own);
    let kk = j.adjoint() * &j;
    let cross = j.adjoint() * &d.model;
    Ok(assemble(half, &d, kk, Some(cross), sigma2, link))
}

/// FIM of one half averaged over independent zero-mean gains of the half
/// with variances `own_var`: the location block becomes
/// `sum_c var_c D_c^H D_c` and the cross blocks vanish.
pub fn expected_fim(
    scene: &Scene,
    bf: &BeamformingState,
    g: &DVector<C64>,
    h: &DVector<C64>,
    own_var: &[f64],
    sigma2: f64,
    link: &LinkConfig,
    half: Half,
) -> Result<FisherInfo> {
    check_sigma2(sigma2)?;
    let d = design(scene, bf, g, h, link, half)?;
    Ok(assemble(half, &d, expected_kappa_block(&d, own_var)?, None, sigma2, link))
}

pub(crate) fn expected_kappa_block(d: &HalfDesign, own_var: &[f64]) -> Result<DMatrix<C64>> {
    if own_var.len() != d.deriv.len() {
        return Err(JlboError::Dimension(format!(
            "{} gain variances for {} gains",
            own_var.len(),
            d.deriv.len()
        )));
    }
    if own_var.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(JlboError::InvalidConfig("gain covariance is not positive semidefinite".into()));
    }
    let p = d.dim();
    let mut kk = DMatrix::zeros(p, p);
    for (dc, &v) in d.deriv.iter().zip(own_var) {
        if v > 0.0 {
            kk += dc.adjoint() * dc * C64::new(v, 0.0);
        }
    }
    Ok(kk)
}

impl FisherInfo {
    /// Indices into `fim` of the active location coordinates and all gains.
    pub fn kept_indices(&self) -> Vec<usize> {
        let mut keep: Vec<usize> = (0..self.kappa_dim).filter(|&i| self.active[i]).collect();
        keep.extend(self.kappa_dim..self.fim.nrows());
        keep
    }

    fn kept(&self) -> (Vec<usize>, DMatrix<C64>) {
        let keep = self.kept_indices();
        let m = DMatrix::from_fn(keep.len(), keep.len(), |a, b| self.fim[(keep[a], keep[b])]);
        (keep, m)
    }

    /// Trace of the inverse over active coordinates and gains.
    pub fn crlb_trace(&self) -> Result<f64> {
        let (_, m) = self.kept();
        let inv = hermitian_inverse(&m)?;
        Ok((0..m.nrows()).map(|i| inv.inverse[(i, i)].re).sum())
    }

    /// Trace of the location block of the inverse.
    pub fn kappa_block_crlb(&self) -> Result<f64> {
        let (keep, m) = self.kept();
        let inv = hermitian_inverse(&m)?;
        Ok(keep
            .iter()
            .enumerate()
            .filter(|(_, &i)| i < self.kappa_dim)
            .map(|(a, _)| inv.inverse[(a, a)].re)
            .sum())
    }

    /// Bound on `E ||kappa_hat - kappa||^2` over the active location
    /// coordinates with κ real and the gains complex nuisance parameters:
    /// `trace((2 Re S)^-1)`, `S` the Schur complement of the gain block.
    pub fn real_kappa_bound(&self) -> Result<f64> {
        let act: Vec<usize> = (0..self.kappa_dim).filter(|&i| self.active[i]).collect();
        let p = self.kappa_dim;
        let q = self.fim.nrows() - p;
        let a = DMatrix::from_fn(act.len(), act.len(), |x, y| self.fim[(act[x], act[y])]);
        let c = DMatrix::from_fn(act.len(), q, |x, y| self.fim[(act[x], p + y)]);
        let gain = self.fim.view((p, p), (q, q)).into_owned();
        let ginv = hermitian_inverse(&gain)?.inverse;
        let s = a - &c * ginv * c.adjoint();
        let re = s.map(|v| C64::new(2.0 * v.re, 0.0));
        let inv = hermitian_inverse(&re)?;
        Ok((0..re.nrows()).map(|i| inv.inverse[(i, i)].re).sum())
    }

    pub fn hermitian_error(&self) -> f64 {
        let n = self.fim.norm();
        if n == 0.0 {
            return 0.0;
        }
        (&self.fim - self.fim.adjoint()).norm() / n
    }
}

/// Sum of the traces of the inverted expected FIMs of both halves, with
/// the gain priors `var_g`, `var_h` and the gain estimates `g`, `h`.
#[allow(clippy::too_many_arguments)]
pub fn crlb_total(
    scene: &Scene,
    bf: &BeamformingState,
    g: &DVector<C64>,
    h: &DVector<C64>,
    var_g: &[f64],
    var_h: &[f64],
    sigma2: f64,
    link: &LinkConfig,
) -> Result<CrlbValue> {
    let ris = expected_fim(scene, bf, g, h, var_h, sigma2, link, Half::Ris)?;
    let ue = expected_fim(scene, bf, g, h, var_g, sigma2, link, Half::Ue)?;
    let crlb1 = ris.crlb_trace()?;
    let crlb2 = ue.crlb_trace()?;
    Ok(CrlbValue {
        crlb1,
        crlb2,
        total: crlb1 + crlb2,
    })
}

/// Sum of the traces of the inverted FIMs of both halves at the gain
/// estimates `g`, `h`.
pub fn crlb_instantaneous(
    scene: &Scene,
    bf: &BeamformingState,
    g: &DVector<C64>,
    h: &DVector<C64>,
    sigma2: f64,
    link: &LinkConfig,
) -> Result<CrlbValue> {
    let crlb1 = fisher_information(scene, bf, g, h, sigma2, link, Half::Ris)?.crlb_trace()?;
    let crlb2 = fisher_information(scene, bf, g, h, sigma2, link, Half::Ue)?.crlb_trace()?;
    Ok(CrlbValue {
        crlb1,
        crlb2,
        total: crlb1 + crlb2,
    })
}

/// FIM form a bound is taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundKind {
    /// Location block averaged over the gain priors.
    Expected,
    /// FIM at the gain estimates.
    Instantaneous,
}

/// Derivatives of one structured phasor matrix with respect to its half of
/// the location vector.
///
/// For the RIS half the phasor is `mu` of RIS-UE path `l2` (`N_U x N_R`),
/// `p` is the derivative with respect to the RIS position, `o` with respect
/// to the UE orientation and `q` with respect to every scatterer coordinate
/// of the RIS-UE block. For the UE half the phasor is `mu_bar` of BS-RIS path
/// `l1` (`N_U x N_T`) and `p`, `o`, `q` are taken with respect to the UE
/// position, the RIS orientation and the BS-RIS scatterer block.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeVectors {
    pub half: Half,
    pub mu: DMatrix<C64>,
    pub p: [DMatrix<C64>; 2],
    pub o: DMatrix<C64>,
    /// One matrix per scatterer-block coordinate, `2 N (L + 1)` in total.
    pub q: Vec<DMatrix<C64>>,
}

impl DerivativeVectors {
    /// Entry `(r, t)` of every derivative: `p` (2), `o`, then the `q` block.
    pub fn entry(&self, r: usize, t: usize) -> (C64, [C64; 2], C64, Vec<C64>) {
        (
            self.mu[(r, t)],
            [self.p[0][(r, t)], self.p[1][(r, t)]],
            self.o[(r, t)],
            self.q.iter().map(|m| m[(r, t)]).collect(),
        )
    }
}

/// Accumulates `dm/dkappa_k = sum_s grad_s[k] * term_s` into `out[k]`.
fn accumulate(out: &mut [DMatrix<C64>], grads: &[&[(usize, f64)]], terms: &[DMatrix<C64>]) {
    for (g, t) in grads.iter().zip(terms) {
        for &(k, v) in g.iter() {
            out[k] += t * C64::new(v, 0.0);
        }
    }
}

fn pick(half: Half, all: Vec<DMatrix<C64>>, mu: DMatrix<C64>, link: &LinkConfig) -> DerivativeVectors {
    let lay = link.layout;
    let (pos, orient, block) = match half {
        Half::Ris => (lay.ris_index(), lay.ue_orientation_index(), lay.u_index(0, 0)),
        Half::Ue => (lay.ue_index(), lay.ris_orientation_index(), lay.r_index(0, 0)),
    };
    let blen = match half {
        Half::Ris => 2 * lay.n_bs * (lay.l2 + 1),
        Half::Ue => 2 * lay.n_bs * (lay.l1 + 1),
    };
    DerivativeVectors {
        half,
        p: [all[pos].clone(), all[pos + 1].clone()],
        o: all[orient].clone(),
        q: (block..block + blen).map(|k| all[k].clone()).collect(),
        mu,
    }
}

fn leg_of<'a>(all: &'a [crate::geometry::BsLegs], n: usize, l: usize, half: Half) -> Result<&'a Leg> {
    let bs = all.get(n).ok_or_else(|| JlboError::Dimension(format!("no BS {n}")))?;
    let v = match half {
        Half::Ris => &bs.h,
        Half::Ue => &bs.g,
    };
    v.get(l)
        .ok_or_else(|| JlboError::Dimension(format!("no path {l} for BS {n}")))
}

/// Closed-form derivatives of `mu` of RIS-UE path `l2`, BS `n`, subcarrier
/// slot `jj`.
pub fn derivative_vectors(scene: &Scene, link: &LinkConfig, n: usize, jj: usize, l2: usize) -> Result<DerivativeVectors> {
    let all = legs(scene)?;
    let leg = leg_of(&all, n, l2, Half::Ris)?;
    let cfg = &link.array;
    let j = link.subcarrier(n, jj);
    let (a_rb, da_rb) = cfg.steering_with_derivative(ArrayRole::RisTx, leg.aod, j);
    let (a_u, da_u) = cfg.steering_with_derivative(ArrayRole::UeRx, leg.aoa, j);
    let rate = cfg.delay_phase_rate(j);
    let ph = C64::from_polar(((cfg.n_ris * cfg.n_ue) as f64).sqrt(), -rate * leg.toa);
    let mu = &a_u * a_rb.adjoint() * ph;
    let terms = [
        &mu * C64::new(0.0, -rate),
        &a_u * da_rb.adjoint() * ph,
        &da_u * a_rb.adjoint() * ph,
    ];
    let mut out = vec![DMatrix::zeros(cfg.n_ue, cfg.n_ris); link.layout.kappa_len()];
    accumulate(&mut out, &[&leg.d_toa, &leg.d_aod, &leg.d_aoa], &terms);
    Ok(pick(Half::Ris, out, mu, link))
}

/// Closed-form derivatives of `mu_bar` of BS-RIS path `l1`, BS `n`,
/// subcarrier slot `jj`, at RIS phases `theta` and RIS-UE gains `h`.
pub fn derivative_vectors_bar(
    scene: &Scene,
    theta: &DVector<C64>,
    h: &DVector<C64>,
    link: &LinkConfig,
    n: usize,
    jj: usize,
    l1: usize,
) -> Result<DerivativeVectors> {
    let all = legs(scene)?;
    let leg = leg_of(&all, n, l1, Half::Ue)?;
    let cfg = &link.array;
    if theta.len() != cfg.n_ris || h.len() != link.layout.n_gains_h() {
        return Err(JlboError::Dimension("theta or h does not match the link".into()));
    }
    let j = link.subcarrier(n, jj);
    let rate = cfg.delay_phase_rate(j);
    let (a_t, da_t) = cfg.steering_with_derivative(ArrayRole::BsTx, leg.aod, j);
    let (a_r, da_r) = cfg.steering_with_derivative(ArrayRole::RisRx, leg.aoa, j);
    let ta = a_r.component_mul(theta);
    let tda = da_r.component_mul(theta);
    let kh = ((cfg.n_ris * cfg.n_ue) as f64).sqrt();
    let nh = link.layout.l2 + 1;
    let mut out = vec![DMatrix::zeros(cfg.n_ue, cfg.n_tx); link.layout.kappa_len()];
    let mut c = DVector::<C64>::zeros(cfg.n_ue);
    let mut dc_r = DVector::<C64>::zeros(cfg.n_ue);
    let ph = C64::from_polar(((cfg.n_ris * cfg.n_tx) as f64).sqrt(), -rate * leg.toa);
    let at_h = a_t.adjoint();
    for (l2, hl) in all[n].h.iter().enumerate() {
        let (a_rb, da_rb) = cfg.steering_with_derivative(ArrayRole::RisTx, hl.aod, j);
        let (a_u, da_u) = cfg.steering_with_derivative(ArrayRole::UeRx, hl.aoa, j);
        let e2 = h[n * nh + l2] * C64::from_polar(kh, -rate * hl.toa);
        let beta = a_rb.dotc(&ta);
        let cu = &a_u * (e2 * beta);
        c += &cu;
        dc_r += &a_u * (e2 * a_rb.dotc(&tda));
        let terms = [
            &cu * C64::new(0.0, -rate) * &at_h * ph,
            &a_u * (e2 * da_rb.dotc(&ta)) * &at_h * ph,
            &da_u * (e2 * beta) * &at_h * ph,
        ];
        accumulate(&mut out, &[&hl.d_toa, &hl.d_aod, &hl.d_aoa], &terms);
    }
    let mu = &c * &at_h * ph;
    let terms = [
        &mu * C64::new(0.0, -rate),
        &c * da_t.adjoint() * ph,
        &dc_r * &at_h * ph,
    ];
    accumulate(&mut out, &[&leg.d_toa, &leg.d_aod, &leg.d_aoa], &terms);
    Ok(pick(Half::Ue, out, mu, link))
}
