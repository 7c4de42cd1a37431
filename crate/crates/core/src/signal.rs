//! Pilot schedule, forward simulation of the received pilots and the
//! structured matrices `Gamma` (linear in `h`) and `Lambda` (linear in `g`).
//!
//! The observation vector is stacked with the BS index outermost, then the
//! subcarrier position within that BS's schedule, then the pilot symbol, then
//! the UE receive antenna innermost; see [`LinkConfig::row`].

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{complex_normal, g_channel, h_channel, ArrayConfig, ArrayRole, GainRealization, C64};
use crate::error::{JlboError, Result};
use crate::geometry::{legs, with_half, BsLegs, Half, Layout, Scene};

/// Array configuration, path counts and pilot length of one link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    pub array: ArrayConfig,
    pub layout: Layout,
    pub n_pilots: usize,
}

impl LinkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layout.n_bs == 0 {
            return Err(JlboError::InvalidConfig("need at least one base station".into()));
        }
        self.array.validate(self.layout.n_bs)
    }

    pub fn n_bs(&self) -> usize {
        self.layout.n_bs
    }

    pub fn n_s(&self) -> usize {
        self.array.n_subcarriers_per_bs
    }

    /// Rows of one BS block: `N_S * M * N_U`.
    pub fn rows_per_bs(&self) -> usize {
        self.n_s() * self.n_pilots * self.array.n_ue
    }

    /// Length of the stacked observation.
    pub fn rows(&self) -> usize {
        self.n_bs() * self.rows_per_bs()
    }

    /// Row of `(n, jj, m, r)`; all indices 0-based, `jj` the position in the schedule.
    pub fn row(&self, n: usize, jj: usize, m: usize, r: usize) -> usize {
        ((n * self.n_s() + jj) * self.n_pilots + m) * self.array.n_ue + r
    }

    /// Global 1-based subcarrier index of schedule position `jj` of BS `n` (0-based).
    pub fn subcarrier(&self, n: usize, jj: usize) -> usize {
        n + 1 + jj * self.n_bs()
    }

    /// Index of `w_n[j, m]` within [`BeamformingState::w`].
    pub fn beam_index(&self, n: usize, jj: usize, m: usize) -> usize {
        (n * self.n_s() + jj) * self.n_pilots + m
    }

    pub fn n_beams(&self) -> usize {
        self.n_bs() * self.n_s() * self.n_pilots
    }
}

/// Subcarriers `{n, n+N, ..., n+(N_S-1)N}` of BS `n` (1-based).
pub fn subcarrier_schedule(n: usize, n_bs: usize, n_s: usize) -> Result<Vec<usize>> {
    if n == 0 || n > n_bs {
        return Err(JlboError::InvalidConfig(format!("BS index {n} outside 1..={n_bs}")));
    }
    Ok((0..n_s).map(|k| n + k * n_bs).collect())
}

/// Transmit beams `w_n[j, m]` and RIS phases `theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformingState {
    pub w: Vec<DVector<C64>>,
    pub theta: DVector<C64>,
}

pub fn random_unit_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<C64> {
    let v = DVector::from_fn(n, |_, _| complex_normal(rng, 1.0));
    let nv = v.norm();
    v / C64::new(nv, 0.0)
}

pub fn random_phases<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<C64> {
    DVector::from_fn(n, |_, _| C64::from_polar(1.0, std::f64::consts::TAU * rng.random::<f64>()))
}

impl BeamformingState {
    /// Unit-norm random beams and unit-modulus random phases.
    pub fn random<R: Rng + ?Sized>(link: &LinkConfig, rng: &mut R) -> Self {
        let w = (0..link.n_beams()).map(|_| random_unit_vector(link.array.n_tx, rng)).collect();
        let theta = random_phases(link.array.n_ris, rng);
        BeamformingState { w, theta }
    }

    pub fn check(&self, link: &LinkConfig) -> Result<()> {
        if self.w.len() != link.n_beams() || self.w.iter().any(|w| w.len() != link.array.n_tx) {
            return Err(JlboError::Dimension(format!(
                "beamformer needs {} vectors of length {}",
                link.n_beams(),
                link.array.n_tx
            )));
        }
        if self.theta.len() != link.array.n_ris {
            return Err(JlboError::Dimension(format!(
                "RIS phase vector has length {}, expected {}",
                self.theta.len(),
                link.array.n_ris
            )));
        }
        if let Some(w) = self.w.iter().find(|w| w.norm() > 1.0 + 1e-12) {
            return Err(JlboError::InvalidConfig(format!("beam norm {} exceeds 1", w.norm())));
        }
        Ok(())
    }

    /// `max_i ||theta_i| - 1|`.
    pub fn modulus_residual(&self) -> f64 {
        self.theta.iter().map(|t| (t.norm() - 1.0).abs()).fold(0.0, f64::max)
    }
}

/// Stacked received pilots of one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBlock {
    pub y: DVector<C64>,
    pub sigma2: f64,
    pub slot: usize,
}

impl ObservationBlock {
    /// Fixture text: `slot`, `sigma2`, `y <len>` header lines, then `index real imag` rows.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "slot {}", self.slot);
        let _ = writeln!(out, "sigma2 {:e}", self.sigma2);
        let _ = writeln!(out, "y {}", self.y.len());
        for (k, v) in self.y.iter().enumerate() {
            let _ = writeln!(out, "{k} {:e} {:e}", v.re, v.im);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<ObservationBlock> {
        let bad = |what: &str| JlboError::Parse(format!("observation fixture: {what}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
        let mut field = |key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad("truncated"))?;
            let (k, v) = line.split_once(' ').ok_or_else(|| bad(line))?;
            if k != key {
                return Err(bad(&format!("expected `{key}`")));
            }
            Ok(v.trim().to_string())
        };
        let slot = field("slot")?.parse().map_err(|_| bad("slot"))?;
        let sigma2 = field("sigma2")?.parse().map_err(|_| bad("sigma2"))?;
        let len: usize = field("y")?.parse().map_err(|_| bad("length"))?;
        let mut y = Vec::with_capacity(len);
        for k in 0..len {
            let line = lines.next().ok_or_else(|| bad("truncated entries"))?;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 || f[0].parse::<usize>().ok() != Some(k) {
                return Err(bad(&format!("malformed entry `{line}`")));
            }
            let re: f64 = f[1].parse().map_err(|_| bad("real part"))?;
            let im: f64 = f[2].parse().map_err(|_| bad("imag part"))?;
            y.push(C64::new(re, im));
        }
        if lines.next().is_some() {
            return Err(bad("trailing data"));
        }
        Ok(ObservationBlock {
            y: DVector::from_vec(y),
            sigma2,
            slot,
        })
    }
}

fn check_inputs(scene: &Scene, bf: &BeamformingState, link: &LinkConfig) -> Result<Vec<BsLegs>> {
    let lay = scene.check_shape()?;
    if lay != link.layout {
        return Err(JlboError::Dimension(format!(
            "scene layout {lay:?} does not match link layout {:?}",
            link.layout
        )));
    }
    link.validate()?;
    bf.check(link)?;
    legs(scene)
}

fn check_len(v: &DVector<C64>, len: usize, what: &str) -> Result<()> {
    if v.len() != len {
        return Err(JlboError::Dimension(format!("{what} has length {}, expected {len}", v.len())));
    }
    Ok(())
}

/// `H_n Theta G_n w_n[j, m]` stacked over all `(n, j, m)`.
pub fn noiseless_rx(scene: &Scene, gains: &GainRealization, bf: &BeamformingState, link: &LinkConfig) -> Result<DVector<C64>> {
    model_rx(scene, &gains.g, &gains.h, bf, link)
}

/// [`noiseless_rx`] with bare gain vectors.
pub fn model_rx(scene: &Scene, g: &DVector<C64>, h: &DVector<C64>, bf: &BeamformingState, link: &LinkConfig) -> Result<DVector<C64>> {
    let all = check_inputs(scene, bf, link)?;
    check_len(g, link.layout.n_gains_g(), "g")?;
    check_len(h, link.layout.n_gains_h(), "h")?;
    let mut y = DVector::zeros(link.rows());
    for (n, bs) in all.iter().enumerate() {
        for jj in 0..link.n_s() {
            let j = link.subcarrier(n, jj);
            let gm = g_channel(bs, n, g, &link.array, j)?;
            let hm = h_channel(bs, n, h, &link.array, j)?;
            let mut h_theta = hm;
            for (c, t) in bf.theta.iter().enumerate() {
                h_theta.column_mut(c).scale_mut_complex(*t);
            }
            let cascade = h_theta * gm;
            for m in 0..link.n_pilots {
                let s = &cascade * &bf.w[link.beam_index(n, jj, m)];
                let r0 = link.row(n, jj, m, 0);
                y.rows_mut(r0, link.array.n_ue).copy_from(&s);
            }
        }
    }
    Ok(y)
}

trait ScaleComplex {
    fn scale_mut_complex(&mut self, s: C64);
}

impl<S> ScaleComplex for nalgebra::Matrix<C64, nalgebra::Dyn, nalgebra::U1, S>
where
    S: nalgebra::StorageMut<C64, nalgebra::Dyn, nalgebra::U1>,
{
    fn scale_mut_complex(&mut self, s: C64) {
        for v in self.iter_mut() {
            *v *= s;
        }
    }
}

/// Received pilots with additive `CN(0, sigma2 I)` noise.
pub fn simulate_rx<R: Rng + ?Sized>(
    scene: &Scene,
    gains: &GainRealization,
    bf: &BeamformingState,
    link: &LinkConfig,
    sigma2: f64,
    t: usize,
    rng: &mut R,
) -> Result<ObservationBlock> {
    if !(sigma2 >= 0.0) || !sigma2.is_finite() {
        return Err(JlboError::InvalidConfig(format!("noise variance must be non-negative, got {sigma2}")));
    }
    let mut y = noiseless_rx(scene, gains, bf, link)?;
    if sigma2 > 0.0 {
        for v in y.iter_mut() {
            *v += complex_normal(rng, sigma2);
        }
    }
    Ok(ObservationBlock { y, sigma2, slot: t })
}

/// `mu^(r, tbar)` of RIS-UE path `l2` for BS `n` at schedule position `jj`,
/// as an `N_U x N_R` matrix.
pub fn mu_phasors(scene: &Scene, link: &LinkConfig, n: usize, jj: usize, l2: usize) -> Result<DMatrix<C64>> {
    let all = legs(scene)?;
    let leg = all
        .get(n)
        .and_then(|b| b.h.get(l2))
        .ok_or_else(|| JlboError::Dimension(format!("no RIS-UE path {l2} for BS {n}")))?;
    let cfg = &link.array;
    let j = link.subcarrier(n, jj);
    let a_rb = cfg.steering(ArrayRole::RisTx, leg.aod, j)?;
    let a_u = cfg.steering(ArrayRole::UeRx, leg.aoa, j)?;
    let k = ((cfg.n_ris * cfg.n_ue) as f64).sqrt();
    let ph = C64::from_polar(k, -cfg.delay_phase_rate(j) * leg.toa);
    Ok(&a_u * a_rb.adjoint() * ph)
}

/// `Gamma` for the given scene: column `n (L2+1) + l2` holds the response to a
/// unit gain on RIS-UE path `l2` of BS `n`.
pub fn gamma_matrix(scene: &Scene, bf: &BeamformingState, g: &DVector<C64>, link: &LinkConfig) -> Result<DMatrix<C64>> {
    let all = check_inputs(scene, bf, link)?;
    check_len(g, link.layout.n_gains_g(), "g")?;
    let l2 = link.layout.l2 + 1;
    let mut out = DMatrix::zeros(link.rows(), link.layout.n_gains_h());
    for (n, bs) in all.iter().enumerate() {
        for jj in 0..link.n_s() {
            let j = link.subcarrier(n, jj);
            let gm = g_channel(bs, n, g, &link.array, j)?;
            let mus: Vec<DMatrix<C64>> = (0..l2).map(|l| mu_phasors(scene, link, n, jj, l)).collect::<Result<_>>()?;
            for m in 0..link.n_pilots {
                let b = (&gm * &bf.w[link.beam_index(n, jj, m)]).component_mul(&bf.theta);
                for (l, mu) in mus.iter().enumerate() {
                    let gamma = mu * &b;
                    for r in 0..link.array.n_ue {
                        out[(link.row(n, jj, m, r), n * l2 + l)] = gamma[r];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `Gamma(kappa2)` with the remaining geometry taken from `template`.
pub fn build_gamma(
    kappa2: &[f64],
    bf: &BeamformingState,
    g: &DVector<C64>,
    template: &Scene,
    link: &LinkConfig,
) -> Result<DMatrix<C64>> {
    let scene = with_half(template, Half::Ris, kappa2)?;
    gamma_matrix(&scene, bf, g, link)
}

/// `mu_bar^(r, ttilde)` of BS-RIS path `l1` for BS `n` at schedule position
/// `jj`, as an `N_U x N_T` matrix; built from `c = H_n Theta a_R`.
pub fn mu_bar_phasors(
    scene: &Scene,
    theta: &DVector<C64>,
    h: &DVector<C64>,
    link: &LinkConfig,
    n: usize,
    jj: usize,
    l1: usize,
) -> Result<DMatrix<C64>> {
    let all = legs(scene)?;
    let bs = all.get(n).ok_or_else(|| JlboError::Dimension(format!("no BS {n}")))?;
    let leg = bs
        .g
        .get(l1)
        .ok_or_else(|| JlboError::Dimension(format!("no BS-RIS path {l1} for BS {n}")))?;
    let cfg = &link.array;
    let j = link.subcarrier(n, jj);
    let hm = h_channel(bs, n, h, cfg, j)?;
    let a_r = cfg.steering(ArrayRole::RisRx, leg.aoa, j)?;
    let a_t = cfg.steering(ArrayRole::BsTx, leg.aod, j)?;
    let c = hm * a_r.component_mul(theta);
    let k = ((cfg.n_ris * cfg.n_tx) as f64).sqrt();
    let ph = C64::from_polar(k, -cfg.delay_phase_rate(j) * leg.toa);
    Ok(c * a_t.adjoint() * ph)
}

/// `Lambda` for the given scene: column `n (L1+1) + l1` holds the response to
/// a unit gain on BS-RIS path `l1` of BS `n`.
pub fn lambda_matrix(scene: &Scene, bf: &BeamformingState, h: &DVector<C64>, link: &LinkConfig) -> Result<DMatrix<C64>> {
    check_inputs(scene, bf, link)?;
    check_len(h, link.layout.n_gains_h(), "h")?;
    let l1 = link.layout.l1 + 1;
    let mut out = DMatrix::zeros(link.rows(), link.layout.n_gains_g());
    for n in 0..link.n_bs() {
        for jj in 0..link.n_s() {
            let mus: Vec<DMatrix<C64>> = (0..l1)
                .map(|l| mu_bar_phasors(scene, &bf.theta, h, link, n, jj, l))
                .collect::<Result<_>>()?;
            for m in 0..link.n_pilots {
                let w = &bf.w[link.beam_index(n, jj, m)];
                for (l, mu) in mus.iter().enumerate() {
                    let gamma = mu * w;
                    for r in 0..link.array.n_ue {
                        out[(link.row(n, jj, m, r), n * l1 + l)] = gamma[r];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `Lambda(kappa1)` with the remaining geometry taken from `template`.
pub fn build_lambda(
    kappa1: &[f64],
    bf: &BeamformingState,
    h: &DVector<C64>,
    template: &Scene,
    link: &LinkConfig,
) -> Result<DMatrix<C64>> {
    let scene = with_half(template, Half::Ue, kappa1)?;
    lambda_matrix(&scene, bf, h, link)
}
