//! Per-path-pair signal terms and their derivatives.
//!
//! Every received sample is a sum over path pairs `(l1, l2)` of
//! `K e^{-i w_j (tau1 + tau2)} a_U[r](thU) (a_Rbar(thRb)^H Theta a_R(thR)) (a_T(thT)^H w)`
//! times `g_{l1} h_{l2}`. [`cascade`] evaluates the unit-gain term and its
//! partials with respect to the six path parameters; [`half_design`] chains
//! them to one half of the location vector through the sparse geometry
//! gradients.

use nalgebra::{DMatrix, DVector};

use crate::channel::{ArrayRole, C64};
use crate::error::Result;
use crate::geometry::{legs, BsLegs, Half, Layout, Scene};
use crate::signal::{BeamformingState, LinkConfig};

/// Partials are ordered `tau1, aod_bs, aoa_ris, tau2, aod_ris, aoa_ue`.
pub(crate) struct Cascade {
    pub l1: usize,
    pub l2: usize,
    pub value: Vec<C64>,
    pub partial: Vec<[C64; 6]>,
}

impl Cascade {
    #[inline]
    pub fn at(&self, row: usize, a: usize, b: usize) -> usize {
        (row * self.l1 + a) * self.l2 + b
    }
}

struct SubcarrierFactors {
    a_t: Vec<DVector<C64>>,
    da_t: Vec<DVector<C64>>,
    a_u: Vec<DVector<C64>>,
    da_u: Vec<DVector<C64>>,
    e1: Vec<C64>,
    e2: Vec<C64>,
    beta: Vec<C64>,
    beta_r: Vec<C64>,
    beta_rb: Vec<C64>,
    rate: f64,
}

fn factors(bs: &BsLegs, theta: &DVector<C64>, link: &LinkConfig, j: usize) -> SubcarrierFactors {
    let cfg = &link.array;
    let mut a_t = Vec::new();
    let mut da_t = Vec::new();
    let mut a_r = Vec::new();
    let mut da_r = Vec::new();
    for leg in &bs.g {
        let (a, d) = cfg.steering_with_derivative(ArrayRole::BsTx, leg.aod, j);
        a_t.push(a);
        da_t.push(d);
        let (a, d) = cfg.steering_with_derivative(ArrayRole::RisRx, leg.aoa, j);
        a_r.push(a.component_mul(theta));
        da_r.push(d.component_mul(theta));
    }
    let mut a_rb = Vec::new();
    let mut da_rb = Vec::new();
    let mut a_u = Vec::new();
    let mut da_u = Vec::new();
    for leg in &bs.h {
        let (a, d) = cfg.steering_with_derivative(ArrayRole::RisTx, leg.aod, j);
        a_rb.push(a);
        da_rb.push(d);
        let (a, d) = cfg.steering_with_derivative(ArrayRole::UeRx, leg.aoa, j);
        a_u.push(a);
        da_u.push(d);
    }
    let rate = cfg.delay_phase_rate(j);
    let e1 = bs.g.iter().map(|l| C64::from_polar(1.0, -rate * l.toa)).collect();
    let e2 = bs.h.iter().map(|l| C64::from_polar(1.0, -rate * l.toa)).collect();
    let (n1, n2) = (bs.g.len(), bs.h.len());
    let mut beta = vec![C64::new(0.0, 0.0); n1 * n2];
    let mut beta_r = beta.clone();
    let mut beta_rb = beta.clone();
    for a in 0..n1 {
        for b in 0..n2 {
            beta[a * n2 + b] = a_rb[b].dotc(&a_r[a]);
            beta_r[a * n2 + b] = a_rb[b].dotc(&da_r[a]);
            beta_rb[a * n2 + b] = da_rb[b].dotc(&a_r[a]);
        }
    }
    SubcarrierFactors {
        a_t,
        da_t,
        a_u,
        da_u,
        e1,
        e2,
        beta,
        beta_r,
        beta_rb,
        rate,
    }
}

/// Unit-gain path-pair terms for every observation row.
pub(crate) fn cascade(all: &[BsLegs], bf: &BeamformingState, link: &LinkConfig) -> Cascade {
    let cfg = &link.array;
    let n1 = link.layout.l1 + 1;
    let n2 = link.layout.l2 + 1;
    let k = ((cfg.n_tx * cfg.n_ris) as f64).sqrt() * ((cfg.n_ris * cfg.n_ue) as f64).sqrt();
    let total = link.rows() * n1 * n2;
    let mut out = Cascade {
        l1: n1,
        l2: n2,
        value: vec![C64::new(0.0, 0.0); total],
        partial: vec![[C64::new(0.0, 0.0); 6]; total],
    };
    let mi = C64::new(0.0, -1.0);
    for (n, bs) in all.iter().enumerate() {
        for jj in 0..link.n_s() {
            let j = link.subcarrier(n, jj);
            let f = factors(bs, &bf.theta, link, j);
            for m in 0..link.n_pilots {
                let w = &bf.w[link.beam_index(n, jj, m)];
                let alpha: Vec<C64> = f.a_t.iter().map(|a| a.dotc(w)).collect();
                let dalpha: Vec<C64> = f.da_t.iter().map(|a| a.dotc(w)).collect();
                for r in 0..cfg.n_ue {
                    let row = link.row(n, jj, m, r);
                    for a in 0..n1 {
                        for b in 0..n2 {
                            let base = f.e1[a] * f.e2[b] * k;
                            let au = f.a_u[b][r];
                            let bab = a * n2 + b;
                            let t = base * au * f.beta[bab] * alpha[a];
                            let d_tau = t * mi * f.rate;
                            let idx = out.at(row, a, b);
                            out.value[idx] = t;
                            out.partial[idx] = [
                                d_tau,
                                base * au * f.beta[bab] * dalpha[a],
                                base * au * f.beta_r[bab] * alpha[a],
                                d_tau,
                                base * au * f.beta_rb[bab] * alpha[a],
                                base * f.da_u[b][r] * f.beta[bab] * alpha[a],
                            ];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Structured model of one κ half and the derivatives of its columns.
pub(crate) struct HalfDesign {
    /// κ index of each half coordinate.
    pub kappa_idx: Vec<usize>,
    /// `Gamma` (RIS half) or `Lambda` (UE half).
    pub model: DMatrix<C64>,
    /// Derivative of model column `n (L+1) + l` with respect to the half,
    /// restricted to the rows of BS `n`: `rows_per_bs x dim(half)`.
    pub deriv: Vec<DMatrix<C64>>,
    pub own_paths: usize,
    pub rows_per_bs: usize,
}

fn scatter(z: &mut [C64], map: &[Option<usize>], grad: &[(usize, f64)], c: C64) {
    for &(i, v) in grad {
        if let Some(p) = map[i] {
            z[p] += c * v;
        }
    }
}

pub(crate) fn half_map(layout: &Layout, half: Half) -> (Vec<usize>, Vec<Option<usize>>) {
    let idx = layout.half_indices(half);
    let mut map = vec![None; layout.kappa_len()];
    for (p, &i) in idx.iter().enumerate() {
        map[i] = Some(p);
    }
    (idx, map)
}

/// Model matrix and column derivatives for `half`, with the other half's
/// gains (`g` for the RIS half, `h` for the UE half) held at `other`.
pub(crate) fn half_design(
    cas: &Cascade,
    all: &[BsLegs],
    link: &LinkConfig,
    half: Half,
    other: &DVector<C64>,
) -> HalfDesign {
    let lay = link.layout;
    let (kappa_idx, map) = half_map(&lay, half);
    let p = kappa_idx.len();
    let rb = link.rows_per_bs();
    let (own, oth) = match half {
        Half::Ris => (cas.l2, cas.l1),
        Half::Ue => (cas.l1, cas.l2),
    };
    let mut model = DMatrix::zeros(link.rows(), lay.n_bs * own);
    let mut deriv = vec![DMatrix::zeros(rb, p); lay.n_bs * own];
    let mut z = vec![C64::new(0.0, 0.0); p];
    for (n, bs) in all.iter().enumerate() {
        for local in 0..rb {
            let row = n * rb + local;
            for lo in 0..own {
                z.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
                let mut val = C64::new(0.0, 0.0);
                let mut own_acc = [C64::new(0.0, 0.0); 3];
                for lt in 0..oth {
                    let coef = other[n * oth + lt];
                    let (a, b) = match half {
                        Half::Ris => (lt, lo),
                        Half::Ue => (lo, lt),
                    };
                    let idx = cas.at(row, a, b);
                    val += coef * cas.value[idx];
                    let pr = &cas.partial[idx];
                    let (own_k, oth_k, oth_leg) = match half {
                        Half::Ris => (3, 0, &bs.g[lt]),
                        Half::Ue => (0, 3, &bs.h[lt]),
                    };
                    for q in 0..3 {
                        own_acc[q] += coef * pr[own_k + q];
                    }
                    scatter(&mut z, &map, &oth_leg.d_toa, coef * pr[oth_k]);
                    scatter(&mut z, &map, &oth_leg.d_aod, coef * pr[oth_k + 1]);
                    scatter(&mut z, &map, &oth_leg.d_aoa, coef * pr[oth_k + 2]);
                }
                let own_leg = match half {
                    Half::Ris => &bs.h[lo],
                    Half::Ue => &bs.g[lo],
                };
                scatter(&mut z, &map, &own_leg.d_toa, own_acc[0]);
                scatter(&mut z, &map, &own_leg.d_aod, own_acc[1]);
                scatter(&mut z, &map, &own_leg.d_aoa, own_acc[2]);
                let col = n * own + lo;
                model[(row, col)] = val;
                let mut d = deriv[col].row_mut(local);
                for (q, v) in z.iter().enumerate() {
                    d[q] = *v;
                }
            }
        }
    }
    HalfDesign {
        kappa_idx,
        model,
        deriv,
        own_paths: own,
        rows_per_bs: rb,
    }
}

impl HalfDesign {
    pub fn dim(&self) -> usize {
        self.kappa_idx.len()
    }

    /// `d (model * own) / d half`, all rows.
    pub fn jacobian(&self, own: &DVector<C64>) -> DMatrix<C64> {
        let rb = self.rows_per_bs;
        let n_bs = self.deriv.len() / self.own_paths;
        let mut j = DMatrix::zeros(rb * n_bs, self.dim());
        for n in 0..n_bs {
            let mut block = j.rows_mut(n * rb, rb);
            for l in 0..self.own_paths {
                let col = n * self.own_paths + l;
                block += &self.deriv[col] * own[col];
            }
        }
        j
    }

    /// Which half coordinates can influence the signal.
    pub fn active(&self, layout: &Layout) -> Vec<bool> {
        self.kappa_idx.iter().map(|&i| layout.is_active(i)).collect()
    }
}

/// Half design at one operating point without building the other half.
pub(crate) fn single_half(
    scene: &Scene,
    bf: &BeamformingState,
    other: &DVector<C64>,
    link: &LinkConfig,
    half: Half,
) -> Result<HalfDesign> {
    let all = legs(scene)?;
    let cas = cascade(&all, bf, link);
    Ok(half_design(&cas, &all, link, half, other))
}
