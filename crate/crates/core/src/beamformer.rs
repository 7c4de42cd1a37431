//! Transmit beams and RIS phases that minimize the Cramér-Rao bound.
//!
//! The bound of each half is `sigma2 (tr A^-1 + tr G^-1)` with `A` the
//! noise-free location block of the expected FIM and `G` the gain Gram
//! matrix. Both are sums of rank-one terms whose rows are linear in each beam
//! and in the RIS phase vector. Expanding `tr A^-1` to first order around the
//! current point gives the surrogate `-sum_b w_b^H P_b w_b` with
//! `P_b = sigma2^-1 sum conj(X B^2 X^H)`, `B = A^-1`, summed over the rows fed
//! by beam `b`, the location columns and both halves (likewise for `G` with
//! `E = G^-1`). The RIS side has a single block `P_theta`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::channel::C64;
use crate::error::{JlboError, Result};
use crate::fim::{crlb_instantaneous, crlb_total, expected_kappa_block, BoundKind, CrlbValue};
use crate::geometry::{Half, Scene};
use crate::linalg::{hermitian_inverse, hermitian_part, principal_eigvec};
use crate::location::LineSearchParams;
use crate::sensitivity::{single_half, HalfDesign};
use crate::signal::{BeamformingState, LinkConfig};

/// Quantities the beam design treats as known.
#[derive(Debug, Clone, Copy)]
pub struct BeamContext<'a> {
    /// Scene built from the current location estimate.
    pub scene: &'a Scene,
    pub g: &'a DVector<C64>,
    pub h: &'a DVector<C64>,
    pub var_g: &'a [f64],
    pub var_h: &'a [f64],
    pub sigma2: f64,
    pub link: &'a LinkConfig,
    pub bound: BoundKind,
}

impl BeamContext<'_> {
    pub fn crlb(&self, bf: &BeamformingState) -> Result<CrlbValue> {
        match self.bound {
            BoundKind::Expected => {
                crlb_total(self.scene, bf, self.g, self.h, self.var_g, self.var_h, self.sigma2, self.link)
            }
            BoundKind::Instantaneous => crlb_instantaneous(self.scene, bf, self.g, self.h, self.sigma2, self.link),
        }
    }

    fn own(&self, half: Half) -> &DVector<C64> {
        match half {
            Half::Ris => self.h,
            Half::Ue => self.g,
        }
    }

    fn other(&self, half: Half) -> &DVector<C64> {
        match half {
            Half::Ris => self.g,
            Half::Ue => self.h,
        }
    }

    fn own_var(&self, half: Half) -> &[f64] {
        match half {
            Half::Ris => self.var_h,
            Half::Ue => self.var_g,
        }
    }
}

/// Hermitian PSD blocks of `-sum_b v_b^H P_b v_b`. The constant of the
/// expansion is dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateQuadratic {
    pub blocks: Vec<DMatrix<C64>>,
    pub constant: f64,
    pub sigma2: f64,
}

impl SurrogateQuadratic {
    /// `-sum_b v_b^H P_b v_b`.
    pub fn value(&self, v: &[DVector<C64>]) -> f64 {
        -self.blocks.iter().zip(v).map(|(p, x)| quad(p, x)).sum::<f64>()
    }
}

fn quad(p: &DMatrix<C64>, x: &DVector<C64>) -> f64 {
    x.dotc(&(p * x)).re
}

/// Inverse of the location block and of the gain Gram at the current point,
/// restricted to active location coordinates. With `joint` set, `b` is the
/// inverse of the whole noise-free FIM over `[location, gains]` and `e` is
/// unused.
struct Weights {
    act: Vec<usize>,
    b: DMatrix<C64>,
    e: DMatrix<C64>,
    var: Vec<f64>,
    joint: Option<DVector<C64>>,
}

fn weights(d: &HalfDesign, own_var: &[f64], link: &LinkConfig) -> Result<Weights> {
    let kk = expected_kappa_block(d, own_var)?;
    let act: Vec<usize> = (0..d.dim()).filter(|&c| link.layout.is_active(d.kappa_idx[c])).collect();
    let a = DMatrix::from_fn(act.len(), act.len(), |x, y| kk[(act[x], act[y])]);
    let b = hermitian_inverse(&a)?.inverse;
    let e = hermitian_inverse(&(d.model.adjoint() * &d.model))?.inverse;
    Ok(Weights {
        act,
        b,
        e,
        var: own_var.to_vec(),
        joint: None,
    })
}

fn joint_weights(d: &HalfDesign, own: &DVector<C64>, link: &LinkConfig) -> Result<Weights> {
    let act: Vec<usize> = (0..d.dim()).filter(|&c| link.layout.is_active(d.kappa_idx[c])).collect();
    let j = d.jacobian(own);
    let na = act.len();
    let x = DMatrix::from_fn(j.nrows(), na + d.model.ncols(), |r, q| {
        if q < na {
            j[(r, act[q])]
        } else {
            d.model[(r, q - na)]
        }
    });
    let b = hermitian_inverse(&(x.adjoint() * &x))?.inverse;
    Ok(Weights {
        act,
        b,
        e: DMatrix::zeros(0, 0),
        var: Vec::new(),
        joint: Some(own.clone()),
    })
}

/// Adds `conj(X W W^H X^H)` for the coefficient rows `X` (one per basis
/// vector) into `p`.
fn add_form(p: &mut DMatrix<C64>, x: &DMatrix<C64>, w: &DMatrix<C64>, scale: f64) {
    let xw = x * w;
    let m = &xw * xw.adjoint();
    for (dst, src) in p.iter_mut().zip(m.iter()) {
        *dst += src.conj() * scale;
    }
}

/// Accumulates the contribution of observation `row` of one half into `p`,
/// from designs evaluated at each basis vector.
fn add_row(p: &mut DMatrix<C64>, designs: &[HalfDesign], wts: &Weights, row: usize) {
    let nb = designs.len();
    let d0 = &designs[0];
    let rb = d0.rows_per_bs;
    let n = row / rb;
    let local = row % rb;
    if let Some(own) = &wts.joint {
        let na = wts.act.len();
        let x = DMatrix::from_fn(nb, na + d0.model.ncols(), |k, q| {
            if q < na {
                (0..d0.own_paths)
                    .map(|l| {
                        let c = n * d0.own_paths + l;
                        own[c] * designs[k].deriv[c][(local, wts.act[q])]
                    })
                    .sum()
            } else {
                designs[k].model[(row, q - na)]
            }
        });
        add_form(p, &x, &wts.b, 1.0);
        return;
    }
    for l in 0..d0.own_paths {
        let c = n * d0.own_paths + l;
        let v = wts.var[c];
        if v > 0.0 {
            let x = DMatrix::from_fn(nb, wts.act.len(), |k, q| designs[k].deriv[c][(local, wts.act[q])]);
            add_form(p, &x, &wts.b, v);
        }
    }
    let y = DMatrix::from_fn(nb, d0.model.ncols(), |k, q| designs[k].model[(row, q)]);
    add_form(p, &y, &wts.e, 1.0);
}

fn basis_states(bf: &BeamformingState, link: &LinkConfig, for_theta: bool) -> Vec<BeamformingState> {
    let dim = if for_theta { link.array.n_ris } else { link.array.n_tx };
    (0..dim)
        .map(|k| {
            let mut e = DVector::zeros(dim);
            e[k] = C64::new(1.0, 0.0);
            if for_theta {
                BeamformingState { w: bf.w.clone(), theta: e }
            } else {
                BeamformingState { w: vec![e; bf.w.len()], theta: bf.theta.clone() }
            }
        })
        .collect()
}

fn check_context(bf: &BeamformingState, ctx: &BeamContext) -> Result<()> {
    bf.check(ctx.link)?;
    if !(ctx.sigma2 > 0.0) || !ctx.sigma2.is_finite() {
        return Err(JlboError::InvalidConfig(format!("noise variance must be positive, got {}", ctx.sigma2)));
    }
    if ctx.scene.check_shape()? != ctx.link.layout {
        return Err(JlboError::Dimension("scene and link layouts differ".into()));
    }
    Ok(())
}

fn build(bf: &BeamformingState, ctx: &BeamContext, for_theta: bool) -> Result<SurrogateQuadratic> {
    check_context(bf, ctx)?;
    let link = ctx.link;
    let bases = basis_states(bf, link, for_theta);
    let dim = bases.len();
    let n_blocks = if for_theta { 1 } else { link.n_beams() };
    let mut blocks = vec![DMatrix::<C64>::zeros(dim, dim); n_blocks];
    for half in [Half::Ris, Half::Ue] {
        let here = single_half(ctx.scene, bf, ctx.other(half), link, half)?;
        let wts = match ctx.bound {
            BoundKind::Expected => weights(&here, ctx.own_var(half), link)?,
            BoundKind::Instantaneous => joint_weights(&here, ctx.own(half), link)?,
        };
        let designs: Vec<HalfDesign> = bases
            .iter()
            .map(|b| single_half(ctx.scene, b, ctx.other(half), link, half))
            .collect::<Result<_>>()?;
        for row in 0..link.rows() {
            let blk = if for_theta { 0 } else { row / link.array.n_ue };
            add_row(&mut blocks[blk], &designs, &wts, row);
        }
    }
    for b in blocks.iter_mut() {
        *b = hermitian_part(b) / C64::new(ctx.sigma2, 0.0);
    }
    Ok(SurrogateQuadratic {
        blocks,
        constant: 0.0,
        sigma2: ctx.sigma2,
    })
}

/// One PSD block per beam `(n, j, m)`, built at `bf`.
pub fn build_surrogate_w(bf: &BeamformingState, ctx: &BeamContext) -> Result<SurrogateQuadratic> {
    build(bf, ctx, false)
}

/// A single `N_R x N_R` block built at `bf`.
pub fn build_surrogate_theta(bf: &BeamformingState, ctx: &BeamContext) -> Result<SurrogateQuadratic> {
    build(bf, ctx, true)
}

/// Rayleigh quotient `-x^H P x / ||x||^2` scaled by `norm2`, the squared
/// norm of a feasible point.
fn rayleigh(p: &DMatrix<C64>, x: &DVector<C64>, norm2: f64) -> f64 {
    let n = x.norm_squared();
    if n == 0.0 {
        return 0.0;
    }
    -norm2 * quad(p, x) / n
}

/// Gradient of [`rayleigh`] with respect to `conj(x)`.
pub fn rayleigh_gradient(p: &DMatrix<C64>, x: &DVector<C64>, norm2: f64) -> DVector<C64> {
    let n = x.norm_squared();
    let q = quad(p, x) / n;
    -(p * x - x * C64::new(q, 0.0)) * C64::new(norm2 / n, 0.0)
}

/// Unit-norm principal eigenvector of `p`, rotated so `x^H v` is real and
/// non-negative, scaled to `sqrt(norm2)`.
fn aligned_eigvec(p: &DMatrix<C64>, x: &DVector<C64>, norm2: f64) -> Result<DVector<C64>> {
    let (_, v) = principal_eigvec(p)?;
    Ok(align(v, x, norm2))
}

fn align(mut v: DVector<C64>, x: &DVector<C64>, norm2: f64) -> DVector<C64> {
    let z = x.dotc(&v);
    if z.norm() > 0.0 {
        v *= z.conj() / z.norm();
    }
    v * C64::new(norm2.sqrt(), 0.0)
}

/// Outcome of one surrogate pass over the beams.
#[derive(Debug, Clone, PartialEq)]
pub struct WUpdate {
    pub w: Vec<DVector<C64>>,
    /// Largest `Re{d^H grad}` over the beams.
    pub max_slope: f64,
    pub surrogate_before: f64,
    pub surrogate_after: f64,
    /// Beams whose line search failed and were left unchanged.
    pub stalled: usize,
}

/// Moves every beam towards the principal eigenvector of its block with an
/// Armijo step on the Rayleigh quotient, then rescales to unit norm.
pub fn update_w(w_prev: &[DVector<C64>], s: &SurrogateQuadratic, ls: &LineSearchParams) -> Result<WUpdate> {
    ls.validate()?;
    if w_prev.len() != s.blocks.len() {
        return Err(JlboError::Dimension(format!("{} beams for {} surrogate blocks", w_prev.len(), s.blocks.len())));
    }
    let mut out = Vec::with_capacity(w_prev.len());
    let mut max_slope = f64::NEG_INFINITY;
    let mut before = 0.0;
    let mut after = 0.0;
    let mut stalled = 0;
    for (p, w) in s.blocks.iter().zip(w_prev) {
        if w.norm() == 0.0 {
            return Err(JlboError::InvalidConfig("zero beam cannot seed the update".into()));
        }
        let w = w / C64::new(w.norm(), 0.0);
        let f0 = rayleigh(p, &w, 1.0);
        before += f0;
        let v = aligned_eigvec(p, &w, 1.0)?;
        let mut d = v - &w;
        let grad = rayleigh_gradient(p, &w, 1.0);
        let mut slope = d.dotc(&grad).re;
        if slope > 0.0 {
            d.fill(C64::new(0.0, 0.0));
            slope = 0.0;
        }
        max_slope = max_slope.max(slope);
        if slope == 0.0 || d.norm() == 0.0 {
            after += f0;
            out.push(w);
            continue;
        }
        let mut lambda = ls.initial;
        let mut accepted = None;
        for _ in 0..=ls.max_backtracks {
            let cand = &w + &d * C64::new(lambda, 0.0);
            if cand.norm() > 0.0 {
                let f = rayleigh(p, &cand, 1.0);
                if f <= f0 + ls.armijo_a * lambda * 2.0 * slope {
                    accepted = Some((cand.clone() / C64::new(cand.norm(), 0.0), f));
                    break;
                }
            }
            lambda *= ls.shrink;
        }
        match accepted {
            Some((wn, f)) => {
                after += f;
                out.push(wn);
            }
            None => {
                stalled += 1;
                after += f0;
                out.push(w);
            }
        }
    }
    Ok(WUpdate {
        w: out,
        max_slope,
        surrogate_before: before,
        surrogate_after: after,
        stalled,
    })
}

/// Penalty weight schedule for the unit-modulus constraint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltySchedule {
    /// Starting weight; `None` uses ten times the magnitude of the surrogate
    /// at the current phases.
    pub eta0: Option<f64>,
    pub growth: f64,
    /// Largest weight as a power of `growth` times `eta0`.
    pub max_doublings: u32,
    pub tol: f64,
    pub steps_per_weight: usize,
}

impl Default for PenaltySchedule {
    fn default() -> Self {
        PenaltySchedule {
            eta0: None,
            growth: 2.0,
            max_doublings: 30,
            tol: 1e-3,
            steps_per_weight: 5,
        }
    }
}

fn penalty(theta: &DVector<C64>) -> f64 {
    theta.iter().map(|t| (t.norm() - 1.0).powi(2)).sum()
}

fn penalty_gradient(theta: &DVector<C64>) -> DVector<C64> {
    theta.map(|t| {
        let a = t.norm();
        if a == 0.0 {
            C64::new(0.0, 0.0)
        } else {
            t * ((a - 1.0) / a)
        }
    })
}

/// Penalized RIS objective `rayleigh(theta) + eta sum (|theta_i| - 1)^2`.
pub fn theta_objective(p: &DMatrix<C64>, theta: &DVector<C64>, eta: f64) -> f64 {
    rayleigh(p, theta, theta.len() as f64) + eta * penalty(theta)
}

/// Gradient of [`theta_objective`] with respect to `conj(theta)`.
pub fn theta_gradient(p: &DMatrix<C64>, theta: &DVector<C64>, eta: f64) -> DVector<C64> {
    rayleigh_gradient(p, theta, theta.len() as f64) + penalty_gradient(theta) * C64::new(eta, 0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThetaUpdate {
    /// Unit-modulus phases after the final projection.
    pub theta: DVector<C64>,
    /// `max_i ||theta_i| - 1|` just before the projection.
    pub residual: f64,
    pub eta: f64,
    pub max_slope: f64,
    /// `(before, after)` of the penalized objective for every accepted step.
    pub steps: Vec<(f64, f64)>,
    /// Entries that were exactly zero at projection and took the phase of
    /// `theta_prev`.
    pub reseeded: usize,
}

/// Eigenvector-directed Armijo steps on the penalized RIS objective,
/// raising the weight until the modulus residual falls below the schedule
/// tolerance, then projecting onto unit modulus.
pub fn update_theta(
    theta_prev: &DVector<C64>,
    s: &SurrogateQuadratic,
    ls: &LineSearchParams,
    schedule: &PenaltySchedule,
) -> Result<ThetaUpdate> {
    ls.validate()?;
    if s.blocks.len() != 1 || s.blocks[0].nrows() != theta_prev.len() {
        return Err(JlboError::Dimension("RIS surrogate must be one block matching theta".into()));
    }
    if !(schedule.growth > 1.0) || !(schedule.tol > 0.0) {
        return Err(JlboError::InvalidConfig(format!("invalid penalty schedule {schedule:?}")));
    }
    let p = &s.blocks[0];
    let nr = theta_prev.len() as f64;
    let mut theta = theta_prev.clone();
    let eta0 = match schedule.eta0 {
        Some(e) if e > 0.0 => e,
        Some(e) => return Err(JlboError::InvalidConfig(format!("penalty weight must be positive, got {e}"))),
        None => {
            let t = rayleigh(p, &theta, nr).abs();
            if t > 0.0 {
                10.0 * t
            } else {
                1.0
            }
        }
    };
    let mut eta = eta0;
    let mut steps = Vec::new();
    let mut max_slope = f64::NEG_INFINITY;
    let max_eta = eta0 * schedule.growth.powi(schedule.max_doublings as i32);
    let (lmax, top) = principal_eigvec(p)?;
    loop {
        for _ in 0..schedule.steps_per_weight {
            let f0 = theta_objective(p, &theta, eta);
            let grad = theta_gradient(p, &theta, eta);
            let v = align(top.clone(), &theta, nr);
            let mut d = v - &theta;
            let mut slope = d.dotc(&grad).re;
            if !(slope < 0.0) {
                // Gradient step scaled by a bound on the curvature.
                let curv = eta + 2.0 * nr * lmax.abs() / theta.norm_squared().max(f64::MIN_POSITIVE);
                d = -&grad / C64::new(curv, 0.0);
                slope = -grad.norm_squared() / curv;
            }
            max_slope = max_slope.max(slope);
            if !(slope < 0.0) {
                break;
            }
            let mut lambda = ls.initial;
            let mut accepted = false;
            for _ in 0..=ls.max_backtracks {
                let cand = &theta + &d * C64::new(lambda, 0.0);
                let f = theta_objective(p, &cand, eta);
                if f <= f0 + ls.armijo_a * lambda * 2.0 * slope {
                    steps.push((f0, f));
                    theta = cand;
                    accepted = true;
                    break;
                }
                lambda *= ls.shrink;
            }
            if !accepted {
                break;
            }
        }
        let residual = theta.iter().map(|t| (t.norm() - 1.0).abs()).fold(0.0, f64::max);
        if residual < schedule.tol || eta * schedule.growth > max_eta {
            let mut reseeded = 0;
            let projected = DVector::from_fn(theta.len(), |i, _| {
                let a = theta[i].norm();
                if a > 0.0 {
                    theta[i] / a
                } else {
                    reseeded += 1;
                    theta_prev[i] / theta_prev[i].norm().max(f64::MIN_POSITIVE)
                }
            });
            return Ok(ThetaUpdate {
                theta: projected,
                residual,
                eta,
                max_slope,
                steps,
                reseeded,
            });
        }
        eta *= schedule.growth;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamformerOptions {
    pub rounds: usize,
    pub line_search: LineSearchParams,
    pub penalty: PenaltySchedule,
    /// Halvings tried towards the previous point when an update raises the
    /// true bound.
    pub safeguard_halvings: usize,
    /// Off keeps the RIS phases at their start value.
    pub optimize_theta: bool,
}

impl Default for BeamformerOptions {
    fn default() -> Self {
        BeamformerOptions {
            rounds: 5,
            line_search: LineSearchParams::default(),
            penalty: PenaltySchedule::default(),
            safeguard_halvings: 8,
            optimize_theta: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamformerRound {
    pub round: usize,
    pub crlb1: f64,
    pub crlb2: f64,
    pub total: f64,
    pub penalty_residual: f64,
    pub w_slope: f64,
    pub theta_slope: f64,
    pub w_accepted: bool,
    pub theta_accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamformerOutcome {
    pub bf: BeamformingState,
    pub initial: CrlbValue,
    pub final_crlb: CrlbValue,
    pub trace: Vec<BeamformerRound>,
    /// Surrogate values before and after every accepted step, beams and
    /// phases alike.
    pub surrogate_steps: Vec<(f64, f64)>,
}

fn blend(a: &DVector<C64>, b: &DVector<C64>, t: f64) -> DVector<C64> {
    a * C64::new(1.0 - t, 0.0) + b * C64::new(t, 0.0)
}

fn unit(v: DVector<C64>) -> DVector<C64> {
    let n = v.norm();
    if n > 0.0 {
        v / C64::new(n, 0.0)
    } else {
        v
    }
}

fn unit_modulus(v: DVector<C64>, fallback: &DVector<C64>) -> DVector<C64> {
    DVector::from_fn(v.len(), |i, _| if v[i].norm() > 0.0 { v[i] / v[i].norm() } else { fallback[i] })
}

/// Takes `cand` if it lowers the bound, else the best of the points halfway,
/// a quarter of the way and so on from `prev`; `None` when none improves.
fn safeguard<F>(prev_total: f64, halvings: usize, ctx: &BeamContext, mut at: F) -> Result<Option<(BeamformingState, CrlbValue)>>
where
    F: FnMut(f64) -> BeamformingState,
{
    let mut t = 1.0;
    for _ in 0..=halvings {
        let bf = at(t);
        match ctx.crlb(&bf) {
            Ok(c) if c.total <= prev_total => return Ok(Some((bf, c))),
            Ok(_) | Err(JlboError::SingularFim(_)) => {}
            Err(e) => return Err(e),
        }
        t *= 0.5;
    }
    Ok(None)
}

/// `rounds` passes of a beam update followed by a phase update, each
/// surrogate rebuilt at the current point.
pub fn design_beams(bf0: &BeamformingState, ctx: &BeamContext, opts: &BeamformerOptions) -> Result<BeamformerOutcome> {
    check_context(bf0, ctx)?;
    let initial = ctx.crlb(bf0)?;
    let mut bf = bf0.clone();
    let mut current = initial;
    let mut trace = Vec::with_capacity(opts.rounds);
    let mut surrogate_steps = Vec::new();
    for round in 1..=opts.rounds {
        let sw = build_surrogate_w(&bf, ctx)?;
        let wu = update_w(&bf.w, &sw, &opts.line_search)?;
        surrogate_steps.push((wu.surrogate_before, wu.surrogate_after));
        let prev = bf.clone();
        let w_res = safeguard(current.total, opts.safeguard_halvings, ctx, |t| BeamformingState {
            w: prev.w.iter().zip(&wu.w).map(|(a, b)| unit(blend(a, b, t))).collect(),
            theta: prev.theta.clone(),
        })?;
        let w_accepted = w_res.is_some();
        if let Some((b, c)) = w_res {
            bf = b;
            current = c;
        }

        let (penalty_residual, theta_slope, theta_accepted) = if opts.optimize_theta {
            let st = build_surrogate_theta(&bf, ctx)?;
            let tu = update_theta(&bf.theta, &st, &opts.line_search, &opts.penalty)?;
            surrogate_steps.extend(tu.steps.iter().copied());
            let prev = bf.clone();
            let t_res = safeguard(current.total, opts.safeguard_halvings, ctx, |t| BeamformingState {
                w: prev.w.clone(),
                theta: unit_modulus(blend(&prev.theta, &tu.theta, t), &prev.theta),
            })?;
            let accepted = t_res.is_some();
            if let Some((b, c)) = t_res {
                bf = b;
                current = c;
            }
            (tu.residual, tu.max_slope, accepted)
        } else {
            (bf.modulus_residual(), 0.0, false)
        };
        trace.push(BeamformerRound {
            round,
            crlb1: current.crlb1,
            crlb2: current.crlb2,
            total: current.total,
            penalty_residual,
            w_slope: wu.max_slope,
            theta_slope,
            w_accepted,
            theta_accepted,
        });
    }
    Ok(BeamformerOutcome {
        bf,
        initial,
        final_crlb: current,
        trace,
        surrogate_steps,
    })
}

/// Writes `round,crlb1,crlb2,total,penalty_residual` rows.
pub fn write_beamformer_trace<W: Write>(rows: &[BeamformerRound], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["round", "crlb1", "crlb2", "total", "penalty_residual"])
        .map_err(|e| JlboError::Parse(e.to_string()))?;
    for r in rows {
        w.write_record([
            r.round.to_string(),
            format!("{:e}", r.crlb1),
            format!("{:e}", r.crlb2),
            format!("{:e}", r.total),
            format!("{:e}", r.penalty_residual),
        ])
        .map_err(|e| JlboError::Parse(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{complex_normal, prior_variances, sample_gains, GainRealization};
    use crate::geometry::{sample_scene, SceneConfig};
    use crate::signal::tests::small_link;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Instance {
        scene: Scene,
        gains: GainRealization,
        bf: BeamformingState,
        link: LinkConfig,
    }

    fn instance(seed: u64) -> Instance {
        let link = small_link();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = sample_scene(&SceneConfig::new(link.layout, [200.0, 200.0]), &mut rng).unwrap();
        let (vg, vh) = prior_variances(&scene).unwrap();
        let gains = sample_gains(&vg, &vh, &mut rng).unwrap();
        let bf = BeamformingState::random(&link, &mut rng);
        Instance { scene, gains, bf, link }
    }

    fn ctx<'a>(i: &'a Instance, sigma2: f64) -> BeamContext<'a> {
        BeamContext {
            scene: &i.scene,
            g: &i.gains.g,
            h: &i.gains.h,
            var_g: &i.gains.var_g,
            var_h: &i.gains.var_h,
            sigma2,
            link: &i.link,
            bound: BoundKind::Expected,
        }
    }

    fn is_psd(m: &DMatrix<C64>) -> bool {
        let (vals, _) = crate::linalg::hermitian_eigen(m).unwrap();
        (m - m.adjoint()).norm() <= 1e-10 * m.norm() && vals[0] >= -1e-10 * vals[vals.len() - 1].abs()
    }

    #[test]
    fn surrogates_touch_the_bound() {
        let i = instance(1);
        let c = ctx(&i, 1e-20);
        let crlb = c.crlb(&i.bf).unwrap();
        let target = crlb.total / (c.sigma2 * c.sigma2);
        let sw = build_surrogate_w(&i.bf, &c).unwrap();
        assert!((-sw.value(&i.bf.w) - target).abs() < 1e-8 * target);
        let st = build_surrogate_theta(&i.bf, &c).unwrap();
        assert!((-st.value(std::slice::from_ref(&i.bf.theta)) - target).abs() < 1e-8 * target);
        assert!(sw.blocks.iter().all(is_psd));
        assert!(is_psd(&st.blocks[0]));
    }

    #[test]
    fn surrogate_blocks_scale_inversely_with_noise() {
        let i = instance(2);
        let a = build_surrogate_w(&i.bf, &ctx(&i, 1e-20)).unwrap();
        let b = build_surrogate_w(&i.bf, &ctx(&i, 2e-20)).unwrap();
        for (x, y) in a.blocks.iter().zip(&b.blocks) {
            assert!((x - y * C64::new(2.0, 0.0)).norm() <= 1e-12 * x.norm());
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let i = instance(3);
        let sw = build_surrogate_w(&i.bf, &ctx(&i, 1e-20)).unwrap();
        let p = &sw.blocks[0];
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let x = DVector::from_fn(p.nrows(), |_, _| complex_normal(&mut rng, 1.0));
        let dir = DVector::from_fn(p.nrows(), |_, _| complex_normal(&mut rng, 1.0));
        let g = rayleigh_gradient(p, &x, 1.0);
        let h = 1e-6;
        let fd = (rayleigh(p, &(&x + &dir * C64::new(h, 0.0)), 1.0) - rayleigh(p, &(&x - &dir * C64::new(h, 0.0)), 1.0)) / (2.0 * h);
        let an = 2.0 * dir.dotc(&g).re;
        assert!((fd - an).abs() < 1e-5 * an.abs().max(1e-300), "fd {fd:e} an {an:e}");
        let th = i.bf.theta.clone();
        let st = build_surrogate_theta(&i.bf, &ctx(&i, 1e-20)).unwrap();
        let pt = &st.blocks[0];
        let scaled = &th * C64::new(1.1, 0.0);
        let eta = 3.0 * rayleigh(pt, &th, th.len() as f64).abs();
        let g = theta_gradient(pt, &scaled, eta);
        let dir = DVector::from_fn(th.len(), |_, _| complex_normal(&mut rng, 1.0));
        let fd = (theta_objective(pt, &(&scaled + &dir * C64::new(h, 0.0)), eta)
            - theta_objective(pt, &(&scaled - &dir * C64::new(h, 0.0)), eta))
            / (2.0 * h);
        let an = 2.0 * dir.dotc(&g).re;
        assert!((fd - an).abs() < 1e-5 * an.abs(), "fd {fd:e} an {an:e}");
    }

    #[test]
    fn beam_update_descends_and_stays_feasible() {
        let i = instance(4);
        let sw = build_surrogate_w(&i.bf, &ctx(&i, 1e-20)).unwrap();
        let u = update_w(&i.bf.w, &sw, &LineSearchParams::default()).unwrap();
        assert!(u.max_slope <= 0.0);
        assert!(u.surrogate_after <= u.surrogate_before);
        assert!(u.w.iter().all(|w| w.norm() <= 1.0 + 1e-12));
    }

    #[test]
    fn principal_beams_are_a_fixed_point() {
        let i = instance(5);
        let sw = build_surrogate_w(&i.bf, &ctx(&i, 1e-20)).unwrap();
        let w: Vec<DVector<C64>> = sw.blocks.iter().map(|p| principal_eigvec(p).unwrap().1).collect();
        let u = update_w(&w, &sw, &LineSearchParams::default()).unwrap();
        for (a, b) in u.w.iter().zip(&w) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn phase_update_projects_to_unit_modulus() {
        let i = instance(6);
        let st = build_surrogate_theta(&i.bf, &ctx(&i, 1e-20)).unwrap();
        let u = update_theta(&i.bf.theta, &st, &LineSearchParams::default(), &PenaltySchedule::default()).unwrap();
        assert!(u.theta.iter().all(|t| (t.norm() - 1.0).abs() <= 1e-15));
        assert!(u.residual < 1e-3);
        assert!(u.steps.iter().all(|(a, b)| b <= a));
        assert!(u.max_slope <= 0.0);
    }

    #[test]
    fn single_element_penalty_gradient() {
        let p = DMatrix::from_element(1, 1, C64::new(2.0, 0.0));
        let th = DVector::from_element(1, C64::from_polar(1.5, 0.3));
        let g = theta_gradient(&p, &th, 4.0);
        // The quotient is constant for a scalar, so only the penalty remains.
        let expect = th[0] * (4.0 * 0.5 / 1.5);
        assert!((g[0] - expect).norm() < 1e-14);
    }

    #[test]
    fn design_never_raises_the_bound() {
        let i = instance(7);
        let c = ctx(&i, 1e-20);
        let out = design_beams(&i.bf, &c, &BeamformerOptions::default()).unwrap();
        let mut last = out.initial.total;
        for r in &out.trace {
            assert!(r.total <= last * (1.0 + 1e-9));
            assert!(r.w_slope <= 0.0 && r.theta_slope <= 0.0);
            last = r.total;
        }
        assert!(out.surrogate_steps.iter().all(|(a, b)| b <= a));
        assert!(out.bf.modulus_residual() <= 1e-15);
        assert!(out.bf.w.iter().all(|w| w.norm() <= 1.0 + 1e-12));
        let mut buf = Vec::new();
        write_beamformer_trace(&out.trace, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), out.trace.len() + 1);
    }

    #[test]
    fn designed_beams_beat_random_draws() {
        let i = instance(8);
        let sig = i.gains.g.norm_squared() * i.gains.h.norm_squared();
        let c = ctx(&i, sig * 10f64.powf(-1.5));
        let out = design_beams(&i.bf, &c, &BeamformerOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let best = (0..50)
            .map(|_| c.crlb(&BeamformingState::random(&i.link, &mut rng)).unwrap().total)
            .fold(f64::INFINITY, f64::min);
        assert!(out.final_crlb.total < best, "designed {:e} best random {best:e}", out.final_crlb.total);
    }

    #[test]
    fn instantaneous_surrogates_touch_the_bound() {
        let i = instance(11);
        let c = BeamContext { bound: BoundKind::Instantaneous, ..ctx(&i, 1e-20) };
        let crlb = c.crlb(&i.bf).unwrap();
        let target = crlb.total / (c.sigma2 * c.sigma2);
        let sw = build_surrogate_w(&i.bf, &c).unwrap();
        // The joint FIM carries the gain columns, so its inverse loses more
        // digits than the location block alone.
        let got = -sw.value(&i.bf.w);
        assert!((got - target).abs() < 1e-6 * target, "{got:e} {target:e}");
        let st = build_surrogate_theta(&i.bf, &c).unwrap();
        assert!((-st.value(std::slice::from_ref(&i.bf.theta)) - target).abs() < 1e-6 * target);
        assert!(sw.blocks.iter().all(is_psd));
    }

    #[test]
    fn instantaneous_design_never_raises_the_bound() {
        let i = instance(12);
        let c = BeamContext { bound: BoundKind::Instantaneous, ..ctx(&i, 1e-20) };
        let out = design_beams(&i.bf, &c, &BeamformerOptions::default()).unwrap();
        let mut last = out.initial.total;
        for r in &out.trace {
            assert!(r.total <= last * (1.0 + 1e-9));
            last = r.total;
        }
        assert!(out.final_crlb.total.is_finite());
        assert!(out.bf.modulus_residual() <= 1e-15);
    }
}
