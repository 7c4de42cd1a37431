//! Gauss-Newton location estimation with Armijo backtracking.
//!
//! Each step linearizes the model signal around the current location vector,
//! solves the real-stacked linearized least-squares problem by truncated SVD
//! and backtracks on the exact residual. The two halves of the location
//! vector are updated alternately: the RIS half first, then the UE half.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::C64;
use crate::error::{JlboError, Result};
use crate::geometry::{unpack_kappa, with_half, Half, LocationParams, Scene};
use crate::linalg::{damped_solve_real, pinv_solve_real, rank_real, real_stack_matrix, real_stack_vector, stack_rows, stack_vectors};
use crate::sensitivity::single_half;
use crate::signal::{gamma_matrix, lambda_matrix, model_rx, BeamformingState, LinkConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSearchParams {
    pub armijo_a: f64,
    pub shrink: f64,
    pub initial: f64,
    pub max_backtracks: usize,
}

impl Default for LineSearchParams {
    fn default() -> Self {
        LineSearchParams {
            armijo_a: 1e-4,
            shrink: 0.5,
            initial: 1.0,
            max_backtracks: 30,
        }
    }
}

impl LineSearchParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.armijo_a > 0.0 && self.armijo_a < 1.0) || !(self.shrink > 0.0 && self.shrink < 1.0) || !(self.initial > 0.0) {
            return Err(JlboError::InvalidConfig(format!("invalid line-search parameters {self:?}")));
        }
        Ok(())
    }
}

/// Order in which the two halves of the location vector are stepped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocationSchedule {
    /// RIS half, then UE half, each with its own line search.
    Alternating,
    /// Both halves in one stacked Gauss-Newton step.
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocationOptions {
    pub tol: f64,
    pub max_iters: usize,
    pub line_search: LineSearchParams,
    /// Scale Jacobian columns to unit norm before the pseudo-inverse.
    pub precondition: bool,
    pub schedule: LocationSchedule,
    /// Initial Levenberg-Marquardt weight of the joint location and gain
    /// fit, relative to the largest squared singular value; 0 is plain
    /// Gauss-Newton.
    pub damping: f64,
}

impl Default for LocationOptions {
    fn default() -> Self {
        LocationOptions {
            tol: 1e-6,
            max_iters: 100,
            line_search: LineSearchParams::default(),
            precondition: false,
            schedule: LocationSchedule::Joint,
            damping: 0.0,
        }
    }
}

/// Fixed quantities of one location solve.
#[derive(Debug, Clone, Copy)]
pub struct LocationContext<'a> {
    /// Supplies the known BS positions and orientations.
    pub template: &'a Scene,
    /// Beams of each pilot burst; `y` stacks the bursts in this order.
    pub bf: &'a [BeamformingState],
    pub g: &'a DVector<C64>,
    pub h: &'a DVector<C64>,
    pub link: &'a LinkConfig,
    pub options: LocationOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocationIterate {
    pub kappa: LocationParams,
    pub objective: f64,
    pub step: f64,
    pub eta_norm: f64,
    pub iteration: usize,
    pub stalled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JacobianBlock {
    pub half: Half,
    pub j: DMatrix<C64>,
}

/// `d (Gamma(kappa2) h) / d kappa2`.
pub fn jacobian_gamma_h(
    kappa2: &[f64],
    bf: &BeamformingState,
    g: &DVector<C64>,
    h: &DVector<C64>,
    template: &Scene,
    link: &LinkConfig,
) -> Result<JacobianBlock> {
    let scene = with_half(template, Half::Ris, kappa2)?;
    let d = single_half(&scene, bf, g, link, Half::Ris)?;
    Ok(JacobianBlock { half: Half::Ris, j: d.jacobian(h) })
}

/// `d (Lambda(kappa1) g) / d kappa1`.
pub fn jacobian_lambda_g(
    kappa1: &[f64],
    bf: &BeamformingState,
    g: &DVector<C64>,
    h: &DVector<C64>,
    template: &Scene,
    link: &LinkConfig,
) -> Result<JacobianBlock> {
    let scene = with_half(template, Half::Ue, kappa1)?;
    let d = single_half(&scene, bf, h, link, Half::Ue)?;
    Ok(JacobianBlock { half: Half::Ue, j: d.jacobian(g) })
}

/// `||y - Gamma(kappa) h||^2`; `None` when the geometry is degenerate.
pub fn residual_objective(y: &DVector<C64>, kappa: &LocationParams, ctx: &LocationContext) -> Result<Option<f64>> {
    let scene = unpack_kappa(kappa, ctx.template)?;
    match stacked_model(&scene, ctx.g, ctx.h, ctx) {
        Ok(s) => Ok(Some((y - s).norm_squared())),
        Err(JlboError::Geometry(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn stacked_model(scene: &Scene, g: &DVector<C64>, h: &DVector<C64>, ctx: &LocationContext) -> Result<DVector<C64>> {
    let parts = ctx
        .bf
        .iter()
        .map(|bf| model_rx(scene, g, h, bf, ctx.link))
        .collect::<Result<Vec<_>>>()?;
    Ok(stack_vectors(&parts))
}

/// Gauss-Newton direction over the halves in `blocks` at `kappa`, indexed
/// like the full location vector.
pub(crate) struct Direction {
    pub eta: Vec<f64>,
    pub slope: f64,
    pub objective: f64,
    pub rank: usize,
    pub active: usize,
}

/// Model signal and real-stacked Jacobian columns of the active
/// coordinates of `blocks`, tagged with their index in the location vector.
type Columns = Vec<(usize, DVector<f64>)>;

fn kappa_columns(blocks: &[Half], scene: &Scene, g: &DVector<C64>, h: &DVector<C64>, ctx: &LocationContext) -> Result<(DVector<C64>, Columns)> {
    let layout = ctx.link.layout;
    let mut cols = Vec::new();
    let mut model = None;
    for &half in blocks {
        let (other, own) = match half {
            Half::Ris => (g, h),
            Half::Ue => (h, g),
        };
        let mut models = Vec::with_capacity(ctx.bf.len());
        let mut jacs = Vec::with_capacity(ctx.bf.len());
        let mut kappa_idx = Vec::new();
        for bf in ctx.bf {
            let design = single_half(scene, bf, other, ctx.link, half)?;
            models.push(&design.model * own);
            jacs.push(design.jacobian(own));
            kappa_idx = design.kappa_idx.clone();
        }
        if model.is_none() {
            model = Some(stack_vectors(&models));
        }
        let jr = real_stack_matrix(&stack_rows(&jacs));
        for (c, &k) in kappa_idx.iter().enumerate() {
            if layout.is_active(k) {
                cols.push((k, jr.column(c).into_owned()));
            }
        }
    }
    let model = model.ok_or_else(|| JlboError::InvalidConfig("no location block selected".into()))?;
    Ok((model, cols))
}

pub(crate) fn gauss_newton_direction(blocks: &[Half], y: &DVector<C64>, kappa: &LocationParams, ctx: &LocationContext) -> Result<Direction> {
    let scene = unpack_kappa(kappa, ctx.template)?;
    let layout = ctx.link.layout;
    let (model, cols) = kappa_columns(blocks, &scene, ctx.g, ctx.h, ctx)?;
    let resid = y - model;
    let objective = resid.norm_squared();
    let mut jr = DMatrix::<f64>::zeros(2 * resid.len(), cols.len());
    let mut scale = vec![1.0; cols.len()];
    for (q, (_, col)) in cols.iter().enumerate() {
        let nrm = col.norm();
        if ctx.options.precondition && nrm > 0.0 {
            scale[q] = 1.0 / nrm;
        }
        jr.set_column(q, &(col * scale[q]));
    }
    let er = real_stack_vector(&resid);
    let sol = pinv_solve_real(&jr, &er)?;
    let slope = -2.0 * er.dot(&(&jr * &sol.x));
    let mut eta = vec![0.0; layout.kappa_len()];
    for (q, (k, _)) in cols.iter().enumerate() {
        eta[*k] = sol.x[q] * scale[q];
    }
    Ok(Direction {
        eta,
        slope,
        objective,
        rank: sol.rank,
        active: cols.len(),
    })
}

/// One damped Gauss-Newton step on `half`.
pub fn sca_location_step(half: Half, iterate: &LocationIterate, y: &DVector<C64>, ctx: &LocationContext) -> Result<LocationIterate> {
    block_step(&[half], half.name(), iterate, y, ctx)
}

/// One damped Gauss-Newton step on both halves at once.
pub fn joint_location_step(iterate: &LocationIterate, y: &DVector<C64>, ctx: &LocationContext) -> Result<LocationIterate> {
    block_step(&[Half::Ris, Half::Ue], "kappa", iterate, y, ctx)
}

fn block_step(blocks: &[Half], name: &'static str, iterate: &LocationIterate, y: &DVector<C64>, ctx: &LocationContext) -> Result<LocationIterate> {
    let ls = ctx.options.line_search;
    let dir = gauss_newton_direction(blocks, y, &iterate.kappa, ctx)?;
    if dir.rank < dir.active {
        return Err(JlboError::RankDeficient {
            half: name,
            rank: dir.rank,
            cols: dir.active,
        });
    }
    let f0 = dir.objective;
    let eta_norm = dir.eta.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut next = LocationIterate {
        kappa: iterate.kappa.clone(),
        objective: f0,
        step: 0.0,
        eta_norm,
        iteration: iterate.iteration + 1,
        stalled: false,
    };
    if eta_norm == 0.0 || !(dir.slope < 0.0) {
        return Ok(next);
    }
    let mut lambda = ls.initial;
    for _ in 0..=ls.max_backtracks {
        let mut cand = iterate.kappa.clone();
        for (k, e) in cand.kappa.iter_mut().zip(&dir.eta) {
            *k += lambda * e;
        }
        if let Some(f) = residual_objective(y, &cand, ctx)? {
            if f <= f0 + ls.armijo_a * lambda * dir.slope {
                next.kappa = cand;
                next.objective = f;
                next.step = lambda;
                return Ok(next);
            }
        }
        lambda *= ls.shrink;
    }
    next.stalled = true;
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocationTraceRow {
    pub iteration: usize,
    /// `None` for a joint step.
    pub half: Option<Half>,
    pub objective: f64,
    pub step: f64,
    pub eta_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocationEstimate {
    pub params: LocationParams,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<LocationTraceRow>,
}

/// Runs rounds of location steps until the relative objective change drops
/// below `tol` or `max_iters` rounds have run. An alternating round steps the
/// RIS half and then the UE half.
pub fn estimate_location(y: &DVector<C64>, init: &LocationParams, ctx: &LocationContext) -> Result<LocationEstimate> {
    ctx.options.line_search.validate()?;
    let rows = ctx.link.rows() * ctx.bf.len();
    if ctx.bf.is_empty() || y.len() != rows {
        return Err(JlboError::Dimension(format!("observation length {} != {rows}", y.len())));
    }
    let f_init = residual_objective(y, init, ctx)?
        .ok_or_else(|| JlboError::Geometry("initial location vector is degenerate".into()))?;
    let floor = 1e-28 * y.norm_squared();
    let mut it = LocationIterate {
        kappa: init.clone(),
        objective: f_init,
        step: 0.0,
        eta_norm: 0.0,
        iteration: 0,
        stalled: false,
    };
    let mut trace = Vec::new();
    let mut converged = false;
    let mut rounds = 0;
    while rounds < ctx.options.max_iters {
        rounds += 1;
        let before = it.objective;
        let mut all_stalled = true;
        let blocks: &[Option<Half>] = match ctx.options.schedule {
            LocationSchedule::Alternating => &[Some(Half::Ris), Some(Half::Ue)],
            LocationSchedule::Joint => &[None],
        };
        for &half in blocks {
            let mut next = match half {
                Some(h) => sca_location_step(h, &it, y, ctx)?,
                None => joint_location_step(&it, y, ctx)?,
            };
            next.iteration = rounds;
            trace.push(LocationTraceRow {
                iteration: rounds,
                half,
                objective: next.objective,
                step: next.step,
                eta_norm: next.eta_norm,
            });
            all_stalled &= next.stalled;
            it = next;
        }
        let change = (before - it.objective).abs() / before.max(f64::MIN_POSITIVE);
        if change < ctx.options.tol || it.objective <= floor {
            converged = true;
            break;
        }
        if all_stalled {
            break;
        }
    }
    Ok(LocationEstimate {
        params: it.kappa,
        objective: it.objective,
        iterations: rounds,
        converged,
        trace,
    })
}

/// Start point: `truth` with every active coordinate shifted uniformly
/// within `pos_radius` (meters) or `angle_radius` (radians, orientations).
pub fn perturbed_start<R: Rng + ?Sized>(
    truth: &LocationParams,
    pos_radius: f64,
    angle_radius: f64,
    rng: &mut R,
) -> Result<LocationParams> {
    if !(pos_radius >= 0.0 && angle_radius >= 0.0) || !pos_radius.is_finite() || !angle_radius.is_finite() {
        return Err(JlboError::InvalidConfig(format!(
            "start radii must be finite and non-negative, got {pos_radius} m and {angle_radius} rad"
        )));
    }
    let lay = truth.layout;
    let mut out = truth.clone();
    for (i, v) in out.kappa.iter_mut().enumerate() {
        if !lay.is_active(i) {
            continue;
        }
        let angle = i == lay.ris_orientation_index() || i == lay.ue_orientation_index();
        let r = if angle { angle_radius } else { pos_radius };
        *v += r * (2.0 * rng.random::<f64>() - 1.0);
    }
    Ok(out)
}

/// Location vector and gains fitted together.
#[derive(Debug, Clone, PartialEq)]
pub struct JointEstimate {
    pub params: LocationParams,
    pub g: DVector<C64>,
    pub h: DVector<C64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn push_complex_columns(cols: &mut Vec<DVector<f64>>, m: &DMatrix<C64>) {
    let i = C64::new(0.0, 1.0);
    for c in 0..m.ncols() {
        let a = m.column(c).into_owned();
        cols.push(real_stack_vector(&a));
        cols.push(real_stack_vector(&(a * i)));
    }
}

fn add_complex(v: &DVector<C64>, d: &[f64], t: f64) -> DVector<C64> {
    DVector::from_fn(v.len(), |k, _| v[k] + C64::new(d[2 * k], d[2 * k + 1]) * t)
}

/// Gauss-Newton on the active location coordinates and the real and
/// imaginary parts of `g` and `h` at once, starting from the gains in
/// `ctx`. Columns are scaled to unit norm; the common complex scale shared
/// by `g` and `h` is left to the minimum-norm solution.
pub fn estimate_location_and_gains(y: &DVector<C64>, init: &LocationParams, ctx: &LocationContext) -> Result<JointEstimate> {
    let ls = ctx.options.line_search;
    ls.validate()?;
    let rows = ctx.link.rows() * ctx.bf.len();
    if ctx.bf.is_empty() || y.len() != rows {
        return Err(JlboError::Dimension(format!("observation length {} != {rows}", y.len())));
    }
    let mut kappa = init.clone();
    let mut g = ctx.g.clone();
    let mut h = ctx.h.clone();
    let objective_at = |kappa: &LocationParams, g: &DVector<C64>, h: &DVector<C64>| -> Result<Option<f64>> {
        let scene = unpack_kappa(kappa, ctx.template)?;
        match stacked_model(&scene, g, h, ctx) {
            Ok(m) => Ok(Some((y - m).norm_squared())),
            Err(JlboError::Geometry(_)) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let mut objective = objective_at(&kappa, &g, &h)?
        .ok_or_else(|| JlboError::Geometry("initial location vector is degenerate".into()))?;
    let floor = 1e-28 * y.norm_squared();
    let mut converged = objective <= floor;
    let mut iterations = 0;
    let mut mu = ctx.options.damping;
    while !converged && iterations < ctx.options.max_iters {
        iterations += 1;
        let scene = unpack_kappa(&kappa, ctx.template)?;
        let (model, kcols) = kappa_columns(&[Half::Ris, Half::Ue], &scene, &g, &h, ctx)?;
        let resid = y - model;
        let mut cols: Vec<DVector<f64>> = kcols.iter().map(|(_, c)| c.clone()).collect();
        let nk = cols.len();
        let lam = stack_rows(&ctx.bf.iter().map(|bf| lambda_matrix(&scene, bf, &h, ctx.link)).collect::<Result<Vec<_>>>()?);
        let gam = stack_rows(&ctx.bf.iter().map(|bf| gamma_matrix(&scene, bf, &g, ctx.link)).collect::<Result<Vec<_>>>()?);
        push_complex_columns(&mut cols, &lam);
        push_complex_columns(&mut cols, &gam);
        let scale: Vec<f64> = cols.iter().map(|c| c.norm()).map(|n| if n > 0.0 { 1.0 / n } else { 1.0 }).collect();
        let jr = DMatrix::from_fn(2 * y.len(), cols.len(), |r, c| cols[c][r] * scale[c]);
        let kappa_rank = rank_real(&jr.columns(0, nk).into_owned());
        if kappa_rank < nk {
            return Err(JlboError::RankDeficient {
                half: "kappa",
                rank: kappa_rank,
                cols: nk,
            });
        }
        let er = real_stack_vector(&resid);
        let sol = damped_solve_real(&jr, &er, mu)?;
        let slope = -2.0 * er.dot(&(&jr * &sol.x));
        if !(slope < 0.0) {
            converged = true;
            break;
        }
        let d: Vec<f64> = sol.x.iter().zip(&scale).map(|(x, s)| x * s).collect();
        let (dk, rest) = d.split_at(nk);
        let (dg, dh) = rest.split_at(2 * g.len());
        let mut lambda = ls.initial;
        let mut accepted = None;
        for _ in 0..=ls.max_backtracks {
            let mut cand = kappa.clone();
            for ((k, _), v) in kcols.iter().zip(dk) {
                cand.kappa[*k] += lambda * v;
            }
            let cg = add_complex(&g, dg, lambda);
            let ch = add_complex(&h, dh, lambda);
            if let Some(f) = objective_at(&cand, &cg, &ch)? {
                if f <= objective + ls.armijo_a * lambda * slope {
                    accepted = Some((cand, cg, ch, f));
                    break;
                }
            }
            lambda *= ls.shrink;
        }
        let Some((k1, g1, h1, f1)) = accepted else {
            break;
        };
        if mu > 0.0 {
            mu = if lambda == ls.initial { mu / 3.0 } else { (mu * 4.0).min(1.0) };
        }
        let change = (objective - f1).abs() / objective.max(f64::MIN_POSITIVE);
        kappa = k1;
        g = g1;
        h = h1;
        objective = f1;
        if change < ctx.options.tol || objective <= floor {
            converged = true;
        }
    }
    Ok(JointEstimate {
        params: kappa,
        g,
        h,
        objective,
        iterations,
        converged,
    })
}

/// Writes `iteration,half,objective,step,eta_norm` rows.
pub fn write_location_trace<W: Write>(rows: &[LocationTraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "half", "objective", "step", "eta_norm"])
        .map_err(|e| JlboError::Parse(e.to_string()))?;
    for r in rows {
        w.write_record([
            r.iteration.to_string(),
            r.half.map_or("kappa", |h| h.name()).to_string(),
            format!("{:e}", r.objective),
            format!("{:e}", r.step),
            format!("{:e}", r.eta_norm),
        ])
        .map_err(|e| JlboError::Parse(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{prior_variances, sample_gains, ArrayConfig, GainRealization};
    use crate::geometry::{pack_kappa, sample_scene, Layout, SceneConfig};
    use crate::signal::noiseless_rx;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        scene: Scene,
        gains: GainRealization,
        truth: LocationParams,
        bf: Vec<BeamformingState>,
        link: LinkConfig,
    }

    fn link(ts: f64) -> LinkConfig {
        LinkConfig {
            array: ArrayConfig::half_wavelength(4, 2, 8, 2, 2, 28e9, ts),
            layout: Layout::new(2, 1, 1),
            n_pilots: 4,
        }
    }

    fn fixture(seed: u64, link: LinkConfig) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = sample_scene(&SceneConfig::new(link.layout, [100.0, 100.0]), &mut rng).unwrap();
        let (vg, vh) = prior_variances(&scene).unwrap();
        let gains = sample_gains(&vg, &vh, &mut rng).unwrap();
        let truth = pack_kappa(&scene).unwrap();
        let bf = vec![BeamformingState::random(&link, &mut rng)];
        Fixture {
            scene,
            gains,
            truth,
            bf,
            link,
        }
    }

    impl Fixture {
        fn ctx(&self, options: LocationOptions) -> LocationContext<'_> {
            LocationContext {
                template: &self.scene,
                bf: &self.bf,
                g: &self.gains.g,
                h: &self.gains.h,
                link: &self.link,
                options,
            }
        }

        fn y(&self) -> DVector<C64> {
            noiseless_rx(&self.scene, &self.gains, &self.bf[0], &self.link).unwrap()
        }
    }

    fn max_abs(m: &DMatrix<C64>) -> f64 {
        m.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    #[test]
    fn jacobians_match_central_differences() {
        for seed in 0..10 {
            let f = fixture(seed, link(1e-7));
            let bf = &f.bf[0];
            for half in [Half::Ris, Half::Ue] {
                let k = f.truth.half(half);
                let (jac, model): (DMatrix<C64>, Box<dyn Fn(&[f64]) -> DVector<C64>>) = match half {
                    Half::Ris => (
                        jacobian_gamma_h(&k, bf, &f.gains.g, &f.gains.h, &f.scene, &f.link).unwrap().j,
                        Box::new(|v: &[f64]| {
                            let s = with_half(&f.scene, Half::Ris, v).unwrap();
                            gamma_matrix(&s, bf, &f.gains.g, &f.link).unwrap() * &f.gains.h
                        }),
                    ),
                    Half::Ue => (
                        jacobian_lambda_g(&k, bf, &f.gains.g, &f.gains.h, &f.scene, &f.link).unwrap().j,
                        Box::new(|v: &[f64]| {
                            let s = with_half(&f.scene, Half::Ue, v).unwrap();
                            lambda_matrix(&s, bf, &f.gains.h, &f.link).unwrap() * &f.gains.g
                        }),
                    ),
                };
                assert_eq!(jac.ncols(), k.len());
                let scale = max_abs(&jac);
                for c in 0..k.len() {
                    let step = 1e-6 * k[c].abs().max(1.0);
                    let (mut up, mut dn) = (k.clone(), k.clone());
                    up[c] += step;
                    dn[c] -= step;
                    let fd = (model(&up) - model(&dn)) / C64::new(2.0 * step, 0.0);
                    let err = (fd - jac.column(c)).camax();
                    assert!(err <= 1e-5 * scale, "seed {seed} {half:?} column {c}: {err:e} vs {scale:e}");
                }
            }
        }
    }

    #[test]
    fn truth_is_a_fixed_point_without_noise() {
        let f = fixture(1, link(1e-7));
        let y = f.y();
        let est = estimate_location(&y, &f.truth, &f.ctx(LocationOptions::default())).unwrap();
        assert!(est.converged);
        let drift = est.params.kappa.iter().zip(&f.truth.kappa).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(drift < 1e-9, "{drift:e}");
    }

    #[test]
    fn noiseless_recovery_from_a_perturbed_start() {
        let f = fixture(2, link(1e-6));
        let y = f.y();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let init = perturbed_start(&f.truth, 0.5, 0.05, &mut rng).unwrap();
        let opts = LocationOptions {
            max_iters: 50,
            tol: 0.0,
            ..LocationOptions::default()
        };
        let est = estimate_location(&y, &init, &f.ctx(opts)).unwrap();
        assert!(est.iterations <= 50);
        let err = est.params.kappa.iter().zip(&f.truth.kappa).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-4, "max error {err:e}");
    }

    #[test]
    fn objective_never_increases_along_the_trace() {
        for schedule in [LocationSchedule::Joint, LocationSchedule::Alternating] {
            let f = fixture(3, link(1e-7));
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let noise = DVector::from_fn(f.link.rows(), |_, _| crate::channel::complex_normal(&mut rng, 1e-3 * f.y().norm_squared() / f.link.rows() as f64));
            let y = f.y() + noise;
            let init = perturbed_start(&f.truth, 0.3, 0.01, &mut rng).unwrap();
            let opts = LocationOptions {
                schedule,
                max_iters: 20,
                ..LocationOptions::default()
            };
            let ctx = f.ctx(opts);
            let est = estimate_location(&y, &init, &ctx).unwrap();
            let mut prev = residual_objective(&y, &init, &ctx).unwrap().unwrap();
            for row in &est.trace {
                assert!(row.objective <= prev, "{row:?}");
                prev = row.objective;
            }
            assert_eq!(est.objective, prev);
        }
    }

    #[test]
    fn joint_fit_beats_the_location_only_fit() {
        let f = fixture(5, link(1e-7));
        let y = f.y();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let init = perturbed_start(&f.truth, 0.2, 0.004, &mut rng).unwrap();
        let g = f.gains.g.map(|v| v * C64::new(0.8, 0.1));
        let ctx = LocationContext { g: &g, ..f.ctx(LocationOptions::default()) };
        let start = residual_objective(&y, &init, &ctx).unwrap().unwrap();
        let joint = estimate_location_and_gains(&y, &init, &ctx).unwrap();
        let plain = estimate_location(&y, &init, &ctx).unwrap();
        assert!(joint.objective <= plain.objective);
        assert!(joint.objective < 1e-3 * start);
    }

    #[test]
    fn perturbed_start_respects_radii() {
        let f = fixture(7, link(1e-7));
        let lay = f.link.layout;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let p = perturbed_start(&f.truth, 0.5, 0.05, &mut rng).unwrap();
            for (i, (a, b)) in p.kappa.iter().zip(&f.truth.kappa).enumerate() {
                let d = (a - b).abs();
                if !lay.is_active(i) {
                    assert_eq!(d, 0.0);
                } else if i == lay.ris_orientation_index() || i == lay.ue_orientation_index() {
                    assert!(d <= 0.05);
                } else {
                    assert!(d <= 0.5);
                }
            }
        }
        assert_eq!(perturbed_start(&f.truth, 0.0, 0.0, &mut rng).unwrap(), f.truth);
        assert!(perturbed_start(&f.truth, -1.0, 0.0, &mut rng).is_err());
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let f = fixture(8, link(1e-7));
        let ctx = f.ctx(LocationOptions::default());
        let short = DVector::zeros(3);
        assert!(matches!(estimate_location(&short, &f.truth, &ctx), Err(JlboError::Dimension(_))));
        assert!(matches!(estimate_location_and_gains(&short, &f.truth, &ctx), Err(JlboError::Dimension(_))));
        let bad = LocationOptions {
            line_search: LineSearchParams { shrink: 1.5, ..LineSearchParams::default() },
            ..LocationOptions::default()
        };
        assert!(estimate_location(&f.y(), &f.truth, &f.ctx(bad)).is_err());
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let rows = [LocationTraceRow {
            iteration: 1,
            half: Some(Half::Ris),
            objective: 2.0,
            step: 0.5,
            eta_norm: 0.1,
        }];
        let mut buf = Vec::new();
        write_location_trace(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
    }
}
