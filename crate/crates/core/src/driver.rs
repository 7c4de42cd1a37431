//! Block-coordinate loop over gain estimation, beam design and location
//! estimation, plus the identifiability checks run before it.
//!
//! Each outer iteration acquires pilots with the current beams, estimates
//! `h` then `g` by least squares, designs the beams for the next
//! acquisition and refines the location vector on the current pilots.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::beamformer::{design_beams, BeamContext, BeamformerOptions};
use crate::channel::{complex_normal, GainRealization, C64};
use crate::error::{JlboError, Result};
use crate::fim::BoundKind;
use crate::gains::ls_estimate;
use crate::geometry::{unpack_kappa, Half, LocationParams, Scene};
use crate::harness::nmse;
use crate::linalg::{rank_real, real_stack_matrix, real_stack_vector, stack_rows, stack_vectors};
use crate::location::{estimate_location, estimate_location_and_gains, jacobian_gamma_h, jacobian_lambda_g, LocationContext, LocationOptions};
use crate::signal::{gamma_matrix, lambda_matrix, model_rx, noiseless_rx, random_phases, random_unit_vector, BeamformingState, LinkConfig, ObservationBlock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankCheck {
    pub half: Half,
    pub rank: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    /// Probe Jacobians have full column rank over the active coordinates.
    pub rank_ok: bool,
    pub ranks: Vec<RankCheck>,
    /// `None` when no noise sample was supplied.
    pub noise_zero_mean_ok: Option<bool>,
    /// `|mean| / (sigma / sqrt(n))` of the noise sample.
    pub noise_mean_score: Option<f64>,
    pub dimension_ok: bool,
    /// `N_S N_U N M`.
    pub observations: usize,
    /// `2 N (L + 1) + 3` for the larger of the two path counts.
    pub unknowns: usize,
}

impl AssumptionReport {
    pub fn all_ok(&self) -> bool {
        self.rank_ok && self.dimension_ok && self.noise_zero_mean_ok.unwrap_or(true)
    }
}

/// Operating point at which identifiability is probed.
#[derive(Debug, Clone, Copy)]
pub struct Probe<'a> {
    pub scene: &'a Scene,
    pub bf: &'a BeamformingState,
    pub g: &'a DVector<C64>,
    pub h: &'a DVector<C64>,
    /// Pure noise samples with variance `sigma2`.
    pub noise: Option<(&'a DVector<C64>, f64)>,
}

/// Real Jacobian of one half's model in its active location coordinates and
/// the real and imaginary parts of its own gains, columns scaled to unit norm.
fn probe_jacobian(half: Half, kappa: &[f64], p: &Probe, link: &LinkConfig) -> Result<DMatrix<f64>> {
    let lay = link.layout;
    let (jb, gains) = match half {
        Half::Ris => (
            jacobian_gamma_h(kappa, p.bf, p.g, p.h, p.scene, link)?,
            gamma_matrix(p.scene, p.bf, p.g, link)?,
        ),
        Half::Ue => (
            jacobian_lambda_g(kappa, p.bf, p.g, p.h, p.scene, link)?,
            lambda_matrix(p.scene, p.bf, p.h, link)?,
        ),
    };
    let idx = lay.half_indices(half);
    let act: Vec<usize> = (0..idx.len()).filter(|&c| lay.is_active(idx[c])).collect();
    let jr = real_stack_matrix(&jb.j);
    let mut cols: Vec<DVector<f64>> = act.iter().map(|&c| jr.column(c).into_owned()).collect();
    for c in 0..gains.ncols() {
        let a = gains.column(c).into_owned();
        cols.push(real_stack_vector(&a));
        cols.push(real_stack_vector(&(a * C64::new(0.0, 1.0))));
    }
    let rows = jr.nrows();
    Ok(DMatrix::from_fn(rows, cols.len(), |r, c| {
        let n = cols[c].norm();
        if n > 0.0 {
            cols[c][r] / n
        } else {
            0.0
        }
    }))
}

/// Pilot-count inequality, probe Jacobian ranks and a mean test on a noise
/// sample. Failures are reported, never raised.
pub fn validate_assumptions(link: &LinkConfig, probe: Option<&Probe>) -> AssumptionReport {
    let lay = link.layout;
    let observations = link.n_s() * link.array.n_ue * lay.n_bs * link.n_pilots;
    let unknowns = 2 * lay.n_bs * (lay.l1.max(lay.l2) + 1) + 3;
    let dimension_ok = link.n_pilots > 0 && observations >= unknowns;
    let mut ranks = Vec::new();
    let mut rank_ok = true;
    let mut noise_zero_mean_ok = None;
    let mut noise_mean_score = None;
    if let Some(p) = probe {
        if dimension_ok {
            for half in [Half::Ris, Half::Ue] {
                let kappa = match crate::geometry::pack_kappa(p.scene) {
                    Ok(k) => k.half(half),
                    Err(_) => {
                        rank_ok = false;
                        continue;
                    }
                };
                match probe_jacobian(half, &kappa, p, link) {
                    Ok(jr) => {
                        let rank = rank_real(&jr);
                        rank_ok &= rank == jr.ncols();
                        ranks.push(RankCheck { half, rank, cols: jr.ncols() });
                    }
                    Err(_) => rank_ok = false,
                }
            }
        } else {
            rank_ok = false;
        }
        if let Some((n, sigma2)) = p.noise {
            if !n.is_empty() && sigma2 > 0.0 {
                let mean = n.iter().sum::<C64>() / C64::new(n.len() as f64, 0.0);
                let score = mean.norm() / (sigma2 / n.len() as f64).sqrt();
                noise_mean_score = Some(score);
                noise_zero_mean_ok = Some(score < 4.0);
            }
        }
    }
    AssumptionReport {
        rank_ok,
        ranks,
        noise_zero_mean_ok,
        noise_mean_score,
        dimension_ok,
        observations,
        unknowns,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AssumptionPolicy {
    Refuse,
    WarnOnly,
}

/// Refuses the run on a failed pilot-count check unless warn-only.
pub fn enforce(report: &AssumptionReport, policy: AssumptionPolicy) -> Result<()> {
    if !report.dimension_ok && policy == AssumptionPolicy::Refuse {
        return Err(JlboError::AssumptionRefused(format!(
            "{} observations per slot cannot determine {} unknowns",
            report.observations, report.unknowns
        )));
    }
    Ok(())
}

/// Supplies pilots for the requested beams.
pub trait PilotSource {
    /// Observation and the beams it was actually taken with.
    fn acquire(&mut self, bf: &BeamformingState) -> Result<(ObservationBlock, BeamformingState)>;
}

/// A fixed observation; requested beams are ignored.
#[derive(Debug, Clone)]
pub struct RecordedPilots {
    pub obs: ObservationBlock,
    pub bf: BeamformingState,
}

impl PilotSource for RecordedPilots {
    fn acquire(&mut self, _bf: &BeamformingState) -> Result<(ObservationBlock, BeamformingState)> {
        Ok((self.obs.clone(), self.bf.clone()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    /// One noise draw reused by every acquisition of the slot.
    Frozen,
    /// A new draw per acquisition.
    Fresh,
}

/// Simulated pilots from a known scene and gains.
pub struct Simulator<R: Rng> {
    pub scene: Scene,
    pub gains: GainRealization,
    pub link: LinkConfig,
    pub sigma2: f64,
    pub slot: usize,
    pub mode: NoiseMode,
    rng: R,
    frozen: Option<DVector<C64>>,
}

impl<R: Rng> Simulator<R> {
    pub fn new(scene: Scene, gains: GainRealization, link: LinkConfig, sigma2: f64, mode: NoiseMode, rng: R) -> Result<Self> {
        if !(sigma2 >= 0.0) || !sigma2.is_finite() {
            return Err(JlboError::InvalidConfig(format!("noise variance must be non-negative, got {sigma2}")));
        }
        Ok(Simulator {
            scene,
            gains,
            link,
            sigma2,
            slot: 0,
            mode,
            rng,
            frozen: None,
        })
    }

    fn draw(&mut self) -> DVector<C64> {
        let n = self.link.rows();
        let s2 = self.sigma2;
        if s2 == 0.0 {
            return DVector::zeros(n);
        }
        match self.mode {
            NoiseMode::Fresh => DVector::from_fn(n, |_, _| complex_normal(&mut self.rng, s2)),
            NoiseMode::Frozen => {
                if self.frozen.is_none() {
                    self.frozen = Some(DVector::from_fn(n, |_, _| complex_normal(&mut self.rng, s2)));
                }
                self.frozen.clone().unwrap_or_else(|| DVector::zeros(n))
            }
        }
    }
}

impl<R: Rng> PilotSource for Simulator<R> {
    fn acquire(&mut self, bf: &BeamformingState) -> Result<(ObservationBlock, BeamformingState)> {
        let y = noiseless_rx(&self.scene, &self.gains, bf, &self.link)? + self.draw();
        Ok((
            ObservationBlock {
                y,
                sigma2: self.sigma2,
                slot: self.slot,
            },
            bf.clone(),
        ))
    }
}

/// How step 5 picks the next beams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BeamPolicy {
    /// Bound-minimizing beams and phases.
    Jlbo,
    /// Fresh random feasible beams and phases every iteration.
    Random,
    /// Bound-minimizing beams with the phases frozen at their start value.
    FixedRis,
}

impl BeamPolicy {
    pub fn tag(self) -> &'static str {
        match self {
            BeamPolicy::Jlbo => "jlbo",
            BeamPolicy::Random => "random",
            BeamPolicy::FixedRis => "fixed-ris",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JlboOptions {
    pub tol: f64,
    pub max_outer: usize,
    pub policy: BeamPolicy,
    pub beamformer: BeamformerOptions,
    pub location: LocationOptions,
    /// Step the gains along with the location vector in the location step.
    pub refine_gains: bool,
    /// Alternations of the `h` and `g` least-squares steps per outer
    /// iteration; stops early once the residual settles.
    pub gain_sweeps: usize,
    /// Fit every pilot burst acquired so far instead of only the latest.
    pub accumulate: bool,
    /// Record the wall time of each iteration; off keeps histories
    /// reproducible byte for byte.
    pub timing: bool,
    /// FIM form the beams are designed against and the bound is reported in.
    pub bound: BoundKind,
    /// Also run the location step from the initial location vector and keep
    /// whichever start fits the pilots better.
    pub restart_from_init: bool,
}

impl Default for JlboOptions {
    fn default() -> Self {
        JlboOptions {
            tol: 1e-5,
            max_outer: 30,
            policy: BeamPolicy::Jlbo,
            beamformer: BeamformerOptions::default(),
            location: LocationOptions::default(),
            refine_gains: true,
            gain_sweeps: 10,
            accumulate: true,
            timing: false,
            bound: BoundKind::Instantaneous,
            restart_from_init: true,
        }
    }
}

/// Known and prior quantities of one run.
#[derive(Debug, Clone, Copy)]
pub struct JlboProblem<'a> {
    /// Supplies the BS positions and orientations.
    pub template: &'a Scene,
    pub link: &'a LinkConfig,
    pub var_g: &'a [f64],
    pub var_h: &'a [f64],
    /// Noise variance assumed by the beam design.
    pub sigma2: f64,
    /// Ground truth, for error tracking only.
    pub truth: Option<&'a LocationParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JlboInit {
    pub kappa: LocationParams,
    pub g: DVector<C64>,
    pub bf: BeamformingState,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// `||y - model||^2` over the fitted bursts after the `h`, `g` and
    /// location steps.
    pub residual_h: f64,
    pub residual_g: f64,
    pub residual: f64,
    /// Bound at the beams used for this iteration's pilots.
    pub crlb_total: f64,
    pub nmse_position: Option<f64>,
    pub nmse_kappa: Option<f64>,
    pub location_iterations: usize,
    pub location_converged: bool,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JlboState {
    pub iteration: usize,
    pub h_hat: DVector<C64>,
    pub g_hat: DVector<C64>,
    /// Beams designed for the next acquisition.
    pub bf: BeamformingState,
    pub kappa_hat: LocationParams,
    pub history: Vec<IterationRecord>,
    pub converged: bool,
    pub diagnostics: Vec<String>,
}

/// Position and active-κ NMSE of `est` against `truth`.
pub fn location_errors(est: &LocationParams, truth: &LocationParams) -> Result<(f64, f64)> {
    let pos = nmse(&est.ue_position(), &truth.ue_position())?;
    let act: Vec<usize> = (0..truth.kappa.len()).filter(|&i| truth.layout.is_active(i)).collect();
    let e: Vec<f64> = act.iter().map(|&i| est.kappa[i]).collect();
    let t: Vec<f64> = act.iter().map(|&i| truth.kappa[i]).collect();
    Ok((pos, nmse(&e, &t)?))
}

fn at(iteration: usize) -> impl Fn(JlboError) -> JlboError {
    move |e| JlboError::AtIteration {
        iteration,
        source: Box::new(e),
    }
}

fn random_state<R: Rng + ?Sized>(link: &LinkConfig, theta: Option<&DVector<C64>>, rng: &mut R) -> BeamformingState {
    let w = (0..link.n_beams()).map(|_| random_unit_vector(link.array.n_tx, rng)).collect();
    let theta = theta.cloned().unwrap_or_else(|| random_phases(link.array.n_ris, rng));
    BeamformingState { w, theta }
}

/// Least-squares `h` then `g` over all bursts; returns the residual after
/// each.
fn gain_steps(
    y: &DVector<C64>,
    bursts: &[BeamformingState],
    kappa: &LocationParams,
    problem: &JlboProblem,
    g_hat: &mut DVector<C64>,
    h_hat: &mut DVector<C64>,
) -> Result<(f64, f64)> {
    let link = problem.link;
    let scene = unpack_kappa(kappa, problem.template)?;
    let gamma = stack_rows(&bursts.iter().map(|b| gamma_matrix(&scene, b, g_hat, link)).collect::<Result<Vec<_>>>()?);
    *h_hat = ls_estimate(y, &gamma)?.estimate;
    let residual_h = (y - &gamma * &*h_hat).norm_squared();
    let lambda = stack_rows(&bursts.iter().map(|b| lambda_matrix(&scene, b, h_hat, link)).collect::<Result<Vec<_>>>()?);
    *g_hat = ls_estimate(y, &lambda)?.estimate;
    let residual_g = (y - &lambda * &*g_hat).norm_squared();
    Ok((residual_h, residual_g))
}

/// Runs the outer loop until the relative change of the residual per burst
/// drops below `tol` or `max_outer` iterations have run.
pub fn run_jlbo<S: PilotSource, R: Rng + ?Sized>(
    source: &mut S,
    init: &JlboInit,
    problem: &JlboProblem,
    opts: &JlboOptions,
    rng: &mut R,
) -> Result<JlboState> {
    let link = problem.link;
    link.validate()?;
    init.bf.check(link)?;
    if init.g.len() != link.layout.n_gains_g() {
        return Err(JlboError::Dimension("initial g does not match the layout".into()));
    }
    let theta0 = init.bf.theta.clone();
    let mut kappa = init.kappa.clone();
    let mut g_hat = init.g.clone();
    let mut h_hat = DVector::zeros(link.layout.n_gains_h());
    let mut bf_next = init.bf.clone();
    let mut history = Vec::new();
    let mut diagnostics = Vec::new();
    let mut converged = false;
    let mut prev_residual: Option<f64> = None;
    let mut bursts_y: Vec<DVector<C64>> = Vec::new();
    let mut bursts_bf: Vec<BeamformingState> = Vec::new();
    for it in 1..=opts.max_outer {
        let started = opts.timing.then(std::time::Instant::now);
        let err = at(it);
        let (obs, bf) = source.acquire(&bf_next).map_err(&err)?;
        if obs.y.len() != link.rows() {
            return Err(err(JlboError::Dimension(format!("pilot block has {} rows, expected {}", obs.y.len(), link.rows()))));
        }
        if !opts.accumulate {
            bursts_y.clear();
            bursts_bf.clear();
        }
        bursts_y.push(obs.y);
        bursts_bf.push(bf.clone());
        let y = stack_vectors(&bursts_y);
        let mut residual_h = f64::INFINITY;
        let mut residual_g = f64::INFINITY;
        for _ in 0..opts.gain_sweeps.max(1) {
            let prev = residual_g;
            (residual_h, residual_g) = gain_steps(&y, &bursts_bf, &kappa, problem, &mut g_hat, &mut h_hat).map_err(&err)?;
            if prev.is_finite() && (prev - residual_g).abs() <= 1e-9 * prev {
                break;
            }
        }
        let scene = unpack_kappa(&kappa, problem.template).map_err(&err)?;

        let bctx = BeamContext {
            scene: &scene,
            g: &g_hat,
            h: &h_hat,
            var_g: problem.var_g,
            var_h: problem.var_h,
            sigma2: problem.sigma2,
            link,
            bound: opts.bound,
        };
        let crlb_total = match bctx.crlb(&bf) {
            Ok(c) => c.total,
            Err(JlboError::SingularFim(m)) => {
                diagnostics.push(format!("iteration {it}: bound undefined ({m})"));
                f64::INFINITY
            }
            Err(e) => return Err(err(e)),
        };
        bf_next = match opts.policy {
            BeamPolicy::Random => random_state(link, None, rng),
            BeamPolicy::Jlbo | BeamPolicy::FixedRis => {
                let mut bo = opts.beamformer;
                if opts.policy == BeamPolicy::FixedRis {
                    bo.optimize_theta = false;
                }
                let start = BeamformingState {
                    w: bf.w.clone(),
                    theta: if opts.policy == BeamPolicy::FixedRis { theta0.clone() } else { bf.theta.clone() },
                };
                match design_beams(&start, &bctx, &bo) {
                    Ok(out) => out.bf,
                    Err(JlboError::SingularFim(m)) => {
                        diagnostics.push(format!("iteration {it}: beams kept ({m})"));
                        start
                    }
                    Err(e) => return Err(err(e)),
                }
            }
        };

        let lctx = LocationContext {
            template: problem.template,
            bf: &bursts_bf,
            g: &g_hat,
            h: &h_hat,
            link,
            options: opts.location,
        };
        let step = if opts.refine_gains {
            let mut best = estimate_location_and_gains(&y, &kappa, &lctx);
            if opts.restart_from_init && it > 1 {
                let other = estimate_location_and_gains(&y, &init.kappa, &lctx);
                best = match (best, other) {
                    (Ok(a), Ok(b)) => Ok(if b.objective < a.objective { b } else { a }),
                    (Err(_), Ok(b)) => Ok(b),
                    (a, _) => a,
                };
            }
            best.map(|e| (e.params, Some((e.g, e.h)), e.iterations, e.converged))
        } else {
            estimate_location(&y, &kappa, &lctx).map(|e| (e.params, None, e.iterations, e.converged))
        };
        let (location_iterations, location_converged) = match step {
            Ok((params, gains, iterations, conv)) => {
                kappa = params;
                if let Some((g, h)) = gains {
                    g_hat = g;
                    h_hat = h;
                }
                (iterations, conv)
            }
            Err(e @ JlboError::RankDeficient { .. }) => {
                diagnostics.push(format!("iteration {it}: location step skipped ({e})"));
                (0, false)
            }
            Err(e) => return Err(err(e)),
        };
        let scene = unpack_kappa(&kappa, problem.template).map_err(&err)?;
        let model = stack_vectors(&bursts_bf.iter().map(|b| model_rx(&scene, &g_hat, &h_hat, b, link)).collect::<Result<Vec<_>>>().map_err(&err)?);
        let residual = (&y - model).norm_squared();
        let (nmse_position, nmse_kappa) = match problem.truth {
            Some(t) => {
                let (p, k) = location_errors(&kappa, t).map_err(&err)?;
                (Some(p), Some(k))
            }
            None => (None, None),
        };
        history.push(IterationRecord {
            iteration: it,
            residual_h,
            residual_g,
            residual,
            crlb_total,
            nmse_position,
            nmse_kappa,
            location_iterations,
            location_converged,
            wall_ms: started.map_or(0.0, |s| s.elapsed().as_secs_f64() * 1e3),
        });
        if !residual.is_finite() {
            return Err(err(JlboError::NonFinite("residual".into())));
        }
        let floor = 1e-28 * y.norm_squared();
        let per_burst = residual / bursts_y.len() as f64;
        if let Some(prev) = prev_residual {
            let change = (prev - per_burst).abs() / prev.max(f64::MIN_POSITIVE);
            if change < opts.tol || residual <= floor {
                converged = true;
            }
        } else if residual <= floor {
            converged = true;
        }
        prev_residual = Some(per_burst);
        if converged {
            break;
        }
    }
    if !converged {
        diagnostics.push(format!("no convergence after {} iterations", history.len()));
    }
    Ok(JlboState {
        iteration: history.len(),
        h_hat,
        g_hat,
        bf: bf_next,
        kappa_hat: kappa,
        history,
        converged,
        diagnostics,
    })
}

/// Writes the per-iteration history as CSV.
pub fn write_history<W: Write>(rows: &[IterationRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "iteration",
        "residual_h",
        "residual_g",
        "residual",
        "crlb_total",
        "nmse_position",
        "nmse_kappa",
        "location_iterations",
        "location_converged",
        "wall_ms",
    ])
    .map_err(|e| JlboError::Parse(e.to_string()))?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:e}"));
    for r in rows {
        w.write_record([
            r.iteration.to_string(),
            format!("{:e}", r.residual_h),
            format!("{:e}", r.residual_g),
            format!("{:e}", r.residual),
            format!("{:e}", r.crlb_total),
            opt(r.nmse_position),
            opt(r.nmse_kappa),
            r.location_iterations.to_string(),
            r.location_converged.to_string(),
            format!("{:e}", r.wall_ms),
        ])
        .map_err(|e| JlboError::Parse(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
