//! Monte-Carlo trials, parameter sweeps and their outputs.
//!
//! Every trial draws its scene, gains, start point and beams from a stream
//! derived from the master seed and the trial index only, so the same trial
//! sees the same geometry at every sweep value and for every algorithm.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{prior_variances, sample_gains, ArrayConfig, GainRealization};
use crate::driver::{
    enforce, run_jlbo, validate_assumptions, AssumptionPolicy, BeamPolicy, JlboInit, JlboOptions, JlboProblem,
    NoiseMode, Probe, Simulator,
};
use crate::error::{JlboError, Result};
use crate::fim::BoundKind;
use crate::geometry::{pack_kappa, sample_scene, unpack_kappa, Layout, LocationParams, Point, Scene, SceneConfig};
use crate::location::perturbed_start;
use crate::signal::{noiseless_rx, BeamformingState, LinkConfig};

/// `||est - truth||^2 / ||truth||^2`.
pub fn nmse(est: &[f64], truth: &[f64]) -> Result<f64> {
    if est.len() != truth.len() {
        return Err(JlboError::Dimension(format!("nmse of length {} against {}", est.len(), truth.len())));
    }
    let den: f64 = truth.iter().map(|t| t * t).sum();
    if den == 0.0 {
        return Err(JlboError::InvalidConfig("nmse against an all-zero truth".into()));
    }
    let num: f64 = est.iter().zip(truth).map(|(e, t)| (e - t) * (e - t)).sum();
    Ok(num / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// One configuration; the iteration column is the axis.
    Iterations,
    NRis,
    Snr,
    BsRisDistance,
}

impl SweepAxis {
    pub fn tag(self) -> &'static str {
        match self {
            SweepAxis::Iterations => "iterations",
            SweepAxis::NRis => "n_ris",
            SweepAxis::Snr => "snr",
            SweepAxis::BsRisDistance => "bs_ris_distance",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = JlboError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iterations" => Ok(SweepAxis::Iterations),
            "n_ris" => Ok(SweepAxis::NRis),
            "snr" => Ok(SweepAxis::Snr),
            "bs_ris_distance" => Ok(SweepAxis::BsRisDistance),
            other => Err(JlboError::Parse(format!(
                "unknown sweep axis `{other}` (expected iterations, n_ris, snr or bs_ris_distance)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// Small system; the whole trend suite runs in minutes.
    Desk,
    /// Full-size system for long runs.
    Paper,
}

impl FromStr for Profile {
    type Err = JlboError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(JlboError::Parse(format!("unknown profile `{other}` (expected desk or paper)"))),
        }
    }
}

/// Parses `random,fixed-ris`.
pub fn parse_baselines(s: &str) -> Result<Vec<BeamPolicy>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| match t {
            "random" => Ok(BeamPolicy::Random),
            "fixed-ris" => Ok(BeamPolicy::FixedRis),
            other => Err(JlboError::Parse(format!("unknown baseline `{other}` (expected random or fixed-ris)"))),
        })
        .collect()
}

/// Flat run configuration. A config file is TOML with any subset of these
/// keys at top level; missing keys keep the profile value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub n_bs: usize,
    pub n_tx: usize,
    pub n_ue: usize,
    pub n_ris: usize,
    /// Subcarriers per BS.
    pub n_subcarriers: usize,
    pub n_pilots: usize,
    pub l1: usize,
    pub l2: usize,
    pub carrier_hz: f64,
    pub sample_period: f64,
    pub region_width: f64,
    pub region_height: f64,
    /// Swept by `snr`; the first entry is used by every other axis.
    pub snr_db: Vec<f64>,
    pub n_ris_values: Vec<usize>,
    pub bs_ris_distances: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub sweep: SweepAxis,
    pub init_radius_m: f64,
    pub init_radius_rad: f64,
    pub tol: f64,
    pub max_outer: usize,
    pub location_max_iters: usize,
    pub location_tol: f64,
    /// Initial Levenberg-Marquardt weight of the location step; 0 is plain
    /// Gauss-Newton.
    pub location_damping: f64,
    pub beamformer_rounds: usize,
    /// `random` and `fixed-ris`; JLBO always runs.
    pub baselines: Vec<BeamPolicy>,
    /// Steering phase is `factor * pi * d / lambda`; 1 or 2.
    pub steering_phase_factor: f64,
    pub preconditioner: bool,
    pub bound: BoundKind,
    pub assumptions: AssumptionPolicy,
    pub noise: NoiseMode,
    /// 0 uses every core.
    pub workers: usize,
    pub record_wall_time: bool,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig::desk()
    }
}

impl SystemConfig {
    pub fn desk() -> Self {
        SystemConfig {
            n_bs: 2,
            n_tx: 8,
            n_ue: 2,
            n_ris: 16,
            n_subcarriers: 2,
            n_pilots: 4,
            l1: 2,
            l2: 2,
            carrier_hz: 28e9,
            sample_period: 1e-7,
            region_width: 100.0,
            region_height: 100.0,
            snr_db: vec![0.0, 10.0, 20.0],
            n_ris_values: vec![16, 32, 64],
            bs_ris_distances: vec![10.0, 20.0, 40.0, 80.0],
            trials: 50,
            seed: 1,
            sweep: SweepAxis::Snr,
            init_radius_m: 0.2,
            init_radius_rad: 0.004,
            tol: 1e-5,
            max_outer: 8,
            location_max_iters: 20,
            location_tol: 1e-6,
            location_damping: 0.0,
            beamformer_rounds: 5,
            baselines: Vec::new(),
            steering_phase_factor: 1.0,
            preconditioner: false,
            bound: BoundKind::Instantaneous,
            assumptions: AssumptionPolicy::Refuse,
            noise: NoiseMode::Fresh,
            workers: 0,
            record_wall_time: false,
        }
    }

    pub fn paper() -> Self {
        SystemConfig {
            n_bs: 5,
            n_tx: 64,
            n_ue: 4,
            n_ris: 64,
            n_subcarriers: 4,
            n_pilots: 8,
            l1: 10,
            l2: 8,
            sample_period: 1e-8,
            region_width: 1000.0,
            region_height: 1000.0,
            snr_db: vec![0.0, 5.0, 10.0, 15.0, 20.0],
            n_ris_values: vec![32, 64, 128],
            bs_ris_distances: vec![50.0, 100.0, 200.0, 400.0],
            trials: 200,
            init_radius_m: 5.0,
            init_radius_rad: 0.1,
            max_outer: 30,
            location_max_iters: 100,
            ..SystemConfig::desk()
        }
    }

    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Desk => SystemConfig::desk(),
            Profile::Paper => SystemConfig::paper(),
        }
    }

    /// Overlays the keys of `text` on `base`.
    pub fn from_toml(text: &str, base: &SystemConfig) -> Result<Self> {
        let overlay: toml::Table = text.parse().map_err(|e: toml::de::Error| JlboError::Parse(e.to_string()))?;
        let mut table = toml::Table::try_from(base).map_err(|e| JlboError::Parse(e.to_string()))?;
        for (k, v) in overlay {
            if !table.contains_key(&k) {
                return Err(JlboError::Parse(format!("unknown config key `{k}`")));
            }
            table.insert(k, v);
        }
        let cfg: SystemConfig = table.try_into().map_err(|e: toml::de::Error| JlboError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| JlboError::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_bs", self.n_bs),
            ("n_tx", self.n_tx),
            ("n_ue", self.n_ue),
            ("n_ris", self.n_ris),
            ("n_subcarriers", self.n_subcarriers),
            ("trials", self.trials),
            ("max_outer", self.max_outer),
            ("location_max_iters", self.location_max_iters),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(JlboError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        let positive = [
            ("carrier_hz", self.carrier_hz),
            ("sample_period", self.sample_period),
            ("region_width", self.region_width),
            ("region_height", self.region_height),
            ("location_tol", self.location_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(JlboError::InvalidConfig(format!("{name} must be positive and finite, got {v}")));
            }
        }
        for (name, v) in [("tol", self.tol), ("location_damping", self.location_damping)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(JlboError::InvalidConfig(format!("{name} must be non-negative and finite, got {v}")));
            }
        }
        if !(self.init_radius_m >= 0.0 && self.init_radius_rad >= 0.0) {
            return Err(JlboError::InvalidConfig("start radii must be non-negative".into()));
        }
        if self.steering_phase_factor != 1.0 && self.steering_phase_factor != 2.0 {
            return Err(JlboError::InvalidConfig(format!(
                "steering_phase_factor must be 1 or 2, got {}",
                self.steering_phase_factor
            )));
        }
        if self.baselines.contains(&BeamPolicy::Jlbo) {
            return Err(JlboError::InvalidConfig("jlbo is not a baseline".into()));
        }
        if self.snr_db.is_empty() || self.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(JlboError::InvalidConfig("snr_db needs at least one finite entry".into()));
        }
        match self.sweep {
            SweepAxis::NRis if self.n_ris_values.is_empty() || self.n_ris_values.contains(&0) => {
                Err(JlboError::InvalidConfig("n_ris_values must be non-empty and positive".into()))
            }
            SweepAxis::BsRisDistance
                if self.bs_ris_distances.is_empty() || self.bs_ris_distances.iter().any(|d| !(*d > 0.0)) =>
            {
                Err(JlboError::InvalidConfig("bs_ris_distances must be non-empty and positive".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.n_bs, self.l1, self.l2)
    }

    pub fn sweep_values(&self) -> Vec<f64> {
        match self.sweep {
            SweepAxis::Iterations => vec![self.snr_db[0]],
            SweepAxis::NRis => self.n_ris_values.iter().map(|&n| n as f64).collect(),
            SweepAxis::Snr => self.snr_db.clone(),
            SweepAxis::BsRisDistance => self.bs_ris_distances.clone(),
        }
    }

    pub fn snr_at(&self, value: f64) -> f64 {
        match self.sweep {
            SweepAxis::Snr | SweepAxis::Iterations => value,
            _ => self.snr_db[0],
        }
    }

    pub fn link_at(&self, value: f64) -> LinkConfig {
        let n_ris = match self.sweep {
            SweepAxis::NRis => value as usize,
            _ => self.n_ris,
        };
        let mut array = ArrayConfig::half_wavelength(
            self.n_tx,
            self.n_ue,
            n_ris,
            self.n_bs,
            self.n_subcarriers,
            self.carrier_hz,
            self.sample_period,
        );
        array.phase_factor = self.steering_phase_factor * PI;
        LinkConfig {
            array,
            layout: self.layout(),
            n_pilots: self.n_pilots,
        }
    }

    /// JLBO first, then the baselines in config order.
    pub fn algorithms(&self) -> Vec<BeamPolicy> {
        let mut out = vec![BeamPolicy::Jlbo];
        for b in &self.baselines {
            if !out.contains(b) {
                out.push(*b);
            }
        }
        out
    }

    pub fn jlbo_options(&self, policy: BeamPolicy) -> JlboOptions {
        let mut o = JlboOptions {
            tol: self.tol,
            max_outer: self.max_outer,
            policy,
            timing: self.record_wall_time,
            bound: self.bound,
            ..JlboOptions::default()
        };
        o.beamformer.rounds = self.beamformer_rounds;
        o.location.max_iters = self.location_max_iters;
        o.location.tol = self.location_tol;
        o.location.damping = self.location_damping;
        o.location.precondition = self.preconditioner;
        o
    }
}

/// Seed of trial `trial`, a pure function of the master seed.
pub fn trial_seed(master: u64, trial: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(trial as u64);
    rng.random()
}

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s);
    rng
}

/// Moves the RIS to distance `dist` from BS 1 along the BS 1 to RIS ray and
/// re-anchors the line-of-sight slots.
pub fn place_ris_on_ray(scene: &Scene, dist: f64) -> Result<Scene> {
    if !(dist > 0.0) || !dist.is_finite() {
        return Err(JlboError::InvalidConfig(format!("BS-RIS distance must be positive, got {dist}")));
    }
    let bs = *scene
        .bs_positions
        .first()
        .ok_or_else(|| JlboError::Dimension("scene has no base stations".into()))?;
    let d = [scene.ris_position[0] - bs[0], scene.ris_position[1] - bs[1]];
    let len = d[0].hypot(d[1]);
    if len == 0.0 {
        return Err(JlboError::Geometry("RIS coincides with BS 1".into()));
    }
    let ris: Point = [bs[0] + d[0] / len * dist, bs[1] + d[1] / len * dist];
    let mut out = scene.clone();
    out.ris_position = ris;
    for (n, row) in out.bs_ris_scatterers.iter_mut().enumerate() {
        let b = scene.bs_positions[n];
        row[0] = [0.5 * (b[0] + ris[0]), 0.5 * (b[1] + ris[1])];
    }
    let ue = scene.ue_position;
    for row in out.ris_ue_scatterers.iter_mut() {
        row[0] = [0.5 * (ris[0] + ue[0]), 0.5 * (ris[1] + ue[1])];
    }
    Ok(out)
}

/// Everything one trial needs before the first acquisition.
#[derive(Debug, Clone)]
pub struct TrialInstance {
    pub scene: Scene,
    pub gains: GainRealization,
    pub truth: LocationParams,
    pub init: JlboInit,
    pub link: LinkConfig,
    pub sigma2: f64,
}

impl TrialInstance {
    /// Draws scene, gains, start point and beams for `seed` at one sweep
    /// value. Noise is `sigma2 = ||y0||^2 / (dim(y) snr)` with `y0` the
    /// noiseless pilots under the start beams.
    pub fn sample(cfg: &SystemConfig, value: f64, seed: u64) -> Result<Self> {
        let link = cfg.link_at(value);
        link.validate()?;
        let mut rng = stream(seed, 0);
        let region = [cfg.region_width, cfg.region_height];
        let mut scene = sample_scene(&SceneConfig::new(cfg.layout(), region), &mut rng)?;
        if cfg.sweep == SweepAxis::BsRisDistance {
            scene = place_ris_on_ray(&scene, value)?;
        }
        let (vg, vh) = prior_variances(&scene)?;
        let gains = sample_gains(&vg, &vh, &mut rng)?;
        let truth = pack_kappa(&scene)?;
        let kappa = perturbed_start(&truth, cfg.init_radius_m, cfg.init_radius_rad, &mut rng)?;
        let g = sample_gains(&vg, &vh, &mut rng)?.g;
        let bf = BeamformingState::random(&link, &mut rng);
        let energy = noiseless_rx(&scene, &gains, &bf, &link)?.norm_squared();
        if !(energy > 0.0) {
            return Err(JlboError::Geometry("start beams deliver no pilot energy".into()));
        }
        let sigma2 = energy / (link.rows() as f64 * 10f64.powf(cfg.snr_at(value) / 10.0));
        Ok(TrialInstance {
            scene,
            gains,
            truth,
            init: JlboInit { kappa, g, bf },
            link,
            sigma2,
        })
    }
}

/// One row per (trial, iteration, algorithm). A failed run leaves a single
/// row with iteration 0 and NaN metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub sweep_value: f64,
    pub iteration: usize,
    pub algorithm: BeamPolicy,
    pub nmse_position: f64,
    pub nmse_kappa: f64,
    pub crlb_total: f64,
    pub residual: f64,
    pub wall_ms: f64,
}

impl TrialRecord {
    pub fn failed(&self) -> bool {
        self.iteration == 0
    }

    /// Field-wise equality that treats NaN as equal to NaN.
    pub fn same_as(&self, o: &TrialRecord) -> bool {
        let eq = |a: f64, b: f64| a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan());
        self.trial == o.trial
            && self.seed == o.seed
            && eq(self.sweep_value, o.sweep_value)
            && self.iteration == o.iteration
            && self.algorithm == o.algorithm
            && eq(self.nmse_position, o.nmse_position)
            && eq(self.nmse_kappa, o.nmse_kappa)
            && eq(self.crlb_total, o.crlb_total)
            && eq(self.residual, o.residual)
            && eq(self.wall_ms, o.wall_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub trial: usize,
    pub sweep_value: f64,
    pub algorithm: BeamPolicy,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloOutput {
    pub records: Vec<TrialRecord>,
    pub failures: Vec<TrialFailure>,
    pub warnings: Vec<String>,
}

fn algorithm_rank(p: BeamPolicy) -> usize {
    match p {
        BeamPolicy::Jlbo => 0,
        BeamPolicy::Random => 1,
        BeamPolicy::FixedRis => 2,
    }
}

/// Runs JLBO on one trial with one beam policy.
pub fn run_trial(cfg: &SystemConfig, value: f64, trial: usize, policy: BeamPolicy) -> Result<Vec<TrialRecord>> {
    let seed = trial_seed(cfg.seed, trial);
    let inst = TrialInstance::sample(cfg, value, seed)?;
    let (var_g, var_h) = (inst.gains.var_g.clone(), inst.gains.var_h.clone());
    let mut sim = Simulator::new(inst.scene.clone(), inst.gains.clone(), inst.link, inst.sigma2, cfg.noise, stream(seed, 1))?;
    let problem = JlboProblem {
        template: &inst.scene,
        link: &inst.link,
        var_g: &var_g,
        var_h: &var_h,
        sigma2: inst.sigma2,
        truth: Some(&inst.truth),
    };
    let st = run_jlbo(&mut sim, &inst.init, &problem, &cfg.jlbo_options(policy), &mut stream(seed, 2))?;
    Ok(st
        .history
        .iter()
        .map(|r| TrialRecord {
            trial,
            seed,
            sweep_value: value,
            iteration: r.iteration,
            algorithm: policy,
            nmse_position: r.nmse_position.unwrap_or(f64::NAN),
            nmse_kappa: r.nmse_kappa.unwrap_or(f64::NAN),
            crlb_total: r.crlb_total,
            residual: r.residual,
            wall_ms: r.wall_ms,
        })
        .collect())
}

/// Rank probe at the start point of trial 0.
fn probe_warnings(cfg: &SystemConfig, value: f64) -> Result<Vec<String>> {
    let inst = TrialInstance::sample(cfg, value, trial_seed(cfg.seed, 0))?;
    let start = unpack_kappa(&inst.init.kappa, &inst.scene)?;
    let report = validate_assumptions(
        &inst.link,
        Some(&Probe {
            scene: &start,
            bf: &inst.init.bf,
            g: &inst.init.g,
            h: &inst.gains.h,
            noise: None,
        }),
    );
    Ok(report
        .ranks
        .iter()
        .filter(|r| r.rank < r.cols)
        .map(|r| {
            format!(
                "sweep value {value}: {} half jacobian has rank {} < {} at the start point",
                r.half.name(),
                r.rank,
                r.cols
            )
        })
        .collect())
}

/// Every trial at every sweep value for JLBO and the enabled baselines.
/// Sub-run failures become flagged rows; only an assumption refusal or an
/// invalid config stops the sweep.
pub fn run_monte_carlo(cfg: &SystemConfig) -> Result<MonteCarloOutput> {
    cfg.validate()?;
    let values = cfg.sweep_values();
    let mut warnings = Vec::new();
    for &v in &values {
        let link = cfg.link_at(v);
        link.validate()?;
        let report = validate_assumptions(&link, None);
        enforce(&report, cfg.assumptions)?;
        if !report.dimension_ok {
            warnings.push(format!(
                "sweep value {v}: {} observations for {} unknowns",
                report.observations, report.unknowns
            ));
        }
        match probe_warnings(cfg, v) {
            Ok(w) => warnings.extend(w),
            Err(e) => warnings.push(format!("sweep value {v}: rank probe failed ({e})")),
        }
    }
    let algorithms = cfg.algorithms();
    let mut jobs: Vec<(usize, usize, BeamPolicy)> = Vec::new();
    for s in 0..values.len() {
        for t in 0..cfg.trials {
            jobs.extend(algorithms.iter().map(|&p| (s, t, p)));
        }
    }
    let work = || -> Vec<(usize, usize, BeamPolicy, Result<Vec<TrialRecord>>)> {
        jobs.par_iter()
            .map(|&(s, t, p)| (s, t, p, run_trial(cfg, values[s], t, p)))
            .collect()
    };
    let results = if cfg.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| JlboError::InvalidConfig(e.to_string()))?
            .install(work)
    } else {
        work()
    };
    let mut keyed = Vec::new();
    let mut failures = Vec::new();
    for (s, t, p, res) in results {
        match res {
            Ok(rows) => keyed.extend(rows.into_iter().map(|r| (s, r))),
            Err(e) => {
                failures.push(TrialFailure {
                    trial: t,
                    sweep_value: values[s],
                    algorithm: p,
                    error: e.to_string(),
                });
                keyed.push((
                    s,
                    TrialRecord {
                        trial: t,
                        seed: trial_seed(cfg.seed, t),
                        sweep_value: values[s],
                        iteration: 0,
                        algorithm: p,
                        nmse_position: f64::NAN,
                        nmse_kappa: f64::NAN,
                        crlb_total: f64::NAN,
                        residual: f64::NAN,
                        wall_ms: 0.0,
                    },
                ));
            }
        }
    }
    keyed.sort_by_key(|(s, r)| (*s, r.trial, algorithm_rank(r.algorithm), r.iteration));
    Ok(MonteCarloOutput {
        records: keyed.into_iter().map(|(_, r)| r).collect(),
        failures,
        warnings,
    })
}

/// Median of the finite entries; NaN when there are none.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn same_value(a: f64, b: f64) -> bool {
    a.to_bits() == b.to_bits()
}

fn distinct_values(records: &[TrialRecord]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for r in records {
        if !out.iter().any(|v| same_value(*v, r.sweep_value)) {
            out.push(r.sweep_value);
        }
    }
    out
}

fn distinct_algorithms(records: &[TrialRecord]) -> Vec<BeamPolicy> {
    let mut out: Vec<BeamPolicy> = Vec::new();
    for r in records {
        if !out.contains(&r.algorithm) {
            out.push(r.algorithm);
        }
    }
    out.sort_by_key(|p| algorithm_rank(*p));
    out
}

/// Per-trial NMSE trajectories of one algorithm at one sweep value. Runs
/// that stopped early hold their last value.
fn trajectories(records: &[TrialRecord], algorithm: BeamPolicy, value: f64) -> Vec<Vec<f64>> {
    let mut by_trial: Vec<(usize, Vec<(usize, f64)>)> = Vec::new();
    for r in records
        .iter()
        .filter(|r| r.algorithm == algorithm && same_value(r.sweep_value, value) && !r.failed())
    {
        match by_trial.iter_mut().find(|(t, _)| *t == r.trial) {
            Some((_, v)) => v.push((r.iteration, r.nmse_position)),
            None => by_trial.push((r.trial, vec![(r.iteration, r.nmse_position)])),
        }
    }
    let len = by_trial.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    by_trial
        .into_iter()
        .map(|(_, mut v)| {
            v.sort_by_key(|(i, _)| *i);
            let mut out: Vec<f64> = v.into_iter().map(|(_, x)| x).collect();
            let last = *out.last().unwrap_or(&f64::NAN);
            out.resize(len, last);
            out
        })
        .collect()
}

/// Median position NMSE over trials at each outer iteration.
pub fn iteration_medians(records: &[TrialRecord], algorithm: BeamPolicy, value: f64) -> Vec<f64> {
    let traj = trajectories(records, algorithm, value);
    let len = traj.first().map_or(0, Vec::len);
    (0..len).map(|i| median(&traj.iter().map(|t| t[i]).collect::<Vec<_>>())).collect()
}

/// Final-iteration aggregates per algorithm and sweep value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub algorithm: BeamPolicy,
    pub sweep_value: f64,
    pub trials: usize,
    pub failures: usize,
    pub median_nmse_position: f64,
    pub mean_nmse_position: f64,
    pub median_nmse_kappa: f64,
    pub median_crlb_total: f64,
}

pub fn summarize(records: &[TrialRecord]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for alg in distinct_algorithms(records) {
        for value in distinct_values(records) {
            let rows: Vec<&TrialRecord> = records
                .iter()
                .filter(|r| r.algorithm == alg && same_value(r.sweep_value, value))
                .collect();
            if rows.is_empty() {
                continue;
            }
            let mut finals: Vec<&TrialRecord> = Vec::new();
            for r in rows.iter().filter(|r| !r.failed()) {
                match finals.iter_mut().find(|f| f.trial == r.trial) {
                    Some(f) if f.iteration < r.iteration => *f = r,
                    Some(_) => {}
                    None => finals.push(r),
                }
            }
            let failures = rows.iter().filter(|r| r.failed()).count();
            let pos: Vec<f64> = finals.iter().map(|r| r.nmse_position).collect();
            let finite: Vec<f64> = pos.iter().copied().filter(|x| x.is_finite()).collect();
            out.push(SummaryRow {
                algorithm: alg,
                sweep_value: value,
                trials: finals.len(),
                failures,
                median_nmse_position: median(&pos),
                mean_nmse_position: if finite.is_empty() {
                    f64::NAN
                } else {
                    finite.iter().sum::<f64>() / finite.len() as f64
                },
                median_nmse_kappa: median(&finals.iter().map(|r| r.nmse_kappa).collect::<Vec<_>>()),
                median_crlb_total: median(&finals.iter().map(|r| r.crlb_total).collect::<Vec<_>>()),
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
    Svg,
}

impl FromStr for OutputFormat {
    type Err = JlboError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            "svg" => Ok(OutputFormat::Svg),
            other => Err(JlboError::Parse(format!("unknown format `{other}` (expected csv, json or svg)"))),
        }
    }
}

pub const CSV_HEADER: [&str; 10] = [
    "trial",
    "seed",
    "sweep_value",
    "iteration",
    "algorithm",
    "nmse_position",
    "nmse_kappa",
    "crlb_total",
    "residual",
    "wall_ms",
];

pub fn write_csv<W: Write>(records: &[TrialRecord], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    let csv_err = |e: csv::Error| JlboError::Parse(e.to_string());
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<TrialRecord>> {
    let mut rd = csv::Reader::from_reader(input);
    let header: Vec<String> = rd
        .headers()
        .map_err(|e| JlboError::Parse(e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    if header != CSV_HEADER {
        return Err(JlboError::Parse(format!("unexpected CSV header {header:?}")));
    }
    rd.deserialize()
        .map(|r| r.map_err(|e| JlboError::Parse(e.to_string())))
        .collect()
}

#[derive(Serialize)]
struct JsonReport<'a> {
    config: &'a SystemConfig,
    summary: Vec<SummaryRow>,
    warnings: &'a [String],
    failures: &'a [TrialFailure],
    records: &'a [TrialRecord],
}

/// Config, aggregates, failures and every record. Non-finite numbers become
/// `null`.
pub fn write_json<W: Write>(output: &MonteCarloOutput, cfg: &SystemConfig, out: W) -> Result<()> {
    let report = JsonReport {
        config: cfg,
        summary: summarize(&output.records),
        warnings: &output.warnings,
        failures: &output.failures,
        records: &output.records,
    };
    let mut out = out;
    serde_json::to_writer_pretty(&mut out, &report).map_err(|e| JlboError::Parse(e.to_string()))?;
    writeln!(out)?;
    Ok(())
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 420.0;
const MARGIN: [f64; 4] = [70.0, 20.0, 30.0, 50.0];

fn palette(p: BeamPolicy) -> &'static str {
    match p {
        BeamPolicy::Jlbo => "#1f77b4",
        BeamPolicy::Random => "#d62728",
        BeamPolicy::FixedRis => "#2ca02c",
    }
}

/// Median position NMSE against the sweep axis (against the iteration for
/// `iterations`), log-scale y, one polyline per algorithm.
pub fn write_svg<W: Write>(records: &[TrialRecord], axis: SweepAxis, out: W) -> Result<()> {
    if records.is_empty() {
        return Err(JlboError::InvalidConfig("nothing to plot".into()));
    }
    let mut series: Vec<(BeamPolicy, Vec<(f64, f64)>)> = Vec::new();
    for alg in distinct_algorithms(records) {
        let pts: Vec<(f64, f64)> = if axis == SweepAxis::Iterations {
            let v = distinct_values(records)[0];
            iteration_medians(records, alg, v)
                .into_iter()
                .enumerate()
                .map(|(i, y)| ((i + 1) as f64, y))
                .collect()
        } else {
            summarize(records)
                .into_iter()
                .filter(|s| s.algorithm == alg)
                .map(|s| (s.sweep_value, s.median_nmse_position))
                .collect()
        };
        series.push((alg, pts.into_iter().filter(|(_, y)| *y > 0.0 && y.is_finite()).collect()));
    }
    let all: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    let (mut x0, mut x1) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (mut d0, mut d1) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
        (a.min(p.1.log10().floor()), b.max(p.1.log10().ceil()))
    });
    if all.is_empty() {
        (x0, x1, d0, d1) = (0.0, 1.0, -1.0, 0.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if d1 <= d0 {
        d1 = d0 + 1.0;
    }
    let [ml, mr, mt, mb] = MARGIN;
    let pw = SVG_W - ml - mr;
    let ph = SVG_H - mt - mb;
    let sx = |x: f64| ml + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| mt + (d1 - y.log10()) / (d1 - d0) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{SVG_W}" height="{SVG_H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let mut d = d0;
    while d <= d1 + 1e-9 {
        let y = sy(10f64.powf(d));
        let _ = writeln!(
            s,
            r##"<line x1="{ml}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/>"##,
            ml + pw
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">1e{d}</text>"#,
            ml - 6.0,
            y + 4.0
        );
        d += 1.0;
    }
    for k in 0..=4 {
        let x = x0 + (x1 - x0) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">{}</text>"#,
            sx(x),
            mt + ph + 16.0,
            trim_number(x)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">{}</text>"#,
        ml + pw / 2.0,
        SVG_H - 10.0,
        axis.tag()
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.2}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {:.2})">median position NMSE</text>"#,
        mt + ph / 2.0,
        mt + ph / 2.0
    );
    for (i, (alg, pts)) in series.iter().enumerate() {
        let points: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline data-algorithm="{}" fill="none" stroke="{}" stroke-width="2" points="{}"/>"#,
            alg.tag(),
            palette(*alg),
            points.join(" ")
        );
        let ly = mt + 16.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{ly:.2}" font-size="12" fill="{}" text-anchor="end">{}</text>"#,
            ml + pw - 8.0,
            palette(*alg),
            alg.tag()
        );
    }
    s.push_str("</svg>\n");
    let mut out = out;
    out.write_all(s.as_bytes())?;
    Ok(())
}

fn trim_number(x: f64) -> String {
    let t = format!("{x:.3}");
    t.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Writes `output` to `path` in `format`.
pub fn emit(output: &MonteCarloOutput, cfg: &SystemConfig, format: OutputFormat, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    match format {
        OutputFormat::Csv => write_csv(&output.records, &mut f)?,
        OutputFormat::Json => write_json(output, cfg, &mut f)?,
        OutputFormat::Svg => write_svg(&output.records, cfg.sweep, &mut f)?,
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(trial: usize, iteration: usize, alg: BeamPolicy, value: f64, nmse: f64) -> TrialRecord {
        TrialRecord {
            trial,
            seed: 7,
            sweep_value: value,
            iteration,
            algorithm: alg,
            nmse_position: nmse,
            nmse_kappa: 2.0 * nmse,
            crlb_total: 1.5,
            residual: 0.25,
            wall_ms: 0.0,
        }
    }

    fn tiny() -> SystemConfig {
        SystemConfig {
            trials: 2,
            max_outer: 2,
            location_max_iters: 5,
            beamformer_rounds: 1,
            snr_db: vec![20.0],
            sweep: SweepAxis::Iterations,
            ..SystemConfig::desk()
        }
    }

    #[test]
    fn nmse_cases() {
        let t = [1.0, -2.0, 2.0];
        assert_eq!(nmse(&t, &t).unwrap(), 0.0);
        assert_eq!(nmse(&[2.0, -4.0, 4.0], &t).unwrap(), 1.0);
        assert_eq!(nmse(&[0.0; 3], &t).unwrap(), 1.0);
        assert!(matches!(nmse(&[1.0], &[0.0]), Err(JlboError::InvalidConfig(_))));
        assert!(matches!(nmse(&[1.0], &t), Err(JlboError::Dimension(_))));
    }

    #[test]
    fn empty_csv_is_header_only() {
        let mut buf = Vec::new();
        write_csv(&[], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "trial,seed,sweep_value,iteration,algorithm,nmse_position,nmse_kappa,crlb_total,residual,wall_ms\n"
        );
    }

    #[test]
    fn csv_rows_round_trip() {
        let rows = vec![
            record(0, 1, BeamPolicy::Jlbo, 10.0, 0.1 + 0.2),
            record(0, 0, BeamPolicy::FixedRis, 10.0, f64::NAN),
        ];
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains(",fixed-ris,"));
        let back = read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert!(back.iter().zip(&rows).all(|(a, b)| a.same_as(b)));
    }

    #[test]
    fn foreign_header_is_rejected() {
        assert!(read_csv("a,b\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn svg_is_well_formed_with_one_line_per_algorithm() {
        let mut rows = Vec::new();
        for (k, v) in [0.0, 10.0, 20.0].into_iter().enumerate() {
            for t in 0..3 {
                rows.push(record(t, 1, BeamPolicy::Jlbo, v, 10f64.powi(-(k as i32) - 1)));
                rows.push(record(t, 1, BeamPolicy::Random, v, 10f64.powi(-(k as i32))));
            }
        }
        let mut buf = Vec::new();
        write_svg(&rows, SweepAxis::Snr, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap();
        let lines: Vec<_> = doc.descendants().filter(|n| n.has_tag_name("polyline")).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].attribute("data-algorithm"), Some("jlbo"));
        assert_eq!(lines[1].attribute("points").unwrap().split(' ').count(), 3);
        assert!(write_svg(&[], SweepAxis::Snr, Vec::new()).is_err());
    }

    #[test]
    fn iteration_svg_uses_iteration_medians() {
        let rows: Vec<_> = (1..=4).map(|i| record(0, i, BeamPolicy::Jlbo, 20.0, 1.0 / i as f64)).collect();
        let mut buf = Vec::new();
        write_svg(&rows, SweepAxis::Iterations, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap();
        let line = doc.descendants().find(|n| n.has_tag_name("polyline")).unwrap();
        assert_eq!(line.attribute("points").unwrap().split(' ').count(), 4);
    }

    #[test]
    fn medians_hold_the_last_value_of_short_runs() {
        let mut rows = vec![record(0, 1, BeamPolicy::Jlbo, 0.0, 4.0), record(0, 2, BeamPolicy::Jlbo, 0.0, 2.0)];
        rows.push(record(1, 1, BeamPolicy::Jlbo, 0.0, 8.0));
        rows.push(record(2, 1, BeamPolicy::Jlbo, 0.0, 6.0));
        rows.push(record(2, 2, BeamPolicy::Jlbo, 0.0, 1.0));
        assert_eq!(iteration_medians(&rows, BeamPolicy::Jlbo, 0.0), vec![6.0, 2.0]);
        assert_eq!(median(&[3.0, f64::NAN, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn summary_counts_failures_and_uses_final_iterations() {
        let rows = vec![
            record(0, 1, BeamPolicy::Jlbo, 5.0, 9.0),
            record(0, 2, BeamPolicy::Jlbo, 5.0, 1.0),
            record(1, 1, BeamPolicy::Jlbo, 5.0, 3.0),
            record(2, 0, BeamPolicy::Jlbo, 5.0, f64::NAN),
        ];
        let s = summarize(&rows);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].trials, 2);
        assert_eq!(s[0].failures, 1);
        assert_eq!(s[0].median_nmse_position, 2.0);
        assert_eq!(s[0].mean_nmse_position, 2.0);
    }

    #[test]
    fn config_overlay_and_validation() {
        let cfg = SystemConfig::from_toml("n_ris = 32\nsweep = \"n_ris\"\nbaselines = [\"random\"]", &SystemConfig::desk()).unwrap();
        assert_eq!(cfg.n_ris, 32);
        assert_eq!(cfg.sweep, SweepAxis::NRis);
        assert_eq!(cfg.algorithms(), vec![BeamPolicy::Jlbo, BeamPolicy::Random]);
        assert_eq!(cfg.n_tx, 8);
        assert!(SystemConfig::from_toml("n_lasers = 2", &SystemConfig::desk()).is_err());
        assert!(SystemConfig::from_toml("n_tx = 0", &SystemConfig::desk()).is_err());
        assert!(SystemConfig::from_toml("steering_phase_factor = 3.0", &SystemConfig::desk()).is_err());
        assert!(SystemConfig::from_toml("baselines = [\"jlbo\"]", &SystemConfig::desk()).is_err());
        let text = SystemConfig::paper().to_toml().unwrap();
        assert_eq!(SystemConfig::from_toml(&text, &SystemConfig::desk()).unwrap(), SystemConfig::paper());
    }

    #[test]
    fn sweep_values_follow_the_axis() {
        let mut cfg = SystemConfig::desk();
        assert_eq!(cfg.sweep_values(), vec![0.0, 10.0, 20.0]);
        cfg.sweep = SweepAxis::NRis;
        assert_eq!(cfg.sweep_values(), vec![16.0, 32.0, 64.0]);
        assert_eq!(cfg.link_at(32.0).array.n_ris, 32);
        assert_eq!(cfg.snr_at(32.0), 0.0);
        cfg.sweep = SweepAxis::Iterations;
        assert_eq!(cfg.sweep_values(), vec![0.0]);
        assert_eq!("bs_ris_distance".parse::<SweepAxis>().unwrap(), SweepAxis::BsRisDistance);
        assert!("azimuth".parse::<SweepAxis>().is_err());
        assert_eq!(parse_baselines("random, fixed-ris").unwrap(), vec![BeamPolicy::Random, BeamPolicy::FixedRis]);
        assert!(parse_baselines("svm").is_err());
    }

    #[test]
    fn ris_lands_on_the_ray_at_the_requested_distance() {
        let cfg = SystemConfig::desk();
        let inst = TrialInstance::sample(&cfg, 0.0, 3).unwrap();
        let moved = place_ris_on_ray(&inst.scene, 37.0).unwrap();
        let bs = moved.bs_positions[0];
        let d = crate::geometry::distance(bs, moved.ris_position);
        assert!((d - 37.0).abs() < 1e-9);
        let a = [inst.scene.ris_position[0] - bs[0], inst.scene.ris_position[1] - bs[1]];
        let b = [moved.ris_position[0] - bs[0], moved.ris_position[1] - bs[1]];
        assert!((a[0] * b[1] - a[1] * b[0]).abs() < 1e-9 * a[0].hypot(a[1]) * 37.0);
        assert!(a[0] * b[0] + a[1] * b[1] > 0.0);
        assert_eq!(moved.ue_position, inst.scene.ue_position);
        let los = moved.ris_ue_scatterers[0][0];
        assert!((los[0] - 0.5 * (moved.ris_position[0] + moved.ue_position[0])).abs() < 1e-12);
        assert!(place_ris_on_ray(&inst.scene, 0.0).is_err());
    }

    #[test]
    fn trial_noise_matches_the_snr_definition() {
        let cfg = SystemConfig::desk();
        let inst = TrialInstance::sample(&cfg, 10.0, 5).unwrap();
        let e = noiseless_rx(&inst.scene, &inst.gains, &inst.init.bf, &inst.link).unwrap().norm_squared();
        let snr = e / (inst.link.rows() as f64 * inst.sigma2);
        assert!((10.0 * snr.log10() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn trials_share_geometry_across_sweep_values() {
        let cfg = SystemConfig::desk();
        let a = TrialInstance::sample(&cfg, 0.0, 11).unwrap();
        let b = TrialInstance::sample(&cfg, 20.0, 11).unwrap();
        assert_eq!(a.scene.ue_position, b.scene.ue_position);
        assert_eq!(a.scene.ris_ue_scatterers, b.scene.ris_ue_scatterers);
        assert!((a.sigma2 / b.sigma2 - 100.0).abs() < 1e-9);
        assert_ne!(trial_seed(1, 0), trial_seed(1, 1));
        assert_eq!(trial_seed(4, 2), trial_seed(4, 2));
    }

    #[test]
    fn csv_bytes_do_not_depend_on_worker_count() {
        let one = run_monte_carlo(&SystemConfig { workers: 1, ..tiny() }).unwrap();
        let two = run_monte_carlo(&SystemConfig { workers: 2, ..tiny() }).unwrap();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        write_csv(&one.records, &mut a).unwrap();
        write_csv(&two.records, &mut b).unwrap();
        assert!(!one.records.is_empty());
        assert_eq!(a, b);
    }

    #[test]
    fn refused_dimension_stops_the_sweep() {
        let cfg = SystemConfig { n_pilots: 0, ..tiny() };
        let err = run_monte_carlo(&cfg).unwrap_err();
        assert!(err.is_assumption_refusal());
        let warn = SystemConfig {
            assumptions: AssumptionPolicy::WarnOnly,
            ..cfg
        };
        let out = run_monte_carlo(&warn).unwrap();
        assert!(!out.warnings.is_empty());
    }

    #[test]
    fn failed_runs_become_flagged_rows() {
        let cfg = SystemConfig {
            n_pilots: 0,
            assumptions: AssumptionPolicy::WarnOnly,
            ..tiny()
        };
        let out = run_monte_carlo(&cfg).unwrap();
        assert_eq!(out.failures.len(), 2);
        assert!(out.records.iter().all(|r| r.failed() && r.nmse_position.is_nan()));
    }
}
