//! Steering vectors, per-subcarrier gain matrices and the cascaded channels
//! `G = A_R G~ A_T^H` (BS to RIS) and `H = A_U H~ A_Rbar^H` (RIS to UE).

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{JlboError, Result};
use crate::geometry::{distance, legs, BsLegs, Scene};

pub type C64 = Complex64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayConfig {
    pub n_tx: usize,
    pub n_ue: usize,
    pub n_ris: usize,
    pub spacing_bs: f64,
    pub spacing_ris: f64,
    pub spacing_ue: f64,
    pub carrier_hz: f64,
    pub n_subcarriers_total: usize,
    pub n_subcarriers_per_bs: usize,
    pub sample_period: f64,
    pub light_speed: f64,
    /// Multiplier of `d / lambda` in the steering phase: `pi` or `2 pi`.
    pub phase_factor: f64,
    /// Overrides the per-subcarrier wavelength with a constant.
    pub fixed_wavelength: Option<f64>,
}

impl ArrayConfig {
    /// Half-wavelength arrays at carrier `fc`.
    pub fn half_wavelength(n_tx: usize, n_ue: usize, n_ris: usize, n_bs: usize, n_s: usize, fc: f64, ts: f64) -> Self {
        let c = 3e8;
        let d = c / fc / 2.0;
        ArrayConfig {
            n_tx,
            n_ue,
            n_ris,
            spacing_bs: d,
            spacing_ris: d,
            spacing_ue: d,
            carrier_hz: fc,
            n_subcarriers_total: n_bs * n_s,
            n_subcarriers_per_bs: n_s,
            sample_period: ts,
            light_speed: c,
            phase_factor: PI,
            fixed_wavelength: None,
        }
    }

    pub fn validate(&self, n_bs: usize) -> Result<()> {
        if self.n_tx == 0 || self.n_ue == 0 || self.n_ris == 0 || self.n_subcarriers_per_bs == 0 {
            return Err(JlboError::InvalidConfig("array and subcarrier counts must be at least 1".into()));
        }
        if self.n_subcarriers_total != n_bs * self.n_subcarriers_per_bs {
            return Err(JlboError::InvalidConfig(format!(
                "total subcarriers {} must equal N * N_S = {}",
                self.n_subcarriers_total,
                n_bs * self.n_subcarriers_per_bs
            )));
        }
        for (name, v) in [
            ("spacing_bs", self.spacing_bs),
            ("spacing_ris", self.spacing_ris),
            ("spacing_ue", self.spacing_ue),
            ("carrier_hz", self.carrier_hz),
            ("sample_period", self.sample_period),
            ("light_speed", self.light_speed),
            ("phase_factor", self.phase_factor),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(JlboError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(l) = self.fixed_wavelength {
            if !(l > 0.0 && l.is_finite()) {
                return Err(JlboError::InvalidConfig(format!("fixed wavelength must be positive, got {l}")));
            }
        }
        Ok(())
    }

    pub fn subcarrier_spacing(&self) -> f64 {
        1.0 / (self.n_subcarriers_total as f64 * self.sample_period)
    }

    /// Phase slope `2 pi j / (N_S T_S)` applied to path delays on subcarrier `j`.
    pub fn delay_phase_rate(&self, j: usize) -> f64 {
        2.0 * PI * j as f64 / (self.n_subcarriers_per_bs as f64 * self.sample_period)
    }

    fn role(&self, role: ArrayRole) -> (usize, f64) {
        match role {
            ArrayRole::BsTx => (self.n_tx, self.spacing_bs),
            ArrayRole::RisRx | ArrayRole::RisTx => (self.n_ris, self.spacing_ris),
            ArrayRole::UeRx => (self.n_ue, self.spacing_ue),
        }
    }

    /// Steering vector of `role` on subcarrier `j`.
    pub fn steering(&self, role: ArrayRole, angle: f64, j: usize) -> Result<DVector<C64>> {
        let (n, d) = self.role(role);
        steering_vector(angle, n, d, subcarrier_wavelength(j, self), self.phase_factor)
    }

    /// Steering vector and its derivative with respect to the angle.
    pub(crate) fn steering_with_derivative(&self, role: ArrayRole, angle: f64, j: usize) -> (DVector<C64>, DVector<C64>) {
        let (n, d) = self.role(role);
        let k0 = self.phase_factor * d / subcarrier_wavelength(j, self);
        let (s, c) = angle.sin_cos();
        let a = DVector::from_fn(n, |k, _| C64::from_polar(1.0, -k0 * k as f64 * s));
        let da = DVector::from_fn(n, |k, _| a[k] * C64::new(0.0, -k0 * k as f64 * c));
        (a, da)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArrayRole {
    BsTx,
    RisRx,
    RisTx,
    UeRx,
}

/// Uniform linear array response: entry `k` is `exp(-i factor d/lambda k sin(angle))`.
pub fn steering_vector(angle: f64, n_elements: usize, spacing: f64, wavelength: f64, phase_factor: f64) -> Result<DVector<C64>> {
    if !angle.is_finite() {
        return Err(JlboError::NonFinite(format!("steering angle {angle}")));
    }
    if n_elements == 0 || !(wavelength > 0.0) {
        return Err(JlboError::InvalidConfig("steering vector needs n >= 1 and wavelength > 0".into()));
    }
    let k0 = phase_factor * spacing / wavelength * angle.sin();
    Ok(DVector::from_fn(n_elements, |k, _| C64::from_polar(1.0, -k0 * k as f64)))
}

/// `c / (f_c + j df)` with `df = 1 / (N_S_total T_S)`.
pub fn subcarrier_wavelength(j: usize, cfg: &ArrayConfig) -> f64 {
    match cfg.fixed_wavelength {
        Some(l) => l,
        None => cfg.light_speed / (cfg.carrier_hz + j as f64 * cfg.subcarrier_spacing()),
    }
}

/// Diagonal of `scale * gain_l * exp(-i 2 pi j tau_l / (N_S T_S))`.
pub fn gain_diag(gains: &[C64], delays: &[f64], j: usize, cfg: &ArrayConfig, scale: f64) -> Result<DMatrix<C64>> {
    if gains.len() != delays.len() {
        return Err(JlboError::Dimension(format!(
            "{} gains but {} delays",
            gains.len(),
            delays.len()
        )));
    }
    let rate = cfg.delay_phase_rate(j);
    let d = DVector::from_fn(gains.len(), |l, _| gains[l] * C64::from_polar(scale, -rate * delays[l]));
    Ok(DMatrix::from_diagonal(&d))
}

/// Path-loss variance `10^-0.5 * 10^-6.14 * d^-2`.
pub fn gain_variance(distance: f64) -> Result<f64> {
    if !(distance > 0.0) || !distance.is_finite() {
        return Err(JlboError::InvalidConfig(format!("distance must be positive, got {distance}")));
    }
    Ok(10f64.powf(-0.5) * 10f64.powf(-6.14) / (distance * distance))
}

/// Gains `g` (BS to RIS) and `h` (RIS to UE), BS-major, with their prior variances.
#[derive(Debug, Clone, PartialEq)]
pub struct GainRealization {
    pub g: DVector<C64>,
    pub h: DVector<C64>,
    pub var_g: Vec<f64>,
    pub var_h: Vec<f64>,
}

/// Prior variances from the BS-RIS and RIS-UE distances.
pub fn prior_variances(scene: &Scene) -> Result<(Vec<f64>, Vec<f64>)> {
    let lay = scene.check_shape()?;
    let mut vg = Vec::with_capacity(lay.n_gains_g());
    let mut vh = Vec::with_capacity(lay.n_gains_h());
    let sh = gain_variance(distance(scene.ue_position, scene.ris_position))?;
    for n in 0..lay.n_bs {
        let sg = gain_variance(distance(scene.bs_positions[n], scene.ris_position))?;
        vg.extend(std::iter::repeat_n(sg, lay.l1 + 1));
        vh.extend(std::iter::repeat_n(sh, lay.l2 + 1));
    }
    Ok((vg, vh))
}

/// Circularly-symmetric complex normal with variance `var`.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R, var: f64) -> C64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(re * s, im * s)
}

pub fn sample_gains<R: Rng + ?Sized>(var_g: &[f64], var_h: &[f64], rng: &mut R) -> Result<GainRealization> {
    if var_g.iter().chain(var_h).any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(JlboError::InvalidConfig("gain variances must be finite and non-negative".into()));
    }
    let g = DVector::from_iterator(var_g.len(), var_g.iter().map(|&v| complex_normal(rng, v)));
    let h = DVector::from_iterator(var_h.len(), var_h.iter().map(|&v| complex_normal(rng, v)));
    Ok(GainRealization {
        g,
        h,
        var_g: var_g.to_vec(),
        var_h: var_h.to_vec(),
    })
}

/// `G_n[t, j]` and `H_n[t, j]` for every BS at one subcarrier.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub slot: usize,
    pub subcarrier: usize,
    pub g: Vec<DMatrix<C64>>,
    pub h: Vec<DMatrix<C64>>,
    pub gains: GainRealization,
}

/// `G_n` at subcarrier `j` from precomputed legs.
pub(crate) fn g_channel(bs: &BsLegs, n: usize, g: &DVector<C64>, cfg: &ArrayConfig, j: usize) -> Result<DMatrix<C64>> {
    let l1 = bs.g.len();
    let mut a_t = DMatrix::zeros(cfg.n_tx, l1);
    let mut a_r = DMatrix::zeros(cfg.n_ris, l1);
    for (l, leg) in bs.g.iter().enumerate() {
        a_t.set_column(l, &cfg.steering(ArrayRole::BsTx, leg.aod, j)?);
        a_r.set_column(l, &cfg.steering(ArrayRole::RisRx, leg.aoa, j)?);
    }
    let gs: Vec<C64> = (0..l1).map(|l| g[n * l1 + l]).collect();
    let tau: Vec<f64> = bs.g.iter().map(|l| l.toa).collect();
    let gt = gain_diag(&gs, &tau, j, cfg, ((cfg.n_tx * cfg.n_ris) as f64).sqrt())?;
    Ok(&a_r * gt * a_t.adjoint())
}

/// `H_n` at subcarrier `j` from precomputed legs.
pub(crate) fn h_channel(bs: &BsLegs, n: usize, h: &DVector<C64>, cfg: &ArrayConfig, j: usize) -> Result<DMatrix<C64>> {
    let l2 = bs.h.len();
    let mut a_rb = DMatrix::zeros(cfg.n_ris, l2);
    let mut a_u = DMatrix::zeros(cfg.n_ue, l2);
    for (l, leg) in bs.h.iter().enumerate() {
        a_rb.set_column(l, &cfg.steering(ArrayRole::RisTx, leg.aod, j)?);
        a_u.set_column(l, &cfg.steering(ArrayRole::UeRx, leg.aoa, j)?);
    }
    let hs: Vec<C64> = (0..l2).map(|l| h[n * l2 + l]).collect();
    let tau: Vec<f64> = bs.h.iter().map(|l| l.toa).collect();
    let ht = gain_diag(&hs, &tau, j, cfg, ((cfg.n_ris * cfg.n_ue) as f64).sqrt())?;
    Ok(&a_u * ht * a_rb.adjoint())
}

fn check_gain_lengths(scene: &Scene, gains: &GainRealization) -> Result<()> {
    let lay = scene.check_shape()?;
    if gains.g.len() != lay.n_gains_g() || gains.h.len() != lay.n_gains_h() {
        return Err(JlboError::Dimension(format!(
            "gain vectors have lengths {}/{}, scene needs {}/{}",
            gains.g.len(),
            gains.h.len(),
            lay.n_gains_g(),
            lay.n_gains_h()
        )));
    }
    Ok(())
}

pub fn assemble_channels(scene: &Scene, gains: &GainRealization, cfg: &ArrayConfig, t: usize, j: usize) -> Result<ChannelRealization> {
    check_gain_lengths(scene, gains)?;
    let all = legs(scene)?;
    let mut g = Vec::with_capacity(all.len());
    let mut h = Vec::with_capacity(all.len());
    for (n, bs) in all.iter().enumerate() {
        g.push(g_channel(bs, n, &gains.g, cfg, j)?);
        h.push(h_channel(bs, n, &gains.h, cfg, j)?);
    }
    Ok(ChannelRealization {
        slot: t,
        subcarrier: j,
        g,
        h,
        gains: gains.clone(),
    })
}

fn dump_matrix(out: &mut String, tag: &str, n: usize, m: &DMatrix<C64>) {
    let _ = writeln!(out, "matrix {tag} {n} {} {}", m.nrows(), m.ncols());
    for (k, v) in m.iter().enumerate() {
        let _ = writeln!(out, "{k} {:e} {:e}", v.re, v.im);
    }
}

fn dump_vector(out: &mut String, tag: &str, v: &[C64]) {
    let _ = writeln!(out, "vector {tag} {}", v.len());
    for (k, x) in v.iter().enumerate() {
        let _ = writeln!(out, "{k} {:e} {:e}", x.re, x.im);
    }
}

impl ChannelRealization {
    /// Line-oriented text dump: headers followed by `index real imag` rows
    /// (matrices column-major).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "slot {}", self.slot);
        let _ = writeln!(out, "subcarrier {}", self.subcarrier);
        for (n, m) in self.g.iter().enumerate() {
            dump_matrix(&mut out, "G", n, m);
        }
        for (n, m) in self.h.iter().enumerate() {
            dump_matrix(&mut out, "H", n, m);
        }
        dump_vector(&mut out, "g", self.gains.g.as_slice());
        dump_vector(&mut out, "h", self.gains.h.as_slice());
        let vg: Vec<C64> = self.gains.var_g.iter().map(|&v| C64::new(v, 0.0)).collect();
        let vh: Vec<C64> = self.gains.var_h.iter().map(|&v| C64::new(v, 0.0)).collect();
        dump_vector(&mut out, "var_g", &vg);
        dump_vector(&mut out, "var_h", &vh);
        out
    }

    pub fn from_text(text: &str) -> Result<ChannelRealization> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
        let bad = |what: &str| JlboError::Parse(format!("channel dump: {what}"));
        let mut header = |key: &str| -> Result<usize> {
            let line = lines.next().ok_or_else(|| bad("truncated"))?;
            let mut it = line.split_whitespace();
            if it.next() != Some(key) {
                return Err(bad(&format!("expected `{key}`")));
            }
            it.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad(key))
        };
        let slot = header("slot")?;
        let subcarrier = header("subcarrier")?;
        let rest: Vec<&str> = lines.collect();
        let mut pos = 0;
        let mut g = Vec::new();
        let mut h = Vec::new();
        let mut vecs: Vec<(String, Vec<C64>)> = Vec::new();
        while pos < rest.len() {
            let head: Vec<&str> = rest[pos].split_whitespace().collect();
            pos += 1;
            let parse_entries = |pos: &mut usize, count: usize| -> Result<Vec<C64>> {
                let mut v = Vec::with_capacity(count);
                for k in 0..count {
                    let line = rest.get(*pos).ok_or_else(|| bad("truncated entries"))?;
                    *pos += 1;
                    let f: Vec<&str> = line.split_whitespace().collect();
                    if f.len() != 3 || f[0].parse::<usize>().ok() != Some(k) {
                        return Err(bad(&format!("malformed entry `{line}`")));
                    }
                    let re: f64 = f[1].parse().map_err(|_| bad("real part"))?;
                    let im: f64 = f[2].parse().map_err(|_| bad("imag part"))?;
                    v.push(C64::new(re, im));
                }
                Ok(v)
            };
            match head.as_slice() {
                ["matrix", tag, _n, rows, cols] => {
                    let r: usize = rows.parse().map_err(|_| bad("rows"))?;
                    let c: usize = cols.parse().map_err(|_| bad("cols"))?;
                    let data = parse_entries(&mut pos, r * c)?;
                    let m = DMatrix::from_vec(r, c, data);
                    match *tag {
                        "G" => g.push(m),
                        "H" => h.push(m),
                        _ => return Err(bad("unknown matrix tag")),
                    }
                }
                ["vector", tag, len] => {
                    let len: usize = len.parse().map_err(|_| bad("length"))?;
                    let data = parse_entries(&mut pos, len)?;
                    vecs.push((tag.to_string(), data));
                }
                _ => return Err(bad(&format!("unexpected line `{}`", rest[pos - 1]))),
            }
        }
        let take = |name: &str| -> Result<Vec<C64>> {
            vecs.iter()
                .find(|(t, _)| t == name)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| bad(&format!("missing vector {name}")))
        };
        let gv = take("g")?;
        let hv = take("h")?;
        Ok(ChannelRealization {
            slot,
            subcarrier,
            g,
            h,
            gains: GainRealization {
                g: DVector::from_vec(gv),
                h: DVector::from_vec(hv),
                var_g: take("var_g")?.iter().map(|c| c.re).collect(),
                var_h: take("var_h")?.iter().map(|c| c.re).collect(),
            },
        })
    }
}
