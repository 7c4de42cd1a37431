//! Planar deployment geometry and the map from location parameters to path
//! delays and angles.
//!
//! Angles are measured with `atan2` on the difference vector, so the sign of
//! every angle follows the sign of the y-component of the direction. A path
//! angle is the direction of the far endpoint as seen from the array, minus
//! the array orientation. Reported angles are wrapped to `[-pi, pi)`; the raw
//! values feed the steering vectors directly.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{JlboError, Result};

pub type Point = [f64; 2];

pub(crate) fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

pub(crate) fn norm(a: Point) -> f64 {
    a[0].hypot(a[1])
}

pub fn distance(a: Point, b: Point) -> f64 {
    norm(sub(a, b))
}

/// Wraps an angle to `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let w = a - two_pi * ((a + PI) / two_pi).floor();
    if w >= PI {
        w - two_pi
    } else {
        w
    }
}

/// Path counts that fix the packing of the location vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub n_bs: usize,
    pub l1: usize,
    pub l2: usize,
}

impl Layout {
    pub fn new(n_bs: usize, l1: usize, l2: usize) -> Self {
        Layout { n_bs, l1, l2 }
    }

    pub fn kappa_len(&self) -> usize {
        2 * self.n_bs * (self.l1 + 1) + 2 * self.n_bs * (self.l2 + 1) + 6
    }

    pub fn kappa1_len(&self) -> usize {
        2 * self.n_bs * (self.l1 + 1) + 3
    }

    pub fn kappa2_len(&self) -> usize {
        2 * self.n_bs * (self.l2 + 1) + 3
    }

    /// Index of the x-coordinate of `r_{l,n}` (0-based `n`).
    pub fn r_index(&self, l: usize, n: usize) -> usize {
        2 * (l * self.n_bs + n)
    }

    /// Index of the x-coordinate of `u_{l,n}` (0-based `n`).
    pub fn u_index(&self, l: usize, n: usize) -> usize {
        2 * self.n_bs * (self.l1 + 1) + 2 * (l * self.n_bs + n)
    }

    pub fn ris_orientation_index(&self) -> usize {
        2 * self.n_bs * (self.l1 + 1) + 2 * self.n_bs * (self.l2 + 1)
    }

    pub fn ue_orientation_index(&self) -> usize {
        self.ris_orientation_index() + 1
    }

    pub fn ris_index(&self) -> usize {
        self.ris_orientation_index() + 2
    }

    pub fn ue_index(&self) -> usize {
        self.ris_orientation_index() + 4
    }

    /// κ indices of the UE-side half `[x, varphi, r]`, in half order.
    pub fn kappa1_indices(&self) -> Vec<usize> {
        let mut idx = vec![self.ue_index(), self.ue_index() + 1, self.ris_orientation_index()];
        idx.extend(0..2 * self.n_bs * (self.l1 + 1));
        idx
    }

    /// κ indices of the RIS-side half `[b, omega, u]`, in half order.
    pub fn kappa2_indices(&self) -> Vec<usize> {
        let base = self.u_index(0, 0);
        let mut idx = vec![self.ris_index(), self.ris_index() + 1, self.ue_orientation_index()];
        idx.extend(base..base + 2 * self.n_bs * (self.l2 + 1));
        idx
    }

    pub fn half_indices(&self, half: Half) -> Vec<usize> {
        match half {
            Half::Ue => self.kappa1_indices(),
            Half::Ris => self.kappa2_indices(),
        }
    }

    /// False for the LOS scatterer slots, which no path reads.
    pub fn is_active(&self, idx: usize) -> bool {
        let r_end = 2 * self.n_bs * (self.l1 + 1);
        let u_end = r_end + 2 * self.n_bs * (self.l2 + 1);
        if idx < 2 * self.n_bs {
            false
        } else if idx < r_end {
            true
        } else if idx < u_end {
            idx - r_end >= 2 * self.n_bs
        } else {
            true
        }
    }

    pub fn n_gains_g(&self) -> usize {
        self.n_bs * (self.l1 + 1)
    }

    pub fn n_gains_h(&self) -> usize {
        self.n_bs * (self.l2 + 1)
    }
}

/// The two blocks of the location vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Half {
    /// `[x, varphi, r]`, paired with the BS-RIS gains `g`.
    Ue,
    /// `[b, omega, u]`, paired with the RIS-UE gains `h`.
    Ris,
}

impl Half {
    pub fn name(self) -> &'static str {
        match self {
            Half::Ue => "kappa1",
            Half::Ris => "kappa2",
        }
    }
}

/// Deployment geometry.
///
/// Scatterer tables are indexed `[n][l]` with `l = 0..=L`. Slot `l = 0`
/// belongs to the LOS path; it is carried through the location vector but
/// never read by the path geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub bs_positions: Vec<Point>,
    pub bs_orientations: Vec<f64>,
    pub ris_position: Point,
    pub ris_orientation: f64,
    pub ue_position: Point,
    pub ue_orientation: f64,
    pub bs_ris_scatterers: Vec<Vec<Point>>,
    pub ris_ue_scatterers: Vec<Vec<Point>>,
    pub light_speed: f64,
}

impl Scene {
    pub fn layout(&self) -> Layout {
        Layout {
            n_bs: self.bs_positions.len(),
            l1: self.bs_ris_scatterers.first().map_or(0, |v| v.len().saturating_sub(1)),
            l2: self.ris_ue_scatterers.first().map_or(0, |v| v.len().saturating_sub(1)),
        }
    }

    pub fn check_shape(&self) -> Result<Layout> {
        let lay = self.layout();
        let n = lay.n_bs;
        if n == 0 {
            return Err(JlboError::Dimension("scene has no base stations".into()));
        }
        if self.bs_orientations.len() != n
            || self.bs_ris_scatterers.len() != n
            || self.ris_ue_scatterers.len() != n
        {
            return Err(JlboError::Dimension(format!(
                "per-BS tables must have {n} entries"
            )));
        }
        if self.bs_ris_scatterers.iter().any(|v| v.len() != lay.l1 + 1)
            || self.ris_ue_scatterers.iter().any(|v| v.len() != lay.l2 + 1)
        {
            return Err(JlboError::Dimension("ragged scatterer table".into()));
        }
        if !(self.light_speed > 0.0) {
            return Err(JlboError::InvalidConfig("light speed must be positive".into()));
        }
        Ok(lay)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| JlboError::Parse(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Scene> {
        let s: Scene = toml::from_str(text).map_err(|e| JlboError::Parse(e.to_string()))?;
        s.check_shape()?;
        Ok(s)
    }
}

/// Inputs to [`sample_scene`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub layout: Layout,
    pub region: [f64; 2],
    pub min_separation: f64,
    pub max_redraws: usize,
    pub light_speed: f64,
}

impl SceneConfig {
    pub fn new(layout: Layout, region: [f64; 2]) -> Self {
        SceneConfig {
            layout,
            region,
            min_separation: 1.0,
            max_redraws: 10_000,
            light_speed: 3e8,
        }
    }
}

fn uniform_point<R: Rng + ?Sized>(rng: &mut R, region: [f64; 2]) -> Point {
    [rng.random::<f64>() * region[0], rng.random::<f64>() * region[1]]
}

fn uniform_angle<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    wrap_angle(-PI + 2.0 * PI * rng.random::<f64>())
}

fn midpoint(a: Point, b: Point) -> Point {
    [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]
}

/// Draws BS, RIS, UE and scatterer positions uniformly in the region and
/// orientations uniformly in `[-pi, pi)`. Draws with two entities closer than
/// the minimum separation are rejected.
pub fn sample_scene<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> Result<Scene> {
    let [w, h] = cfg.region;
    if !(w > 0.0 && h > 0.0) || !w.is_finite() || !h.is_finite() {
        return Err(JlboError::InvalidConfig(format!(
            "region must have positive extent, got {w} x {h}"
        )));
    }
    let lay = cfg.layout;
    if lay.n_bs == 0 {
        return Err(JlboError::InvalidConfig("need at least one base station".into()));
    }
    for _ in 0..cfg.max_redraws.max(1) {
        let bs_positions: Vec<Point> = (0..lay.n_bs).map(|_| uniform_point(rng, cfg.region)).collect();
        let bs_orientations: Vec<f64> = (0..lay.n_bs).map(|_| uniform_angle(rng)).collect();
        let ris_position = uniform_point(rng, cfg.region);
        let ris_orientation = uniform_angle(rng);
        let ue_position = uniform_point(rng, cfg.region);
        let ue_orientation = uniform_angle(rng);
        let mut bs_ris_scatterers = Vec::with_capacity(lay.n_bs);
        let mut ris_ue_scatterers = Vec::with_capacity(lay.n_bs);
        for n in 0..lay.n_bs {
            let mut row = vec![midpoint(bs_positions[n], ris_position)];
            row.extend((0..lay.l1).map(|_| uniform_point(rng, cfg.region)));
            bs_ris_scatterers.push(row);
            let mut row = vec![midpoint(ris_position, ue_position)];
            row.extend((0..lay.l2).map(|_| uniform_point(rng, cfg.region)));
            ris_ue_scatterers.push(row);
        }
        let scene = Scene {
            bs_positions,
            bs_orientations,
            ris_position,
            ris_orientation,
            ue_position,
            ue_orientation,
            bs_ris_scatterers,
            ris_ue_scatterers,
            light_speed: cfg.light_speed,
        };
        if min_pairwise_distance(&scene) >= cfg.min_separation {
            return Ok(scene);
        }
    }
    Err(JlboError::SamplingExhausted(cfg.max_redraws))
}

/// Smallest distance between any two entities (LOS slots excluded).
pub fn min_pairwise_distance(scene: &Scene) -> f64 {
    let mut pts: Vec<Point> = scene.bs_positions.clone();
    pts.push(scene.ris_position);
    pts.push(scene.ue_position);
    for row in scene.bs_ris_scatterers.iter().chain(&scene.ris_ue_scatterers) {
        pts.extend(row.iter().skip(1).copied());
    }
    let mut best = f64::INFINITY;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            best = best.min(distance(pts[i], pts[j]));
        }
    }
    best
}

/// Sparse gradient with respect to κ: `(index, value)` pairs.
pub type Grad = Vec<(usize, f64)>;

/// One hop sequence (BS to RIS or RIS to UE) with its delay, departure and
/// arrival angles and their κ-gradients.
#[derive(Debug, Clone)]
pub struct Leg {
    pub toa: f64,
    pub aod: f64,
    pub aoa: f64,
    pub d_toa: Grad,
    pub d_aod: Grad,
    pub d_aoa: Grad,
}

/// All legs of one base station: `g[l1]` for BS to RIS, `h[l2]` for RIS to UE.
#[derive(Debug, Clone)]
pub struct BsLegs {
    pub g: Vec<Leg>,
    pub h: Vec<Leg>,
}

#[derive(Clone, Copy)]
struct Node {
    p: Point,
    idx: Option<usize>,
}

struct Segment {
    len: f64,
    d_len: Grad,
    ang: f64,
    d_ang: Grad,
}

fn push2(g: &mut Grad, idx: Option<usize>, v: [f64; 2]) {
    if let Some(i) = idx {
        g.push((i, v[0]));
        g.push((i + 1, v[1]));
    }
}

/// Length of `to - from` and its direction angle, with gradients.
fn segment(from: Node, to: Node, what: &str) -> Result<Segment> {
    let d = sub(to.p, from.p);
    let len = norm(d);
    if !len.is_finite() {
        return Err(JlboError::NonFinite(format!("{what}: non-finite endpoint")));
    }
    if len < 1e-9 {
        return Err(JlboError::Geometry(format!("{what}: coincident endpoints")));
    }
    let u = [d[0] / len, d[1] / len];
    let mut d_len = Grad::new();
    push2(&mut d_len, to.idx, u);
    push2(&mut d_len, from.idx, [-u[0], -u[1]]);
    let l2 = len * len;
    let a = [-d[1] / l2, d[0] / l2];
    let mut d_ang = Grad::new();
    push2(&mut d_ang, to.idx, a);
    push2(&mut d_ang, from.idx, [-a[0], -a[1]]);
    Ok(Segment {
        len,
        d_len,
        ang: d[1].atan2(d[0]),
        d_ang,
    })
}

fn scaled(g: &Grad, s: f64) -> Grad {
    g.iter().map(|&(i, v)| (i, v * s)).collect()
}

fn with_orientation(mut g: Grad, idx: Option<usize>) -> Grad {
    if let Some(i) = idx {
        g.push((i, -1.0));
    }
    g
}

/// Builds a leg from `start` to `end`, optionally through `via`.
/// `start_orient`/`end_orient` are the array orientations at either end.
fn leg(
    start: Node,
    via: Option<Node>,
    end: Node,
    start_orient: (f64, Option<usize>),
    end_orient: (f64, Option<usize>),
    c: f64,
    what: &str,
) -> Result<Leg> {
    let (len, d_len, depart, arrive) = match via {
        None => {
            let fwd = segment(start, end, what)?;
            let back = segment(end, start, what)?;
            (fwd.len, fwd.d_len.clone(), fwd, back)
        }
        Some(v) => {
            let s1 = segment(start, v, what)?;
            let s2 = segment(v, end, what)?;
            let back = segment(end, v, what)?;
            let mut d = s1.d_len.clone();
            d.extend(s2.d_len.iter().copied());
            (s1.len + s2.len, d, s1, back)
        }
    };
    Ok(Leg {
        toa: len / c,
        aod: depart.ang - start_orient.0,
        aoa: arrive.ang - end_orient.0,
        d_toa: scaled(&d_len, 1.0 / c),
        d_aod: with_orientation(depart.d_ang, start_orient.1),
        d_aoa: with_orientation(arrive.d_ang, end_orient.1),
    })
}

/// Delays, angles and their κ-gradients for every path of every BS.
pub fn legs(scene: &Scene) -> Result<Vec<BsLegs>> {
    let lay = scene.check_shape()?;
    let c = scene.light_speed;
    let ris = Node { p: scene.ris_position, idx: Some(lay.ris_index()) };
    let ue = Node { p: scene.ue_position, idx: Some(lay.ue_index()) };
    let ris_or = (scene.ris_orientation, Some(lay.ris_orientation_index()));
    let ue_or = (scene.ue_orientation, Some(lay.ue_orientation_index()));
    let mut out = Vec::with_capacity(lay.n_bs);
    for n in 0..lay.n_bs {
        let bs = Node { p: scene.bs_positions[n], idx: None };
        let bs_or = (scene.bs_orientations[n], None);
        let mut g = Vec::with_capacity(lay.l1 + 1);
        for l in 0..=lay.l1 {
            let via = (l > 0).then(|| Node {
                p: scene.bs_ris_scatterers[n][l],
                idx: Some(lay.r_index(l, n)),
            });
            g.push(leg(bs, via, ris, bs_or, ris_or, c, &format!("BS {} -> RIS path {l}", n + 1))?);
        }
        let mut h = Vec::with_capacity(lay.l2 + 1);
        for l in 0..=lay.l2 {
            let via = (l > 0).then(|| Node {
                p: scene.ris_ue_scatterers[n][l],
                idx: Some(lay.u_index(l, n)),
            });
            h.push(leg(ris, via, ue, ris_or, ue_or, c, &format!("RIS -> UE path {l} (BS {})", n + 1))?);
        }
        out.push(BsLegs { g, h });
    }
    Ok(out)
}

/// Per-path delays (s) and wrapped angles (rad), indexed `[n][l]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathParams {
    pub toa_bs_ris: Vec<Vec<f64>>,
    pub toa_ris_ue: Vec<Vec<f64>>,
    pub aod_bs: Vec<Vec<f64>>,
    pub aoa_ris: Vec<Vec<f64>>,
    pub aod_ris: Vec<Vec<f64>>,
    pub aoa_ue: Vec<Vec<f64>>,
}

pub fn path_params(scene: &Scene) -> Result<PathParams> {
    let legs = legs(scene)?;
    let pick = |side: fn(&BsLegs) -> &Vec<Leg>, f: fn(&Leg) -> f64| -> Vec<Vec<f64>> {
        legs.iter().map(|b| side(b).iter().map(f).collect()).collect()
    };
    Ok(PathParams {
        toa_bs_ris: pick(|b| &b.g, |l| l.toa),
        toa_ris_ue: pick(|b| &b.h, |l| l.toa),
        aod_bs: pick(|b| &b.g, |l| wrap_angle(l.aod)),
        aoa_ris: pick(|b| &b.g, |l| wrap_angle(l.aoa)),
        aod_ris: pick(|b| &b.h, |l| wrap_angle(l.aod)),
        aoa_ue: pick(|b| &b.h, |l| wrap_angle(l.aoa)),
    })
}

/// The packed location vector `[r, u, varphi, omega, b, x]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationParams {
    pub layout: Layout,
    pub kappa: Vec<f64>,
}

impl LocationParams {
    pub fn new(layout: Layout, kappa: Vec<f64>) -> Result<Self> {
        if kappa.len() != layout.kappa_len() {
            return Err(JlboError::Dimension(format!(
                "kappa has length {}, layout needs {}",
                kappa.len(),
                layout.kappa_len()
            )));
        }
        Ok(LocationParams { layout, kappa })
    }

    pub fn half(&self, half: Half) -> Vec<f64> {
        self.layout.half_indices(half).iter().map(|&i| self.kappa[i]).collect()
    }

    /// `[x, varphi, r]`.
    pub fn kappa1(&self) -> Vec<f64> {
        self.half(Half::Ue)
    }

    /// `[b, omega, u]`.
    pub fn kappa2(&self) -> Vec<f64> {
        self.half(Half::Ris)
    }

    pub fn set_half(&mut self, half: Half, values: &[f64]) -> Result<()> {
        let idx = self.layout.half_indices(half);
        if idx.len() != values.len() {
            return Err(JlboError::Dimension(format!(
                "{} has length {}, got {}",
                half.name(),
                idx.len(),
                values.len()
            )));
        }
        for (&i, &v) in idx.iter().zip(values) {
            self.kappa[i] = v;
        }
        Ok(())
    }

    pub fn ue_position(&self) -> Point {
        let i = self.layout.ue_index();
        [self.kappa[i], self.kappa[i + 1]]
    }
}

pub fn pack_kappa(scene: &Scene) -> Result<LocationParams> {
    let lay = scene.check_shape()?;
    let mut kappa = vec![0.0; lay.kappa_len()];
    for n in 0..lay.n_bs {
        for l in 0..=lay.l1 {
            let i = lay.r_index(l, n);
            kappa[i..i + 2].copy_from_slice(&scene.bs_ris_scatterers[n][l]);
        }
        for l in 0..=lay.l2 {
            let i = lay.u_index(l, n);
            kappa[i..i + 2].copy_from_slice(&scene.ris_ue_scatterers[n][l]);
        }
    }
    kappa[lay.ris_orientation_index()] = scene.ris_orientation;
    kappa[lay.ue_orientation_index()] = scene.ue_orientation;
    let b = lay.ris_index();
    kappa[b..b + 2].copy_from_slice(&scene.ris_position);
    let x = lay.ue_index();
    kappa[x..x + 2].copy_from_slice(&scene.ue_position);
    Ok(LocationParams { layout: lay, kappa })
}

/// Replaces the location-dependent parts of `template` with `params`.
pub fn unpack_kappa(params: &LocationParams, template: &Scene) -> Result<Scene> {
    let lay = template.check_shape()?;
    if lay != params.layout || params.kappa.len() != lay.kappa_len() {
        return Err(JlboError::Dimension(format!(
            "location layout {:?} does not match scene layout {:?}",
            params.layout, lay
        )));
    }
    let k = &params.kappa;
    let pt = |i: usize| [k[i], k[i + 1]];
    let mut s = template.clone();
    for n in 0..lay.n_bs {
        for l in 0..=lay.l1 {
            s.bs_ris_scatterers[n][l] = pt(lay.r_index(l, n));
        }
        for l in 0..=lay.l2 {
            s.ris_ue_scatterers[n][l] = pt(lay.u_index(l, n));
        }
    }
    s.ris_orientation = k[lay.ris_orientation_index()];
    s.ue_orientation = k[lay.ue_orientation_index()];
    s.ris_position = pt(lay.ris_index());
    s.ue_position = pt(lay.ue_index());
    Ok(s)
}

/// Scene with one κ half replaced.
pub fn with_half(template: &Scene, half: Half, values: &[f64]) -> Result<Scene> {
    let mut p = pack_kappa(template)?;
    p.set_half(half, values)?;
    unpack_kappa(&p, template)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_bs(b: Point, r: Option<Point>) -> Scene {
        let mut g_row = vec![[0.0, 0.0]];
        g_row.extend(r);
        Scene {
            bs_positions: vec![[0.0, 0.0]],
            bs_orientations: vec![0.0],
            ris_position: b,
            ris_orientation: 0.3,
            ue_position: [100.0, -20.0],
            ue_orientation: -0.4,
            bs_ris_scatterers: vec![g_row],
            ris_ue_scatterers: vec![vec![[0.0, 0.0]]],
            light_speed: 3e8,
        }
    }

    #[test]
    fn los_delay_is_distance_over_c() {
        let p = path_params(&one_bs([30.0, 40.0], None)).unwrap();
        assert!((p.toa_bs_ris[0][0] - 50.0 / 3e8).abs() < 1e-20);
        let mut vac = one_bs([30.0, 40.0], None);
        vac.light_speed = 299_792_458.0;
        let p = path_params(&vac).unwrap();
        assert!((p.toa_bs_ris[0][0] - 1.6678e-7).abs() < 1e-11);
    }

    #[test]
    fn scattered_delay_sums_segments() {
        let p = path_params(&one_bs([30.0, 40.0], Some([30.0, 0.0]))).unwrap();
        assert!((p.toa_bs_ris[0][1] - 70.0 / 3e8).abs() < 1e-20);
    }

    #[test]
    fn aligned_departure_angle_is_zero() {
        let p = path_params(&one_bs([1.0, 0.0], None)).unwrap();
        assert_eq!(p.aod_bs[0][0], 0.0);
    }

    #[test]
    fn angle_sign_follows_y_component() {
        let up = path_params(&one_bs([1.0, 1.0], None)).unwrap();
        let down = path_params(&one_bs([1.0, -1.0], None)).unwrap();
        assert!((up.aod_bs[0][0] - PI / 4.0).abs() < 1e-15);
        assert!((down.aod_bs[0][0] + PI / 4.0).abs() < 1e-15);
    }

    #[test]
    fn coincident_points_are_rejected() {
        let err = path_params(&one_bs([0.0, 0.0], None)).unwrap_err();
        assert!(err.to_string().contains("BS 1 -> RIS path 0"));
    }

    #[test]
    fn kappa_dimensions() {
        let lay = Layout::new(1, 1, 1);
        assert_eq!(lay.kappa_len(), 14);
        assert_eq!(lay.kappa2_len(), 7);
        assert_eq!(lay.kappa1_len(), 7);
        assert_eq!(lay.kappa1_indices().len(), lay.kappa1_len());
        assert_eq!(lay.kappa2_indices().len(), lay.kappa2_len());
    }

    #[test]
    fn halves_partition_kappa() {
        let lay = Layout::new(3, 2, 4);
        let mut all: Vec<usize> = lay.kappa1_indices();
        all.extend(lay.kappa2_indices());
        all.sort_unstable();
        assert_eq!(all, (0..lay.kappa_len()).collect::<Vec<_>>());
    }

    #[test]
    fn inactive_slots_are_los_scatterers() {
        let lay = Layout::new(2, 1, 2);
        let inactive: Vec<usize> = (0..lay.kappa_len()).filter(|&i| !lay.is_active(i)).collect();
        let mut expect = Vec::new();
        for n in 0..2 {
            expect.extend([lay.r_index(0, n), lay.r_index(0, n) + 1]);
            expect.extend([lay.u_index(0, n), lay.u_index(0, n) + 1]);
        }
        expect.sort_unstable();
        assert_eq!(inactive, expect);
    }

    #[test]
    fn sampling_is_deterministic_and_in_region() {
        let cfg = SceneConfig::new(Layout::new(5, 2, 2), [1000.0, 1000.0]);
        let a = sample_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = sample_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.bs_positions.len(), 5);
        for p in &a.bs_positions {
            assert!((0.0..=1000.0).contains(&p[0]) && (0.0..=1000.0).contains(&p[1]));
        }
        for o in a.bs_orientations.iter().chain([&a.ris_orientation, &a.ue_orientation]) {
            assert!((-PI..PI).contains(o));
        }
        assert!(min_pairwise_distance(&a) >= 1.0);
    }

    #[test]
    fn empty_region_is_an_error() {
        let cfg = SceneConfig::new(Layout::new(1, 0, 0), [0.0, 0.0]);
        assert!(sample_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn impossible_separation_exhausts_redraws() {
        let mut cfg = SceneConfig::new(Layout::new(3, 1, 1), [1.0, 1.0]);
        cfg.min_separation = 10.0;
        cfg.max_redraws = 20;
        assert!(matches!(
            sample_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(1)),
            Err(JlboError::SamplingExhausted(20))
        ));
    }

    #[test]
    fn scene_text_round_trip() {
        let cfg = SceneConfig::new(Layout::new(2, 1, 2), [500.0, 300.0]);
        let s = sample_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let text = s.to_toml().unwrap();
        assert!(text.contains("ris_position"));
        assert_eq!(Scene::from_toml(&text).unwrap(), s);
    }

    #[test]
    fn wrap_angle_range() {
        for a in [-7.0, -PI, -1.0, 0.0, PI, 3.5, 12.0] {
            let w = wrap_angle(a);
            assert!((-PI..PI).contains(&w), "{a} -> {w}");
            assert!(((w - a) / (2.0 * PI)).fract().abs() < 1e-12 || ((w - a) / (2.0 * PI)).fract().abs() > 1.0 - 1e-12);
        }
    }
}
