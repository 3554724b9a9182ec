//! Averaged perturbing function of one planet and its element gradient.
//!
//! The double average over both mean anomalies of `μk²/|X - X'|` is
//! evaluated on the torus. Away from orbit crossings the integrand is smooth
//! and the periodic trapezoidal rule is used. Close to a crossing each small
//! critical point gets a windowed polar patch (a smooth partition of unity
//! with the trapezoidal rule) and, when the signed distance of a minimum is
//! below the extraction trigger, the
//! quadratic model `δ_h² = d̃_h² + (V - V_h)ᵀ 𝒜_h (V - V_h)` is subtracted in
//! a disk `D_h` and integrated in closed form. Replacing `|d̃_h|` by `±d̃_h`
//! in the closed form yields the two analytic continuations of the field
//! across the crossing surface.

use nalgebra::{Matrix2, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::distance::{
    critical_points_with, crossing_matrix, CriticalKind, CriticalSet, OrbitPair, ScanSettings, TANGENCY_EPS,
};
use crate::error::{Error, Result};
use crate::kepler::{to_secular_partials, wrap_pi, Orbit, SecularState, GM_SUN};
use crate::quad::{
    build_cells, integrate_cells, integrate_doubling, integrate_patched, outer_weight, trapezoid_grid, Focus, Patch,
    PatchSample, QuadResult, Sample, Vals,
};

/// Optional patches closer than this (in `ξ` units) to an accepted one are
/// dropped.
const MIN_PATCH_SEPARATION: f64 = 0.3;

/// Side of the crossing surface: `Plus` where `d̃_h > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Plus,
    Minus,
}

impl Side {
    pub fn sigma(self) -> f64 {
        match self {
            Side::Plus => 1.0,
            Side::Minus => -1.0,
        }
    }

    pub fn of(d_signed: f64) -> Side {
        if d_signed >= 0.0 {
            Side::Plus
        } else {
            Side::Minus
        }
    }

    pub fn flipped(self) -> Side {
        match self {
            Side::Plus => Side::Minus,
            Side::Minus => Side::Plus,
        }
    }
}

/// Numerical settings of the averaged-field evaluation.
#[derive(Debug, Clone, Copy)]
pub struct FieldSettings {
    /// Relative tolerance of the torus quadrature.
    pub tol: f64,
    /// Critical points closer than this (au) get a polar patch.
    pub focus_au: f64,
    /// Minima with `|d̃| <` this (au) get singularity extraction.
    pub trigger_au: f64,
    /// The plain field refuses to run below this orbit distance (au).
    pub margin_au: f64,
    /// Band (au) in which extraction and plain quadrature are both run
    /// and compared.
    pub check_band: (f64, f64),
    /// Fixed extraction radius in `ξ` units, if any.
    pub radius: Option<f64>,
    pub max_level: usize,
    pub trapezoid_start: usize,
    pub trapezoid_max: usize,
    pub scan: ScanSettings,
}

impl Default for FieldSettings {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            focus_au: 0.2,
            trigger_au: 0.01,
            margin_au: 1e-6,
            check_band: (0.008, 0.012),
            radius: None,
            max_level: 5,
            trapezoid_start: 32,
            trapezoid_max: 4096,
            scan: ScanSettings::default(),
        }
    }
}

/// `R̄` and its partials with respect to `(a, e, i, Ω, ω)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeplerianField {
    pub value: f64,
    pub grad: [f64; 5],
}

impl KeplerianField {
    pub(crate) fn from_vals(v: &Vals, scale: f64) -> Self {
        Self { value: v[0] * scale, grad: [v[1] * scale, v[2] * scale, v[3] * scale, v[4] * scale, v[5] * scale] }
    }

    pub fn zero() -> Self {
        Self { value: 0.0, grad: [0.0; 5] }
    }

    /// Partials with respect to `(G, Z, g, z)` for the asteroid orbit.
    pub fn secular(&self, orbit: &Orbit) -> [f64; 4] {
        to_secular_partials(orbit.a, orbit.e, orbit.i, &self.grad)
    }

    pub fn add(&self, o: &Self) -> Self {
        let mut g = self.grad;
        for (x, y) in g.iter_mut().zip(o.grad) {
            *x += y;
        }
        Self { value: self.value + o.value, grad: g }
    }

    pub fn sub(&self, o: &Self) -> Self {
        let mut g = self.grad;
        for (x, y) in g.iter_mut().zip(o.grad) {
            *x -= y;
        }
        Self { value: self.value - o.value, grad: g }
    }

    pub fn max_abs_grad(&self) -> f64 {
        self.grad.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// `μk²/(4π²)`: converts a torus integral into an average of `μk²/d`.
pub fn field_scale(mu: f64) -> f64 {
    mu * GM_SUN / (4.0 * PI * PI)
}

/// Quadratic distance model at a local minimum with its element partials
/// (asteroid elements only; the planet is held fixed).
#[derive(Debug, Clone, Copy)]
pub struct LocalModel {
    pub h: usize,
    pub v: Vector2<f64>,
    /// Separation `X - X'` at `v`.
    pub delta: Vector3<f64>,
    pub d_signed: f64,
    pub a: Matrix2<f64>,
    pub det: f64,
    /// `(det 𝒜)^{-1/2}`.
    pub w: f64,
    pub dd_signed: [f64; 5],
    pub dd2: [f64; 5],
    pub dv: [Vector2<f64>; 5],
    pub da: [Matrix2<f64>; 5],
    pub dw: [f64; 5],
}

impl LocalModel {
    pub fn new(pair: &OrbitPair, set: &CriticalSet, h: usize) -> Result<Self> {
        let cp = set.minimum(h)?;
        let (p, q) = pair.jets(cp.v)?;
        let t1 = p.x1;
        let t2 = q.x1;
        let t3 = t1.cross(&t2);
        let n3 = t3.norm();
        if n3 < TANGENCY_EPS {
            return Err(Error::TangentOrbits { h });
        }
        let nhat = t3 / n3;
        let cm = crossing_matrix(pair, cp)?;
        let a = cm.a;
        let det = cm.det;
        if !(det > 1e-14 * a.norm_squared()) {
            return Err(Error::DegenerateCrossing { h, det });
        }
        let w = 1.0 / det.sqrt();
        let hinv = (a * 2.0).try_inverse().ok_or(Error::DegenerateCrossing { h, det })?;
        let (v, delta) = polish_minimum(pair, cp.v, &hinv, t1, t2)?;

        let mut dd_signed = [0.0; 5];
        let mut dd2 = [0.0; 5];
        let mut dv = [Vector2::zeros(); 5];
        let mut da = [Matrix2::zeros(); 5];
        let mut dw = [0.0; 5];
        for k in 0..5 {
            dd_signed[k] = nhat.dot(&p.dx[k]);
            dd2[k] = 2.0 * delta.dot(&p.dx[k]);
            let dgrad = Vector2::new(2.0 * (p.dx[k].dot(&t1) + delta.dot(&p.dx1[k])), -2.0 * p.dx[k].dot(&t2));
            let dvk = -(hinv * dgrad);
            let (dl, dlp) = (dvk.x, dvk.y);
            let d_delta = p.dx[k] + t1 * dl - t2 * dlp;
            let d_t1 = p.dx1[k] + p.x2 * dl;
            let d_x1pp = p.dx2[k] + p.x3 * dl;
            let d_t2 = q.x2 * dlp;
            let d_x2pp = q.x3 * dlp;
            let da11 = 2.0 * t1.dot(&d_t1) + d_delta.dot(&p.x2) + delta.dot(&d_x1pp);
            let da12 = -(d_t1.dot(&t2) + t1.dot(&d_t2));
            let da22 = 2.0 * t2.dot(&d_t2) - d_delta.dot(&q.x2) - delta.dot(&d_x2pp);
            let ddet = da11 * a[(1, 1)] + a[(0, 0)] * da22 - 2.0 * a[(0, 1)] * da12;
            dv[k] = dvk;
            da[k] = Matrix2::new(da11, da12, da12, da22);
            dw[k] = -0.5 * w * w * w * ddet;
        }
        Ok(Self { h, v, delta, d_signed: nhat.dot(&delta), a, det, w, dd_signed, dd2, dv, da, dw })
    }

    /// `δ_h²` at offset `u = V - V_h`.
    pub fn delta2(&self, u: Vector2<f64>) -> f64 {
        self.d_signed * self.d_signed + u.dot(&(self.a * u))
    }

    /// `1/δ_h` and its partials at offset `u`.
    pub fn inv_delta(&self, u: Vector2<f64>) -> Vals {
        let d2 = self.delta2(u);
        let inv = 1.0 / d2.sqrt();
        let inv3 = inv * inv * inv;
        let au = self.a * u;
        let mut out = Vals::zeros();
        out[0] = inv;
        for k in 0..5 {
            let dd = self.dd2[k] - 2.0 * self.dv[k].dot(&au) + u.dot(&(self.da[k] * u));
            out[1 + k] = -0.5 * inv3 * dd;
        }
        out
    }

    /// `∬_{D_h} 1/δ_h` over the disk of `ξ`-radius `r`.
    pub fn disk_integral(&self, r: f64) -> f64 {
        let d = self.d_signed;
        2.0 * PI * self.w * ((d * d + r * r).sqrt() - d.abs())
    }

    /// Closed-form disk term of the continuation on `side`: the value
    /// `2πw(ρ_r - σd̃)` and its total element derivative, including the
    /// motion of the disk boundary.
    pub fn closed(&self, r: f64, side: Side) -> Vals {
        let sigma = side.sigma();
        let d = self.d_signed;
        let rho = (d * d + r * r).sqrt();
        let mut out = Vals::zeros();
        out[0] = 2.0 * PI * self.w * (rho - sigma * d);
        for k in 0..5 {
            out[1 + k] = 2.0 * PI * self.dw[k] * (rho - sigma * d)
                + 2.0 * PI * self.w * (d * self.dd_signed[k] / rho - sigma * self.dd_signed[k])
                - PI * r * r * self.dw[k] / rho;
        }
        out
    }

    /// Continuation on the minus side minus the one on the plus side, as a
    /// torus integral: `4π(w d̃, ∂w d̃ + w ∂d̃)`.
    pub fn jump(&self) -> Vals {
        let mut out = Vals::zeros();
        out[0] = 4.0 * PI * self.w * self.d_signed;
        for k in 0..5 {
            out[1 + k] = 4.0 * PI * (self.dw[k] * self.d_signed + self.w * self.dd_signed[k]);
        }
        out
    }
}

/// Newton steps on the gradient of `d²` built from orbit increments, so the
/// separation at the returned point has no tangential residue above the
/// rounding of a single position difference.
fn polish_minimum(
    pair: &OrbitPair,
    v0: Vector2<f64>,
    hinv: &Matrix2<f64>,
    t1: Vector3<f64>,
    t2: Vector3<f64>,
) -> Result<(Vector2<f64>, Vector3<f64>)> {
    let base = pair.asteroid.position(v0.x) - pair.planet.position(v0.y);
    let mut u = Vector2::zeros();
    let mut delta = base;
    for _ in 0..3 {
        let g = Vector2::new(2.0 * delta.dot(&t1), -2.0 * delta.dot(&t2));
        let step = -(hinv * g);
        if !(step.amax() > 1e-300) {
            break;
        }
        u += step;
        delta = base + pair.asteroid.position_increment(v0.x, u.x)? - pair.planet.position_increment(v0.y, u.y)?;
    }
    Ok((v0 + u, delta))
}

fn plain_from(x: Vector3<f64>, dx: &[Vector3<f64>; 5], xp: Vector3<f64>) -> Vals {
    plain_delta(x - xp, dx)
}

fn plain_delta(delta: Vector3<f64>, dx: &[Vector3<f64>; 5]) -> Vals {
    let inv = 1.0 / delta.norm();
    let inv3 = inv * inv * inv;
    let mut out = Vals::zeros();
    out[0] = inv;
    for k in 0..5 {
        out[1 + k] = -delta.dot(&dx[k]) * inv3;
    }
    out
}

/// Centre of a polar patch or cell. Near it the separation `X - X'` is
/// assembled from the centre value and the increments along each orbit,
/// which keeps its relative precision as it shrinks.
#[derive(Debug, Clone, Copy)]
struct Anchor {
    v: Vector2<f64>,
    delta: Vector3<f64>,
}

impl Anchor {
    fn new(pair: &OrbitPair, v: Vector2<f64>) -> Self {
        Self { v, delta: pair.asteroid.position(v.x) - pair.planet.position(v.y) }
    }

    fn of_model(m: &LocalModel) -> Self {
        Self { v: m.v, delta: m.delta }
    }

    fn vals(&self, pair: &OrbitPair, local: Vector2<f64>) -> Vals {
        let run = || -> Result<Vals> {
            let (_, dx) = pair.asteroid.position_partials(self.v.x + local.x)?;
            let delta = self.delta + pair.asteroid.position_increment(self.v.x, local.x)?
                - pair.planet.position_increment(self.v.y, local.y)?;
            Ok(plain_delta(delta, &dx))
        };
        run().unwrap_or_else(|_| Vals::from_element(f64::NAN))
    }
}

/// Field of one extracted minimum as returned by the localized route.
#[derive(Debug, Clone, Copy)]
pub struct Extraction {
    pub model: LocalModel,
    /// Effective disk radius in `ξ` units.
    pub radius: f64,
}

/// Torus integral with some minima extracted: the common part plus one
/// closed-form disk term per extracted minimum, chosen by side.
#[derive(Debug, Clone)]
pub struct Localized {
    pub common: Vals,
    pub extractions: Vec<Extraction>,
    pub error: f64,
}

impl Localized {
    /// Integral with the given side for each extraction, in order.
    pub fn with_sides(&self, sides: &[Side]) -> Vals {
        let mut out = self.common;
        for (ex, side) in self.extractions.iter().zip(sides) {
            out += ex.model.closed(ex.radius, *side);
        }
        out
    }

    /// Integral with each extraction on its physical side.
    pub fn physical(&self) -> Vals {
        let sides: Vec<Side> = self.extractions.iter().map(|e| Side::of(e.model.d_signed)).collect();
        self.with_sides(&sides)
    }
}

/// Averaging of one asteroid–planet pair. Holds the critical points so that
/// several field variants can share them.
pub struct Averaging<'a> {
    pub pair: OrbitPair,
    pub set: CriticalSet,
    settings: &'a FieldSettings,
}

impl<'a> Averaging<'a> {
    pub fn new(pair: OrbitPair, settings: &'a FieldSettings) -> Result<Self> {
        let set = critical_points_with(&pair, &settings.scan)?;
        Ok(Self { pair, set, settings })
    }

    pub fn with_set(pair: OrbitPair, set: CriticalSet, settings: &'a FieldSettings) -> Self {
        Self { pair, set, settings }
    }

    pub fn d_min(&self) -> f64 {
        self.set.minimum(0).map(|m| m.distance()).unwrap_or(f64::INFINITY)
    }

    /// Indices `h` of minima within the extraction trigger.
    pub fn triggered(&self) -> Vec<usize> {
        (0..self.set.num_minima())
            .filter(|&h| self.set.minimum(h).map(|m| m.distance() < self.settings.trigger_au).unwrap_or(false))
            .collect()
    }

    fn metric_of(&self, k: usize) -> Matrix2<f64> {
        let cp = &self.set.points[k];
        let eig = nalgebra::SymmetricEigen::new(cp.hess * 0.5);
        let lmax = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
        let l0 = eig.eigenvalues[0].abs().max(1e-8 * lmax);
        let l1 = eig.eigenvalues[1].abs().max(1e-8 * lmax);
        let q = eig.eigenvectors;
        q * Matrix2::new(l0, 0.0, 0.0, l1) * q.transpose()
    }

    fn default_radius(&self, k: usize, metric: &Matrix2<f64>) -> f64 {
        let c = self.set.points[k].v;
        let mut best = f64::INFINITY;
        for (j, p) in self.set.points.iter().enumerate() {
            if j == k {
                continue;
            }
            let u = Vector2::new(wrap_pi(p.v.x - c.x), wrap_pi(p.v.y - c.y));
            best = best.min(u.dot(&(metric * u)).sqrt());
        }
        (0.25 * best).clamp(0.05, 1.0)
    }

    /// Windowed polar patches around every close critical point and the
    /// forced ones in `must`; returns the patches and the point index of
    /// each.
    fn patches(&self, must: &[usize], radius: Option<f64>) -> (Vec<Patch>, Vec<usize>) {
        let mut candidates: Vec<usize> = self
            .set
            .points
            .iter()
            .enumerate()
            .filter(|(k, p)| {
                !must.contains(k) && p.distance() < self.settings.focus_au && p.kind != CriticalKind::Degenerate
            })
            .map(|(k, _)| k)
            .collect();
        candidates.sort_by(|&a, &b| self.set.points[a].d2.total_cmp(&self.set.points[b].d2));
        // Forced points first; an optional point crowding an accepted one
        // would only shrink both windows, so it is left to the trapezoid.
        let mut idx: Vec<usize> = must.to_vec();
        for k in candidates {
            let probe = Patch::new(self.set.points[k].v, self.metric_of(k), 0.0);
            let crowded = idx.iter().any(|&j| {
                let other = Patch::new(self.set.points[j].v, self.metric_of(j), 0.0);
                probe.xi_distance(other.center).min(other.xi_distance(probe.center)) < MIN_PATCH_SEPARATION
            });
            if !crowded {
                idx.push(k);
            }
        }
        let mut patches: Vec<Patch> = idx
            .iter()
            .map(|&k| Patch::new(self.set.points[k].v, self.metric_of(k), self.set.points[k].distance()))
            .collect();
        let centers: Vec<Vector2<f64>> = patches.iter().map(|p| p.center).collect();
        for (n, (patch, &k)) in patches.iter_mut().zip(&idx).enumerate() {
            let mut cut = 0.95 * patch.max_cut();
            for (m, c) in centers.iter().enumerate() {
                if m != n {
                    cut = cut.min(0.6 * patch.xi_distance(*c));
                }
            }
            patch.set_cut(cut);
            let want = match radius {
                Some(r) if must.contains(&k) => r,
                _ => self.default_radius(k, &patch.metric),
            };
            patch.split = want.min(0.5 * cut);
        }
        (patches, idx)
    }

    fn patched<F>(&self, patches: &[Patch], polar: F) -> QuadResult
    where
        F: Fn(&PatchSample) -> Vals + Sync,
    {
        let pair = &self.pair;
        let s = self.settings;
        integrate_patched(
            patches,
            s.tol,
            s.trapezoid_start,
            s.trapezoid_max,
            s.max_level,
            |n| {
                let step = std::f64::consts::TAU / n as f64;
                let ast: Vec<_> = match (0..n)
                    .map(|i| pair.asteroid.position_partials(i as f64 * step))
                    .collect::<Result<Vec<_>>>()
                {
                    Ok(v) => v,
                    Err(_) => return Vals::from_element(f64::NAN),
                };
                let pla: Vec<_> = (0..n).map(|j| pair.planet.position(j as f64 * step)).collect();
                trapezoid_grid(n, |i, j| {
                    let w = outer_weight(patches, Vector2::new(i as f64 * step, j as f64 * step));
                    if w == 0.0 {
                        Vals::zeros()
                    } else {
                        plain_from(ast[i].0, &ast[i].1, pla[j]) * w
                    }
                })
            },
            polar,
        )
    }

    fn trapezoid(&self) -> QuadResult {
        let pair = &self.pair;
        let s = self.settings;
        integrate_doubling(s.trapezoid_start, s.trapezoid_max, s.tol, |n| {
            let step = std::f64::consts::TAU / n as f64;
            let ast: Vec<_> = (0..n)
                .map(|i| pair.asteroid.position_partials(i as f64 * step))
                .collect::<Result<Vec<_>>>()
                .unwrap_or_default();
            if ast.len() != n {
                return Vals::from_element(f64::NAN);
            }
            let pla: Vec<_> = (0..n).map(|j| pair.planet.position(j as f64 * step)).collect();
            trapezoid_grid(n, |i, j| plain_from(ast[i].0, &ast[i].1, pla[j]))
        })
    }

    /// Plain torus integral of `(1/d, ∂(1/d)/∂κ)`.
    pub fn plain(&self) -> Result<QuadResult> {
        let d_min = self.d_min();
        if d_min < self.settings.margin_au {
            return Err(Error::TooCloseToCrossing { d_min });
        }
        let (patches, _) = self.patches(&[], None);
        if patches.is_empty() {
            return Ok(self.trapezoid());
        }
        let pair = self.pair;
        let anchors: Vec<Anchor> = patches.iter().map(|p| Anchor::new(&pair, p.center)).collect();
        Ok(self.patched(&patches, move |s: &PatchSample| anchors[s.patch].vals(&pair, s.local) * s.window))
    }

    /// Torus integral with the minima `hs` extracted.
    pub fn localized(&self, hs: &[usize], radius: Option<f64>) -> Result<Localized> {
        if hs.is_empty() {
            let q = self.plain()?;
            return Ok(Localized { common: q.value, extractions: Vec::new(), error: q.error });
        }
        let mut models = Vec::with_capacity(hs.len());
        let mut points = Vec::with_capacity(hs.len());
        for &h in hs {
            models.push(LocalModel::new(&self.pair, &self.set, h)?);
            points
                .push(self.set.minimum_point_index(h).ok_or(Error::NoSuchMinimum { h, count: self.set.num_minima() })?);
        }
        let (mut patches, idx) = self.patches(&points, radius.or(self.settings.radius));
        // Per patch: which model (if any) is extracted there.
        let owner: Vec<Option<usize>> = idx.iter().map(|k| points.iter().position(|p| p == k)).collect();
        let pair = self.pair;
        let anchors: Vec<Anchor> = patches
            .iter_mut()
            .zip(&owner)
            .map(|(p, o)| match o {
                Some(m) => {
                    p.center = models[*m].v;
                    Anchor::of_model(&models[*m])
                }
                None => Anchor::new(&pair, p.center),
            })
            .collect();
        let q = self.patched(&patches, |s: &PatchSample| {
            let mut v = anchors[s.patch].vals(&pair, s.local) * s.window;
            if s.inner {
                if let Some(m) = owner[s.patch] {
                    v -= models[m].inv_delta(s.local);
                }
            }
            v
        });
        let extractions = owner
            .iter()
            .zip(&patches)
            .filter_map(|(o, c)| o.map(|m| (m, c.split)))
            .map(|(m, r)| (m, Extraction { model: models[m], radius: r }))
            .collect::<Vec<_>>();
        let mut ordered: Vec<Extraction> = Vec::with_capacity(hs.len());
        for m in 0..hs.len() {
            let ex = extractions
                .iter()
                .find(|(k, _)| *k == m)
                .map(|(_, e)| *e)
                .ok_or(Error::NoSuchMinimum { h: hs[m], count: self.set.num_minima() })?;
            ordered.push(ex);
        }
        Ok(Localized { common: q.value, extractions: ordered, error: q.error })
    }

    /// Continuation on `side` computed over the full square around `V_h`:
    /// the regularised integral `∬(1/d - 1/δ_h)` plus the disk closed form
    /// and the integral of `1/δ_h` outside the disk, with the boundary
    /// motion written out separately. Also returns the disk radius used,
    /// which is capped by the cell around `V_h`.
    pub fn full_square(&self, h: usize, side: Side, radius: f64) -> Result<(Vals, f64)> {
        let model = LocalModel::new(&self.pair, &self.set, h)?;
        let focus = Focus { center: model.v, metric: model.a, depth: model.d_signed.abs(), split: 0.0 };
        let mut cells = build_cells(&[focus]);
        let r = radius.min(0.9 * cells[0].inradius);
        let pair = self.pair;
        let tol = self.settings.tol;
        let lv = self.settings.max_level;
        let anchor = Anchor::of_model(&model);
        let regular =
            integrate_cells(&cells, tol, lv, |s: &Sample| anchor.vals(&pair, s.local) - model.inv_delta(s.local));
        cells[0].focus.split = r;
        let outside = integrate_cells(
            &cells,
            tol,
            lv,
            |s: &Sample| {
                if s.inner {
                    Vals::zeros()
                } else {
                    model.inv_delta(s.local)
                }
            },
        );
        let sigma = side.sigma();
        let d = model.d_signed;
        let rho = (d * d + r * r).sqrt();
        let mut g = Vals::zeros();
        g[0] = 2.0 * PI * model.w * (rho - sigma * d) + outside.value[0];
        for k in 0..5 {
            let f = 2.0 * PI * model.dw[k] * rho + 2.0 * PI * model.w * d * model.dd_signed[k] / rho;
            let jump = 2.0 * PI * (model.dw[k] * d + model.w * model.dd_signed[k]);
            let moving = outside.value[1 + k] - PI * r * r * model.dw[k] / rho;
            g[1 + k] = f - sigma * jump + moving;
        }
        Ok((regular.value + g, r))
    }
}

fn pair_of(y: &SecularState, a: f64, planet: &Orbit) -> Result<OrbitPair> {
    Ok(OrbitPair::new(y.orbit(a)?, *planet))
}

/// Plain averaged field `∂R̄/∂κ` of one planet of mass ratio `mu`.
pub fn averaged_keplerian(asteroid: &Orbit, planet: &Orbit, mu: f64, s: &FieldSettings) -> Result<KeplerianField> {
    let av = Averaging::new(OrbitPair::new(*asteroid, *planet), s)?;
    Ok(KeplerianField::from_vals(&av.plain()?.value, field_scale(mu)))
}

/// Averaged perturbing function `R̄` (plain quadrature).
pub fn averaged_potential(y: &SecularState, a: f64, planet: &Orbit, mu: f64, s: &FieldSettings) -> Result<f64> {
    let orbit = y.orbit(a)?;
    Ok(averaged_keplerian(&orbit, planet, mu, s)?.value)
}

/// Plain averaged gradient `(∂R̄/∂G, ∂R̄/∂Z, ∂R̄/∂g, ∂R̄/∂z)`.
pub fn averaged_gradient(y: &SecularState, a: f64, planet: &Orbit, mu: f64, s: &FieldSettings) -> Result<[f64; 4]> {
    let orbit = y.orbit(a)?;
    Ok(averaged_keplerian(&orbit, planet, mu, s)?.secular(&orbit))
}

/// Continuation of the averaged field across the crossing of minimum `h`.
#[derive(Debug, Clone, Copy)]
pub struct ExtendedField {
    pub h: usize,
    pub side: Side,
    pub d_signed: f64,
    /// Disk radius (`ξ` units) actually used.
    pub radius: f64,
    pub field: KeplerianField,
    pub secular: [f64; 4],
}

/// Extended field on `side`, computed on the full square around `V_h`.
pub fn extended_field(
    y: &SecularState,
    a: f64,
    planet: &Orbit,
    mu: f64,
    h: usize,
    side: Side,
    s: &FieldSettings,
) -> Result<ExtendedField> {
    let av = Averaging::new(pair_of(y, a, planet)?, s)?;
    let model = LocalModel::new(&av.pair, &av.set, h)?;
    let radius = s.radius.unwrap_or_else(|| {
        let k = av.set.minimum_point_index(h).unwrap_or(0);
        av.default_radius(k, &model.a)
    });
    let (vals, radius) = av.full_square(h, side, radius)?;
    let field = KeplerianField::from_vals(&vals, field_scale(mu));
    Ok(ExtendedField { h, side, d_signed: model.d_signed, radius, field, secular: field.secular(&av.pair.asteroid) })
}

/// Both continuations at minimum `h` and their difference (minus − plus).
#[derive(Debug, Clone, Copy)]
pub struct ExtendedFieldPair {
    pub h: usize,
    pub d_signed: f64,
    /// Disk radius (`ξ` units) actually used.
    pub radius: f64,
    pub plus: KeplerianField,
    pub minus: KeplerianField,
    pub diff: KeplerianField,
    pub plus_secular: [f64; 4],
    pub minus_secular: [f64; 4],
    pub diff_secular: [f64; 4],
}

/// Both continuations at minimum `h` via disk extraction; every other
/// triggered minimum stays on its physical side.
pub fn extended_field_pair(
    y: &SecularState,
    a: f64,
    planet: &Orbit,
    mu: f64,
    h: usize,
    s: &FieldSettings,
) -> Result<ExtendedFieldPair> {
    let av = Averaging::new(pair_of(y, a, planet)?, s)?;
    extended_pair_of(&av, mu, h)
}

pub(crate) fn extended_pair_of(av: &Averaging, mu: f64, h: usize) -> Result<ExtendedFieldPair> {
    let mut hs = av.triggered();
    if !hs.contains(&h) {
        hs.insert(0, h);
    }
    let loc = av.localized(&hs, None)?;
    let pos = hs.iter().position(|&x| x == h).unwrap_or(0);
    let mut sides: Vec<Side> = loc.extractions.iter().map(|e| Side::of(e.model.d_signed)).collect();
    sides[pos] = Side::Plus;
    let plus_v = loc.with_sides(&sides);
    sides[pos] = Side::Minus;
    let minus_v = loc.with_sides(&sides);
    let scale = field_scale(mu);
    let plus = KeplerianField::from_vals(&plus_v, scale);
    let minus = KeplerianField::from_vals(&minus_v, scale);
    let diff = KeplerianField::from_vals(&loc.extractions[pos].model.jump(), scale);
    let orbit = av.pair.asteroid;
    Ok(ExtendedFieldPair {
        h,
        d_signed: loc.extractions[pos].model.d_signed,
        radius: loc.extractions[pos].radius,
        plus,
        minus,
        diff,
        plus_secular: plus.secular(&orbit),
        minus_secular: minus.secular(&orbit),
        diff_secular: diff.secular(&orbit),
    })
}
