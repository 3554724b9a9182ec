//! Distance between two confocal Keplerian orbits.
//!
//! The squared distance `d²(ℓ, ℓ')` between a point of the asteroid orbit and
//! a point of the planet orbit lives on the two-torus of mean anomalies.  This
//! module finds all of its critical points, labels the local minima, and
//! provides the signed minimum distance `d̃_h`, which is smooth across orbit
//! crossings, together with its element gradient.

use nalgebra::{Matrix2, SymmetricEigen, Vector2, Vector3};
use std::cmp::Ordering;
use std::f64::consts::TAU;

use crate::error::{Error, Result};
use crate::kepler::{wrap_pi, wrap_tau, Orbit, OrbitJet, OrbitPoint};

/// Threshold on `|τ₁ × τ₂|` below which the orbits count as tangent at a
/// minimum and the sign of the distance is undefined.
pub const TANGENCY_EPS: f64 = 1e-10;

/// Torus distance below which two critical points are merged.
pub const MERGE_EPS: f64 = 1e-6;

/// An asteroid orbit paired with a planet orbit. Anomaly pairs are
/// `(ℓ, ℓ')` with `ℓ` belonging to the asteroid.
#[derive(Debug, Clone, Copy)]
pub struct OrbitPair {
    pub asteroid: Orbit,
    pub planet: Orbit,
}

/// `d²` with its torus gradient and Hessian.
#[derive(Debug, Clone, Copy)]
pub struct DistanceJet {
    pub d2: f64,
    pub grad: Vector2<f64>,
    pub hess: Matrix2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriticalKind {
    Minimum,
    Saddle,
    Maximum,
    Degenerate,
}

#[derive(Debug, Clone, Copy)]
pub struct CriticalPoint {
    /// `(ℓ, ℓ')`, wrapped into `[0, 2π)`.
    pub v: Vector2<f64>,
    pub d2: f64,
    pub grad: Vector2<f64>,
    pub hess: Matrix2<f64>,
    pub kind: CriticalKind,
}

impl CriticalPoint {
    pub fn distance(&self) -> f64 {
        self.d2.max(0.0).sqrt()
    }
}

/// All critical points of `d²`, with local minima ordered by `(d, ℓ)`.
#[derive(Debug, Clone)]
pub struct CriticalSet {
    pub points: Vec<CriticalPoint>,
    minima: Vec<usize>,
}

impl CriticalSet {
    pub fn num_minima(&self) -> usize {
        self.minima.len()
    }

    /// The `h`-th local minimum.
    pub fn minimum(&self, h: usize) -> Result<&CriticalPoint> {
        self.minima.get(h).map(|&k| &self.points[k]).ok_or(Error::NoSuchMinimum { h, count: self.minima.len() })
    }

    /// Position of the `h`-th minimum in `points`.
    pub fn minimum_point_index(&self, h: usize) -> Option<usize> {
        self.minima.get(h).copied()
    }

    pub fn minima(&self) -> impl Iterator<Item = &CriticalPoint> {
        self.minima.iter().map(move |&k| &self.points[k])
    }

    pub fn count(&self, kind: CriticalKind) -> usize {
        self.points.iter().filter(|p| p.kind == kind).count()
    }

    /// Euler characteristic of the torus recovered from the point census.
    pub fn euler_balance(&self) -> i64 {
        self.count(CriticalKind::Minimum) as i64 - self.count(CriticalKind::Saddle) as i64
            + self.count(CriticalKind::Maximum) as i64
    }
}

/// Signed distance at a local minimum.
#[derive(Debug, Clone, Copy)]
pub struct SignedDistance {
    pub value: f64,
    /// `|τ₁ × τ₂| < TANGENCY_EPS`: orbits tangent, sign meaningless.
    pub degenerate: bool,
    pub cross_norm: f64,
}

/// Half Hessian `𝒜_h` of `d²` at a minimum.
#[derive(Debug, Clone, Copy)]
pub struct CrossingMatrix {
    pub a: Matrix2<f64>,
    pub det: f64,
}

/// Grid-scan settings for the critical-point search.
#[derive(Debug, Clone, Copy)]
pub struct ScanSettings {
    pub grid: usize,
    pub max_grid: usize,
}

impl Default for ScanSettings {
    fn default() -> Self {
        Self { grid: 64, max_grid: 512 }
    }
}

impl OrbitPair {
    pub fn new(asteroid: Orbit, planet: Orbit) -> Self {
        Self { asteroid, planet }
    }

    pub fn jets(&self, v: Vector2<f64>) -> Result<(OrbitJet, OrbitJet)> {
        Ok((self.asteroid.jet(v.x)?, self.planet.jet(v.y)?))
    }

    fn points(&self, v: Vector2<f64>) -> Result<(OrbitPoint, OrbitPoint)> {
        Ok((self.asteroid.point(v.x)?, self.planet.point(v.y)?))
    }

    fn scale(&self) -> f64 {
        (self.asteroid.a + self.planet.a).powi(2)
    }
}

/// `d²(ℓ, ℓ')` with gradient and Hessian.
pub fn squared_distance(pair: &OrbitPair, v: Vector2<f64>) -> Result<DistanceJet> {
    let (p, q) = pair.points(v)?;
    Ok(distance_jet(&p, &q))
}

fn distance_jet(p: &OrbitPoint, q: &OrbitPoint) -> DistanceJet {
    let delta = p.x - q.x;
    let t1 = p.x1;
    let t2 = q.x1;
    let grad = Vector2::new(2.0 * delta.dot(&t1), -2.0 * delta.dot(&t2));
    let h11 = 2.0 * (t1.dot(&t1) + delta.dot(&p.x2));
    let h12 = -2.0 * t1.dot(&t2);
    let h22 = 2.0 * (t2.dot(&t2) - delta.dot(&q.x2));
    DistanceJet { d2: delta.norm_squared(), grad, hess: Matrix2::new(h11, h12, h12, h22) }
}

/// Torus distance between two anomaly pairs.
pub fn torus_distance(a: Vector2<f64>, b: Vector2<f64>) -> f64 {
    wrap_pi(a.x - b.x).hypot(wrap_pi(a.y - b.y))
}

fn wrap_pair(v: Vector2<f64>) -> Vector2<f64> {
    Vector2::new(wrap_tau(v.x), wrap_tau(v.y))
}

fn check_degenerate(pair: &OrbitPair) -> Result<()> {
    let (a, b) = (&pair.asteroid, &pair.planet);
    let coplanar = a.normal().cross(&b.normal()).norm() < 1e-12;
    if !coplanar {
        return Ok(());
    }
    let circles = a.e < 1e-12 && b.e < 1e-12;
    if circles {
        return Err(Error::DegenerateConfiguration(
            "two concentric coplanar circles: every pair of points is critical".into(),
        ));
    }
    let same_shape = (a.a - b.a).abs() <= 1e-12 * a.a && (a.e - b.e).abs() <= 1e-12;
    if same_shape && (a.frame().0 - b.frame().0).norm() < 1e-10 {
        return Err(Error::DegenerateConfiguration("the two orbits coincide".into()));
    }
    Ok(())
}

fn newton_step(jet: &DistanceJet) -> Vector2<f64> {
    let eig = SymmetricEigen::new(jet.hess);
    let lmax = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let mut step = Vector2::zeros();
    for k in 0..2 {
        let mut lam = eig.eigenvalues[k];
        let floor = 1e-14 * lmax;
        if lam.abs() < floor {
            lam = if lam < 0.0 { -floor } else { floor };
        }
        let u = eig.eigenvectors.column(k);
        step -= u * (u.dot(&jet.grad) / lam);
    }
    step
}

/// Refine a seed to a critical point with damped Newton on `|∇d²|²`.
///
/// Iterates until no further decrease of the merit is possible, which for
/// degenerate (tangent) critical points pushes well past the point where the
/// gradient first looks small. Returns `None` when the seed does not
/// converge.
pub fn refine_critical_point(pair: &OrbitPair, seed: Vector2<f64>) -> Option<CriticalPoint> {
    let mut v = seed;
    let mut jet = squared_distance(pair, v).ok()?;
    let mut merit = jet.grad.norm_squared();
    for _ in 0..200 {
        if merit == 0.0 {
            break;
        }
        let step = newton_step(&jet);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial = v + step * t;
            if let Ok(tj) = squared_distance(pair, trial) {
                let tm = tj.grad.norm_squared();
                if tm < merit {
                    accepted = Some((trial, tj, tm));
                    break;
                }
            }
            t *= 0.5;
        }
        match accepted {
            Some((nv, nj, nm)) => {
                let moved = (nv - v).norm();
                v = nv;
                jet = nj;
                merit = nm;
                if moved < 1e-15 {
                    break;
                }
            }
            None => break,
        }
    }
    if jet.grad.norm() > 1e-8 * pair.scale() {
        return None;
    }
    let v = wrap_pair(v);
    let jet = squared_distance(pair, v).ok()?;
    let kind = classify(pair, v, &jet);
    Some(CriticalPoint { v, d2: jet.d2, grad: jet.grad, hess: jet.hess, kind })
}

fn classify(pair: &OrbitPair, v: Vector2<f64>, jet: &DistanceJet) -> CriticalKind {
    let eig = SymmetricEigen::new(jet.hess);
    let (l1, l2) = {
        let (x, y) = (eig.eigenvalues[0], eig.eigenvalues[1]);
        (x.min(y), x.max(y))
    };
    let tol = 1e-9 * l1.abs().max(l2.abs()).max(1e-300);
    if l1 > tol {
        CriticalKind::Minimum
    } else if l2 < -tol {
        CriticalKind::Maximum
    } else if l1 < -tol && l2 > tol {
        CriticalKind::Saddle
    } else if l1 >= -tol && l2 > tol && ring_is_minimum(pair, v, jet.d2) {
        CriticalKind::Minimum
    } else {
        CriticalKind::Degenerate
    }
}

fn ring_is_minimum(pair: &OrbitPair, v: Vector2<f64>, d2: f64) -> bool {
    (0..32).all(|k| {
        let th = TAU * k as f64 / 32.0;
        let w = v + Vector2::new(th.cos(), th.sin()) * 1e-3;
        squared_distance(pair, w).map(|j| j.d2 >= d2).unwrap_or(false)
    })
}

/// Samples uniform in eccentric anomaly, as `(mean anomaly, point, dX/dE)`.
/// Uniform mean-anomaly grids undersample the pericentre passage of
/// eccentric orbits, where close critical pairs can hide between nodes.
fn scan_samples(orbit: &Orbit, n: usize) -> Result<Vec<(f64, OrbitPoint, Vector3<f64>)>> {
    let step = TAU / n as f64;
    (0..n)
        .map(|i| {
            let ea = i as f64 * step;
            let l = ea - orbit.e * ea.sin();
            let p = orbit.point(l)?;
            let tangent = p.x1 * (1.0 - orbit.e * ea.cos());
            Ok((l, p, tangent))
        })
        .collect()
}

fn scan_seeds(pair: &OrbitPair, n: usize) -> Result<Vec<Vector2<f64>>> {
    let ast = scan_samples(&pair.asteroid, n)?;
    let pla = scan_samples(&pair.planet, n)?;
    let mut merit = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let d = ast[i].1.x - pla[j].1.x;
            let g1 = d.dot(&ast[i].2);
            let g2 = d.dot(&pla[j].2);
            merit[i * n + j] = g1 * g1 + g2 * g2;
        }
    }
    let mut seeds = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let m = merit[i * n + j];
            let mut is_min = true;
            'nb: for di in [n - 1, 0, 1] {
                for dj in [n - 1, 0, 1] {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    if merit[((i + di) % n) * n + (j + dj) % n] < m {
                        is_min = false;
                        break 'nb;
                    }
                }
            }
            if is_min {
                seeds.push(Vector2::new(ast[i].0, pla[j].0));
            }
        }
    }
    Ok(seeds)
}

fn nearly_singular(cp: &CriticalPoint) -> bool {
    let h = cp.hess;
    let scale = h.norm_squared().max(f64::MIN_POSITIVE);
    h.determinant().abs() < 1e-6 * scale
}

fn merge_into(points: &mut Vec<CriticalPoint>, cp: CriticalPoint) {
    // Newton converges only linearly onto degenerate points, so their
    // duplicates land farther apart.
    let same = |p: &CriticalPoint| {
        let d = torus_distance(p.v, cp.v);
        d < MERGE_EPS || (d < 1e-3 && (nearly_singular(p) || nearly_singular(&cp)))
    };
    if let Some(existing) = points.iter_mut().find(|p| same(p)) {
        if cp.grad.norm() < existing.grad.norm() {
            *existing = cp;
        }
    } else {
        points.push(cp);
    }
}

fn minimum_order(points: &[CriticalPoint]) -> Vec<usize> {
    let mut idx: Vec<usize> =
        points.iter().enumerate().filter(|(_, p)| p.kind == CriticalKind::Minimum).map(|(k, _)| k).collect();
    // Distances equal to within 1e-12 au are ordered by ℓ instead.
    let key = |p: &CriticalPoint| (p.distance() / 1e-12).round();
    idx.sort_by(|&a, &b| {
        let (pa, pb) = (&points[a], &points[b]);
        key(pa)
            .partial_cmp(&key(pb))
            .unwrap_or(Ordering::Equal)
            .then(pa.v.x.partial_cmp(&pb.v.x).unwrap_or(Ordering::Equal))
            .then(pa.v.y.partial_cmp(&pb.v.y).unwrap_or(Ordering::Equal))
    });
    idx
}

/// Find every critical point of `d²` on the torus.
pub fn critical_points(pair: &OrbitPair) -> Result<CriticalSet> {
    critical_points_with(pair, &ScanSettings::default())
}

pub fn critical_points_with(pair: &OrbitPair, settings: &ScanSettings) -> Result<CriticalSet> {
    check_degenerate(pair)?;
    let mut n = settings.grid.max(8);
    let mut best: Option<Vec<CriticalPoint>> = None;
    loop {
        let mut points: Vec<CriticalPoint> = Vec::new();
        for seed in scan_seeds(pair, n)? {
            if let Some(cp) = refine_critical_point(pair, seed) {
                merge_into(&mut points, cp);
            }
        }
        if let Some(prev) = best.take() {
            for cp in prev {
                merge_into(&mut points, cp);
            }
        }
        let census_ok = {
            let count = |k| points.iter().filter(|p| p.kind == k).count() as i64;
            let degenerate = count(CriticalKind::Degenerate) > 0;
            degenerate
                || (count(CriticalKind::Minimum) - count(CriticalKind::Saddle) + count(CriticalKind::Maximum) == 0)
        };
        if census_ok || n * 2 > settings.max_grid {
            if !census_ok {
                log::warn!("critical-point census does not balance after a {n}x{n} scan");
            }
            points.sort_by(|a, b| {
                a.v.x
                    .partial_cmp(&b.v.x)
                    .unwrap_or(Ordering::Equal)
                    .then(a.v.y.partial_cmp(&b.v.y).unwrap_or(Ordering::Equal))
            });
            let minima = minimum_order(&points);
            if minima.is_empty() {
                return Err(Error::DegenerateConfiguration("no local minimum found".into()));
            }
            return Ok(CriticalSet { points, minima });
        }
        best = Some(points);
        n *= 2;
    }
}

/// Global orbit distance and the index of the minimum attaining it.
pub fn orbit_distance(pair: &OrbitPair) -> Result<(f64, usize)> {
    let set = critical_points(pair)?;
    Ok((set.minimum(0)?.distance(), 0))
}

/// Signed distance `d̃ = τ̂₃·Δ` at a local minimum, `τ₃ = τ₁ × τ₂`.
pub fn signed_distance(pair: &OrbitPair, cp: &CriticalPoint) -> Result<SignedDistance> {
    let (p, q) = pair.points(cp.v)?;
    let t3 = p.x1.cross(&q.x1);
    let n3 = t3.norm();
    let degenerate = n3 < TANGENCY_EPS;
    let value = if degenerate { cp.distance() } else { t3.dot(&(p.x - q.x)) / n3 };
    Ok(SignedDistance { value, degenerate, cross_norm: n3 })
}

/// Signed distance of the `h`-th minimum.
pub fn signed_distance_at(pair: &OrbitPair, set: &CriticalSet, h: usize) -> Result<SignedDistance> {
    signed_distance(pair, set.minimum(h)?)
}

fn unit_normal(pair: &OrbitPair, cp: &CriticalPoint, h: usize) -> Result<(OrbitJet, OrbitJet, Vector3<f64>)> {
    let (p, q) = pair.jets(cp.v)?;
    let t3 = p.x1.cross(&q.x1);
    let n3 = t3.norm();
    if n3 < TANGENCY_EPS {
        return Err(Error::TangentOrbits { h });
    }
    Ok((p, q, t3 / n3))
}

/// `∂d̃/∂E` with `E` the asteroid shape `(a, e, i, Ω, ω)` followed by the
/// planet shape in the same order.
pub fn signed_distance_gradient(pair: &OrbitPair, cp: &CriticalPoint, h: usize) -> Result<[f64; 10]> {
    let (p, q, n) = unit_normal(pair, cp, h)?;
    let mut out = [0.0; 10];
    for k in 0..5 {
        out[k] = n.dot(&p.dx[k]);
        out[5 + k] = -n.dot(&q.dx[k]);
    }
    Ok(out)
}

/// `𝒜_h`, half the Hessian of `d²` at the minimum.
pub fn crossing_matrix(pair: &OrbitPair, cp: &CriticalPoint) -> Result<CrossingMatrix> {
    let (p, q) = pair.points(cp.v)?;
    let delta = p.x - q.x;
    let a11 = p.x1.dot(&p.x1) + delta.dot(&p.x2);
    let a12 = -p.x1.dot(&q.x1);
    let a22 = q.x1.dot(&q.x1) - delta.dot(&q.x2);
    let a = Matrix2::new(a11, a12, a12, a22);
    Ok(CrossingMatrix { a, det: a11 * a22 - a12 * a12 })
}

/// Match each previous minimum location to the nearest current minimum
/// within `radius`, greedily by distance. Returns, for every previous entry,
/// the index `h` of its match in `set`.
pub fn match_minima(previous: &[Vector2<f64>], set: &CriticalSet, radius: f64) -> Vec<Option<usize>> {
    let current: Vec<Vector2<f64>> = set.minima().map(|p| p.v).collect();
    match_points(previous, &current, radius)
}

pub(crate) fn match_points(previous: &[Vector2<f64>], current: &[Vector2<f64>], radius: f64) -> Vec<Option<usize>> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in previous.iter().enumerate() {
        for (j, c) in current.iter().enumerate() {
            let d = torus_distance(*p, *c);
            if d < radius {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
    let mut out = vec![None; previous.len()];
    let mut taken = vec![false; current.len()];
    for (_, i, j) in pairs {
        if out[i].is_none() && !taken[j] {
            out[i] = Some(j);
            taken[j] = true;
        }
    }
    out
}

/// Keeps minimum labels stable along a family of configurations by nearest
/// matching of their anomaly pairs.
#[derive(Debug, Clone, Default)]
pub struct MinimumTracker {
    locations: Vec<Vector2<f64>>,
    pub radius: f64,
}

impl MinimumTracker {
    pub fn new(set: &CriticalSet) -> Self {
        Self { locations: set.minima().map(|p| p.v).collect(), radius: 0.5 }
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    /// Map tracked labels to indices in `set`; updates the stored locations
    /// of matched minima.
    pub fn update(&mut self, set: &CriticalSet) -> Vec<Option<usize>> {
        let m = match_minima(&self.locations, set, self.radius);
        for (loc, idx) in self.locations.iter_mut().zip(&m) {
            if let Some(h) = idx {
                *loc = set.minimum(*h).map(|p| p.v).unwrap_or(*loc);
            }
        }
        m
    }
}
