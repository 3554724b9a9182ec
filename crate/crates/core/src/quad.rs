//! Quadrature on the torus of mean anomalies.
//!
//! Two schemes are provided. When the integrand is smooth everywhere the
//! periodic trapezoidal rule on a square grid converges geometrically. When
//! it has near-singular spots ("foci"), the torus is split into the periodic
//! Voronoi cells of those spots and each cell is integrated in polar
//! coordinates about its focus, in the metric `ξ = 𝒜^{1/2}(V - V_h)` that
//! makes the local distance model isotropic.
//!
//! Parallel partial sums are collected and added in index order, so results
//! do not depend on thread scheduling.

use gauss_quad::GaussLegendre;
use nalgebra::{Matrix2, SVector, SymmetricEigen, Vector2};
use rayon::prelude::*;
use std::collections::HashMap;
use std::f64::consts::{PI, TAU};
use std::sync::{Arc, Mutex, OnceLock};

use crate::kepler::wrap_pi;

/// Integrand values: a scalar followed by five element partials.
pub type Vals = SVector<f64, 6>;

/// Gauss-Legendre nodes and weights on `[-1, 1]`, cached by degree.
pub(crate) fn gauss_legendre(n: usize) -> Arc<Vec<(f64, f64)>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Vec<(f64, f64)>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut map = cache.lock().unwrap_or_else(|e| e.into_inner());
    map.entry(n)
        .or_insert_with(|| {
            let rule = GaussLegendre::new(n.max(2)).expect("degree >= 2");
            Arc::new(rule.as_node_weight_pairs().to_vec())
        })
        .clone()
}

/// A near-singular spot of the integrand.
#[derive(Debug, Clone, Copy)]
pub struct Focus {
    /// Location on the torus.
    pub center: Vector2<f64>,
    /// Positive-definite metric used for the polar map.
    pub metric: Matrix2<f64>,
    /// Radial scale of the singular behaviour (the local distance).
    pub depth: f64,
    /// Radius of the inner disk in `ξ` units; zero for no split.
    pub split: f64,
}

/// A point handed to the integrand.
#[derive(Debug, Clone, Copy)]
pub struct Sample {
    /// Torus point (not wrapped).
    pub v: Vector2<f64>,
    /// Offset from the focus of the cell, inside its fundamental square.
    pub local: Vector2<f64>,
    /// Index of the focus owning the cell.
    pub cell: usize,
    /// Radius in `ξ` units.
    pub rho: f64,
    /// Whether the sample lies in the inner radial panel.
    pub inner: bool,
}

/// Voronoi cell of one focus, mapped into `ξ` coordinates.
#[derive(Debug, Clone)]
pub struct Cell {
    pub focus: Focus,
    pub polygon: Vec<Vector2<f64>>,
    pub inradius: f64,
    sqrt_inv: Matrix2<f64>,
    jac: f64,
}

impl Cell {
    /// `(det 𝒜)^{-1/2}`, the area factor of the map `ξ -> V`.
    pub fn jacobian(&self) -> f64 {
        self.jac
    }
}

pub(crate) fn sqrt_spd(m: &Matrix2<f64>) -> (Matrix2<f64>, Matrix2<f64>) {
    let eig = SymmetricEigen::new(*m);
    let q = eig.eigenvectors;
    let l = eig.eigenvalues;
    let s = Matrix2::new(l[0].sqrt(), 0.0, 0.0, l[1].sqrt());
    let si = Matrix2::new(1.0 / l[0].sqrt(), 0.0, 0.0, 1.0 / l[1].sqrt());
    (q * s * q.transpose(), q * si * q.transpose())
}

/// Clip a convex polygon by the half-plane `n·x <= c`.
fn clip(poly: &[Vector2<f64>], n: Vector2<f64>, c: f64) -> Vec<Vector2<f64>> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    for k in 0..poly.len() {
        let p = poly[k];
        let q = poly[(k + 1) % poly.len()];
        let fp = n.dot(&p) - c;
        let fq = n.dot(&q) - c;
        if fp <= 0.0 {
            out.push(p);
        }
        if (fp < 0.0 && fq > 0.0) || (fp > 0.0 && fq < 0.0) {
            let t = fp / (fp - fq);
            out.push(p + (q - p) * t);
        }
    }
    out
}

/// Build the periodic Voronoi cells of a set of foci.
pub fn build_cells(foci: &[Focus]) -> Vec<Cell> {
    foci.iter()
        .enumerate()
        .map(|(k, f)| {
            let mut poly =
                vec![Vector2::new(-PI, -PI), Vector2::new(PI, -PI), Vector2::new(PI, PI), Vector2::new(-PI, PI)];
            for (j, g) in foci.iter().enumerate() {
                if j == k {
                    continue;
                }
                let base = Vector2::new(wrap_pi(g.center.x - f.center.x), wrap_pi(g.center.y - f.center.y));
                for mx in -1..=1 {
                    for my in -1..=1 {
                        let o = base + Vector2::new(mx as f64, my as f64) * TAU;
                        poly = clip(&poly, o * 2.0, o.norm_squared());
                    }
                }
            }
            let (s, si) = sqrt_spd(&f.metric);
            let polygon: Vec<Vector2<f64>> = poly.iter().map(|p| s * p).collect();
            let inradius = polygon_inradius(&polygon);
            Cell { focus: *f, polygon, inradius, sqrt_inv: si, jac: 1.0 / f.metric.determinant().sqrt() }
        })
        .collect()
}

fn polygon_inradius(poly: &[Vector2<f64>]) -> f64 {
    let mut r = f64::INFINITY;
    for k in 0..poly.len() {
        let p = poly[k];
        let q = poly[(k + 1) % poly.len()];
        let e = q - p;
        let len = e.norm();
        if len == 0.0 {
            continue;
        }
        let n = Vector2::new(e.y, -e.x) / len;
        r = r.min(n.dot(&p));
    }
    r
}

/// One angular sub-sector of a cell: the triangle between the focus and a
/// piece of a polygon edge.
#[derive(Debug, Clone, Copy)]
struct Sector {
    cell: usize,
    th0: f64,
    th1: f64,
    n: Vector2<f64>,
    c: f64,
}

fn sectors(cells: &[Cell]) -> Vec<Sector> {
    let max_width = PI / 8.0;
    let mut out = Vec::new();
    for (ci, cell) in cells.iter().enumerate() {
        let poly = &cell.polygon;
        for k in 0..poly.len() {
            let p = poly[k];
            let q = poly[(k + 1) % poly.len()];
            let e = q - p;
            let len = e.norm();
            if len < 1e-14 {
                continue;
            }
            let n = Vector2::new(e.y, -e.x) / len;
            let c = n.dot(&p);
            if c <= 0.0 {
                continue;
            }
            let th0 = p.y.atan2(p.x);
            let mut dth = q.y.atan2(q.x) - th0;
            while dth <= 0.0 {
                dth += TAU;
            }
            while dth > TAU {
                dth -= TAU;
            }
            let pieces = (dth / max_width).ceil().max(1.0) as usize;
            for m in 0..pieces {
                out.push(Sector {
                    cell: ci,
                    th0: th0 + dth * m as f64 / pieces as f64,
                    th1: th0 + dth * (m + 1) as f64 / pieces as f64,
                    n,
                    c,
                });
            }
        }
    }
    out
}

fn integrate_sector<F>(cells: &[Cell], s: &Sector, level: usize, f: &F) -> Vals
where
    F: Fn(&Sample) -> Vals + Sync,
{
    let cell = &cells[s.cell];
    let focus = &cell.focus;
    let scale = 1usize << level;
    let gt = gauss_legendre(6 * scale);
    let gi = gauss_legendre(8 * scale);
    let go = gauss_legendre(10 * scale);
    let half_th = 0.5 * (s.th1 - s.th0);
    let mid_th = 0.5 * (s.th1 + s.th0);
    let mut acc = Vals::zeros();
    for &(xt, wt) in gt.iter() {
        let th = mid_th + half_th * xt;
        let u = Vector2::new(th.cos(), th.sin());
        let rho_max = s.c / s.n.dot(&u);
        let split = focus.split.min(rho_max);
        let mut ray = Vals::zeros();
        let eval = |rho: f64, inner: bool| -> Vals {
            let local = cell.sqrt_inv * (u * rho);
            f(&Sample { v: focus.center + local, local, cell: s.cell, rho, inner })
        };
        // Inner panel: ρ = d sinh t resolves the 1/√(d² + ρ²) scale.
        let ds = focus.depth.abs().max(1e-9 * split.max(1e-300));
        if split > 0.0 {
            let tmax = (split / ds).asinh();
            for &(xr, wr) in gi.iter() {
                let t = 0.5 * tmax * (xr + 1.0);
                let rho = ds * t.sinh();
                let jac = ds * t.cosh() * 0.5 * tmax;
                ray += eval(rho, true) * (wr * jac * rho);
            }
        }
        // Outer panel: logarithmic in ρ.
        if split > 0.0 {
            let lmax = (rho_max / split).ln();
            if lmax > 0.0 {
                for &(xr, wr) in go.iter() {
                    let t = 0.5 * lmax * (xr + 1.0);
                    let rho = split * t.exp();
                    ray += eval(rho, false) * (wr * 0.5 * lmax * rho * rho);
                }
            }
        } else {
            let tmax = (rho_max / ds).asinh();
            for &(xr, wr) in go.iter() {
                let t = 0.5 * tmax * (xr + 1.0);
                let rho = ds * t.sinh();
                let jac = ds * t.cosh() * 0.5 * tmax;
                ray += eval(rho, false) * (wr * jac * rho);
            }
        }
        acc += ray * (wt * half_th);
    }
    acc * cell.jac
}

/// Result of an adaptive integration.
#[derive(Debug, Clone, Copy)]
pub struct QuadResult {
    pub value: Vals,
    pub error: f64,
    pub level: usize,
}

fn converged(a: &Vals, b: &Vals, tol: f64) -> (bool, f64) {
    let diff = (a - b).amax();
    let scale = b.amax().max(f64::MIN_POSITIVE);
    (diff <= tol * scale, diff)
}

/// Integrate over the torus using the polar cells, doubling every node
/// count until successive levels agree to `tol` relative to the max-norm.
pub fn integrate_cells<F>(cells: &[Cell], tol: f64, max_level: usize, f: F) -> QuadResult
where
    F: Fn(&Sample) -> Vals + Sync,
{
    let secs = sectors(cells);
    let run = |level: usize| -> Vals {
        secs.par_iter()
            .map(|s| integrate_sector(cells, s, level, &f))
            .collect::<Vec<_>>()
            .into_iter()
            .fold(Vals::zeros(), |a, b| a + b)
    };
    let mut prev = run(0);
    let mut err = f64::INFINITY;
    for level in 1..=max_level {
        let cur = run(level);
        let (ok, diff) = converged(&prev, &cur, tol);
        err = diff;
        prev = cur;
        if ok {
            return QuadResult { value: prev, error: err, level };
        }
    }
    log::debug!("polar quadrature stopped at level {max_level} with error {err:.3e}");
    QuadResult { value: prev, error: err, level: max_level }
}

/// Periodic trapezoidal rule with grid doubling: `run(n)` must return the
/// weighted sum over the `n × n` grid `(2πi/n, 2πj/n)`. Stops when two
/// successive grids agree to `tol`.
pub fn integrate_doubling<F>(start: usize, max_n: usize, tol: f64, run: F) -> QuadResult
where
    F: Fn(usize) -> Vals,
{
    let mut n = start.max(4);
    let mut prev = run(n);
    let mut err = f64::INFINITY;
    while n * 2 <= max_n {
        n *= 2;
        let cur = run(n);
        let (ok, diff) = converged(&prev, &cur, tol);
        err = diff;
        prev = cur;
        if ok {
            return QuadResult { value: prev, error: err, level: n };
        }
    }
    log::debug!("trapezoid quadrature stopped at n = {n} with error {err:.3e}");
    QuadResult { value: prev, error: err, level: n }
}

/// Trapezoid sum of `f(x, y)` over the `n × n` periodic grid.
pub fn trapezoid_grid<F>(n: usize, f: F) -> Vals
where
    F: Fn(usize, usize) -> Vals + Sync,
{
    let w = (TAU / n as f64).powi(2);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut row = Vals::zeros();
            for j in 0..n {
                row += f(i, j);
            }
            row
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(Vals::zeros(), |a, b| a + b)
        * w
}

/// Exponent of the super-Gaussian patch window `χ(ρ) = exp(-(ρ/σ)^p)`.
pub const WINDOW_POWER: i32 = 8;
/// `(ρ/σ)^p` beyond which the window is below double precision.
const WINDOW_CUT: f64 = 40.0;

/// A polar patch of the partition of unity: a smooth radial window about
/// a near-singular spot, measured in the `ξ` metric.
#[derive(Debug, Clone, Copy)]
pub struct Patch {
    pub center: Vector2<f64>,
    pub metric: Matrix2<f64>,
    /// Radial scale of the singular behaviour.
    pub depth: f64,
    /// Radial panel break (inner disk radius) in `ξ` units.
    pub split: f64,
    /// Window width.
    pub sigma: f64,
    sqrt: Matrix2<f64>,
    sqrt_inv: Matrix2<f64>,
    jac: f64,
}

impl Patch {
    pub fn new(center: Vector2<f64>, metric: Matrix2<f64>, depth: f64) -> Self {
        let (s, si) = sqrt_spd(&metric);
        Self {
            center,
            metric,
            depth,
            split: 0.0,
            sigma: 1.0,
            sqrt: s,
            sqrt_inv: si,
            jac: 1.0 / metric.determinant().sqrt(),
        }
    }

    /// Radius beyond which the window vanishes to double precision.
    pub fn cut(&self) -> f64 {
        self.sigma * WINDOW_CUT.powf(1.0 / WINDOW_POWER as f64)
    }

    /// Largest admissible cut radius: the window must stay clear of the
    /// boundary of the fundamental square around the centre.
    pub fn max_cut(&self) -> f64 {
        let inv = self.metric.try_inverse().unwrap_or_else(Matrix2::identity);
        PI * (1.0 / inv[(0, 0)].sqrt()).min(1.0 / inv[(1, 1)].sqrt())
    }

    /// `ξ`-distance from the centre to a torus point (nearest image).
    pub fn xi_distance(&self, v: Vector2<f64>) -> f64 {
        let u = Vector2::new(wrap_pi(v.x - self.center.x), wrap_pi(v.y - self.center.y));
        (self.sqrt * u).norm()
    }

    /// Set the window so that it is negligible beyond `cut`.
    pub fn set_cut(&mut self, cut: f64) {
        self.sigma = cut / WINDOW_CUT.powf(1.0 / WINDOW_POWER as f64);
    }

    /// `(χ, 1 - χ)` at a torus point.
    pub fn window(&self, v: Vector2<f64>) -> (f64, f64) {
        window_at(self.xi_distance(v) / self.sigma)
    }
}

fn window_at(x: f64) -> (f64, f64) {
    let t = x.powi(WINDOW_POWER);
    if t >= WINDOW_CUT {
        (0.0, 1.0)
    } else {
        ((-t).exp(), -(-t).exp_m1())
    }
}

/// `1 - Σ χ_h` at a torus point, computed without cancellation near a
/// patch centre.
pub fn outer_weight(patches: &[Patch], v: Vector2<f64>) -> f64 {
    let mut one_minus = 1.0;
    let mut others = 0.0;
    let mut inside = false;
    for p in patches {
        let (chi, om) = p.window(v);
        if chi > 0.5 && !inside {
            inside = true;
            one_minus = om;
        } else {
            others += chi;
        }
    }
    one_minus - others
}

/// Point handed to a patch integrand; `window` is `χ` at the point.
#[derive(Debug, Clone, Copy)]
pub struct PatchSample {
    pub v: Vector2<f64>,
    pub local: Vector2<f64>,
    pub patch: usize,
    pub rho: f64,
    pub inner: bool,
    pub window: f64,
}

fn integrate_patch<F>(patches: &[Patch], k: usize, level: usize, f: &F) -> Vals
where
    F: Fn(&PatchSample) -> Vals + Sync,
{
    let p = &patches[k];
    let scale = 1usize << level;
    let n_th = 12 * scale;
    let gi = gauss_legendre(10 * scale);
    let go = gauss_legendre(12 * scale);
    let cut = p.cut();
    let split = p.split.min(cut);
    let ds = p.depth.abs().max(1e-9 * split.max(1e-300));
    let acc = (0..n_th)
        .into_par_iter()
        .map(|j| {
            let th = TAU * (j as f64 + 0.5) / n_th as f64;
            let u = Vector2::new(th.cos(), th.sin());
            let eval = |rho: f64, inner: bool| -> Vals {
                let local = p.sqrt_inv * (u * rho);
                let window = window_at(rho / p.sigma).0;
                f(&PatchSample { v: p.center + local, local, patch: k, rho, inner, window })
            };
            let mut ray = Vals::zeros();
            let (t_end, outer_from) =
                if split > 0.0 { ((split / ds).asinh(), split) } else { ((cut / ds).asinh(), cut) };
            for &(xr, wr) in gi.iter() {
                let t = 0.5 * t_end * (xr + 1.0);
                let rho = ds * t.sinh();
                ray += eval(rho, split > 0.0) * (wr * ds * t.cosh() * 0.5 * t_end * rho);
            }
            if cut > outer_from {
                let half = 0.5 * (cut - outer_from);
                for &(xr, wr) in go.iter() {
                    let rho = outer_from + half * (xr + 1.0);
                    ray += eval(rho, false) * (wr * half * rho);
                }
            }
            ray
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(Vals::zeros(), |a, b| a + b);
    acc * (TAU / n_th as f64) * p.jac
}

/// Partition-of-unity quadrature: `trap(n)` must return the `n × n`
/// periodic trapezoid sum of `f · (1 - Σχ)` (see [`outer_weight`]) and
/// `polar` evaluates the windowed integrand on the patches. Each part is
/// refined until it is converged to `tol` relative to the total.
pub fn integrate_patched<T, F>(
    patches: &[Patch],
    tol: f64,
    trap_start: usize,
    trap_max: usize,
    max_level: usize,
    trap: T,
    polar: F,
) -> QuadResult
where
    T: Fn(usize) -> Vals,
    F: Fn(&PatchSample) -> Vals + Sync,
{
    let mut n = trap_start.max(4);
    let mut t_prev = trap(n);
    let mut levels = vec![0usize; patches.len()];
    let mut p_prev: Vec<Vals> = (0..patches.len()).map(|k| integrate_patch(patches, k, 0, &polar)).collect();
    let total = |t: &Vals, p: &[Vals]| p.iter().fold(*t, |a, b| a + b);
    let mut err_t = f64::INFINITY;
    let mut done_t = false;
    let mut err_p = vec![f64::INFINITY; patches.len()];
    let mut done_p = vec![false; patches.len()];
    loop {
        let scale = total(&t_prev, &p_prev).amax().max(f64::MIN_POSITIVE);
        let share = tol * scale / (1.0 + patches.len() as f64);
        if !done_t {
            if n * 2 > trap_max {
                done_t = true;
            } else {
                n *= 2;
                let cur = trap(n);
                err_t = (cur - t_prev).amax();
                t_prev = cur;
                done_t = err_t <= share;
            }
        }
        for k in 0..patches.len() {
            if done_p[k] {
                continue;
            }
            if levels[k] >= max_level {
                done_p[k] = true;
                continue;
            }
            levels[k] += 1;
            let cur = integrate_patch(patches, k, levels[k], &polar);
            err_p[k] = (cur - p_prev[k]).amax();
            p_prev[k] = cur;
            done_p[k] = err_p[k] <= share;
        }
        if done_t && done_p.iter().all(|&d| d) {
            break;
        }
    }
    let error = err_t + err_p.iter().sum::<f64>();
    let value = total(&t_prev, &p_prev);
    let scale = value.amax().max(f64::MIN_POSITIVE);
    if error > tol * scale {
        log::debug!("patched quadrature: error {error:.3e} above tolerance (n = {n}, levels {levels:?})");
    }
    QuadResult { value, error, level: n }
}
