//! Two-body geometry: Kepler's equation, element sets and anomaly jets.
//!
//! Time is in days and lengths in au throughout, so the heliocentric
//! gravitational parameter is `GAUSS_K²`.  Element partials are taken with
//! respect to the Keplerian shape vector `(a, e, i, Ω, ω)` at fixed mean
//! anomaly; the Delaunay chain rule is applied on top of those.

use nalgebra::{Matrix4x5, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};

use crate::error::{Error, Result};

/// Gauss gravitational constant (au^{3/2} day^{-1} in solar-mass units).
pub const GAUSS_K: f64 = 0.017_202_098_95;
/// Heliocentric gravitational parameter `k²` (au³ day⁻²).
pub const GM_SUN: f64 = GAUSS_K * GAUSS_K;
/// Julian year in days.
pub const DAYS_PER_YEAR: f64 = 365.25;

/// Index of each Keplerian shape element in partial-derivative arrays.
pub const EL_A: usize = 0;
pub const EL_E: usize = 1;
pub const EL_I: usize = 2;
pub const EL_NODE: usize = 3;
pub const EL_ARGP: usize = 4;

const MAX_KEPLER_ITER: usize = 50;

/// Wrap an angle into `[0, 2π)`.
pub fn wrap_tau(x: f64) -> f64 {
    let r = x.rem_euclid(TAU);
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Wrap an angle into `(-π, π]`.
pub fn wrap_pi(x: f64) -> f64 {
    let r = wrap_tau(x);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Solve `E - e sin E = M` for elliptic `0 <= e < 1`.
///
/// The result lies in the same `2π` branch as `M`. Newton's method is seeded
/// with `M + e sin M`; if it stalls, a bracketed bisection finishes the job.
pub fn solve_kepler(e: f64, mean_anom: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&e) || !mean_anom.is_finite() {
        return Err(Error::KeplerNonConvergence { e, mean_anom });
    }
    let turns = ((mean_anom + PI) / TAU).floor();
    let m = mean_anom - turns * TAU;
    let f = |x: f64| x - e * x.sin() - m;

    let mut x = m + e * m.sin();
    let mut converged = false;
    for _ in 0..MAX_KEPLER_ITER {
        let fx = f(x);
        let dx = fx / (1.0 - e * x.cos());
        x -= dx;
        if dx.abs() <= 4.0 * f64::EPSILON * (1.0 + x.abs()) {
            converged = true;
            break;
        }
    }
    if !converged || !x.is_finite() || f(x).abs() > 1e-13 {
        // The residual is monotone in E, and E is confined to [m - e, m + e].
        let (mut lo, mut hi) = (m - e - 1e-15, m + e + 1e-15);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo <= f64::EPSILON * (1.0 + mid.abs()) {
                break;
            }
        }
        x = 0.5 * (lo + hi);
        if f(x).abs() > 1e-13 {
            return Err(Error::KeplerNonConvergence { e, mean_anom });
        }
    }
    Ok(x + turns * TAU)
}

/// Osculating Keplerian elements (angles in radians).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeplerianElements {
    pub a: f64,
    pub e: f64,
    pub i: f64,
    pub node: f64,
    pub argp: f64,
    pub mean_anom: f64,
}

impl KeplerianElements {
    /// Validated constructor. Angles other than the inclination are wrapped
    /// into `[0, 2π)`.
    pub fn new(a: f64, e: f64, i: f64, node: f64, argp: f64, mean_anom: f64) -> Result<Self> {
        let el = Self { a, e, i, node: wrap_tau(node), argp: wrap_tau(argp), mean_anom: wrap_tau(mean_anom) };
        el.validate()?;
        Ok(el)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.a, self.e, self.i, self.node, self.argp, self.mean_anom];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidElements("non-finite element".into()));
        }
        if self.a <= 0.0 {
            return Err(Error::InvalidElements(format!("a = {} must be positive", self.a)));
        }
        if !(0.0..1.0).contains(&self.e) {
            return Err(Error::InvalidElements(format!("e = {} outside [0, 1)", self.e)));
        }
        if !(0.0..=PI).contains(&self.i) {
            return Err(Error::InvalidElements(format!("i = {} outside [0, π]", self.i)));
        }
        Ok(())
    }

    /// The orbit shape, dropping the mean anomaly.
    pub fn orbit(&self) -> Orbit {
        Orbit::from_shape(self.a, self.e, self.i, self.node, self.argp)
    }

    /// Heliocentric position and velocity for a body moving under `gm`.
    pub fn to_cartesian(&self, gm: f64) -> Result<CartesianState> {
        let orbit = self.orbit();
        let jet = orbit.jet(self.mean_anom)?;
        let n = (gm / self.a.powi(3)).sqrt();
        Ok(CartesianState { pos: jet.x, vel: jet.x1 * n })
    }

    /// Osculating elements of a Cartesian state under `gm`.
    ///
    /// For circular orbits the argument of pericentre is set to zero and for
    /// equatorial ones the node is set to zero, so the mean longitude stays
    /// meaningful.
    pub fn from_cartesian(state: &CartesianState, gm: f64) -> Result<Self> {
        let r = state.pos;
        let v = state.vel;
        let rn = r.norm();
        let hvec = r.cross(&v);
        let hn = hvec.norm();
        if rn == 0.0 || hn == 0.0 {
            return Err(Error::InvalidElements("rectilinear or null state".into()));
        }
        let energy = 0.5 * v.norm_squared() - gm / rn;
        if energy >= 0.0 {
            return Err(Error::InvalidElements("unbound state".into()));
        }
        let a = -gm / (2.0 * energy);
        let evec = v.cross(&hvec) / gm - r / rn;
        let e = evec.norm();
        let i = (hvec.z / hn).clamp(-1.0, 1.0).acos();
        let nvec = Vector3::new(-hvec.y, hvec.x, 0.0);
        let nn = nvec.norm();
        let node = if nn > 1e-14 * hn { nvec.y.atan2(nvec.x) } else { 0.0 };

        // In-plane basis: unit node direction and its in-plane normal.
        let hhat = hvec / hn;
        let p_dir = if nn > 1e-14 * hn { nvec / nn } else { Vector3::new(node.cos(), node.sin(), 0.0) };
        let q_dir = hhat.cross(&p_dir);
        let argp = if e > 1e-14 { evec.dot(&q_dir).atan2(evec.dot(&p_dir)) } else { 0.0 };
        let u = r.dot(&q_dir).atan2(r.dot(&p_dir));
        let nu = u - argp;
        let big_e = 2.0 * (((1.0 - e) / (1.0 + e)).sqrt() * (0.5 * nu).tan()).atan();
        let mean_anom = big_e - e * big_e.sin();
        Self::new(a, e, i, node, argp, mean_anom)
    }

    pub fn to_delaunay(&self) -> Result<DelaunayElements> {
        self.validate()?;
        let big_l = GAUSS_K * self.a.sqrt();
        let big_g = big_l * (1.0 - self.e * self.e).sqrt();
        Ok(DelaunayElements {
            big_l,
            big_g,
            big_z: big_g * self.i.cos(),
            l: self.mean_anom,
            g: self.argp,
            z: self.node,
        })
    }

    pub fn to_equinoctial(&self) -> Result<EquinoctialElements> {
        self.validate()?;
        if PI - self.i < 1e-10 {
            return Err(Error::InvalidElements(
                "equinoctial elements are singular for retrograde equatorial orbits".into(),
            ));
        }
        let lp = self.argp + self.node;
        let t = (0.5 * self.i).tan();
        Ok(EquinoctialElements {
            a: self.a,
            h: self.e * lp.sin(),
            k: self.e * lp.cos(),
            p: t * self.node.sin(),
            q: t * self.node.cos(),
            lambda: wrap_tau(self.mean_anom + lp),
        })
    }
}

/// Heliocentric position (au) and velocity (au/day).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartesianState {
    pub pos: Vector3<f64>,
    pub vel: Vector3<f64>,
}

/// Delaunay elements. `big_l`, `big_g`, `big_z` are the actions
/// `k√a`, `k√(a(1-e²))` and `G cos i`; `l`, `g`, `z` are mean anomaly,
/// argument of pericentre and node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelaunayElements {
    pub big_l: f64,
    pub big_g: f64,
    pub big_z: f64,
    pub l: f64,
    pub g: f64,
    pub z: f64,
}

impl DelaunayElements {
    pub fn to_keplerian(&self) -> Result<KeplerianElements> {
        let (l, g, z) = (self.big_l, self.big_g, self.big_z);
        if !(l > 0.0) || !(g > 0.0) || g > l * (1.0 + 1e-15) || z.abs() > g * (1.0 + 1e-15) {
            return Err(Error::InvalidElements(format!("Delaunay actions out of range: L = {l}, G = {g}, Z = {z}")));
        }
        let a = (l / GAUSS_K).powi(2);
        let ratio = (g / l).min(1.0);
        let e = (1.0 - ratio * ratio).max(0.0).sqrt();
        let i = (z / g).clamp(-1.0, 1.0).acos();
        KeplerianElements::new(a, e, i, self.z, self.g, self.l)
    }
}

/// Equinoctial elements, regular at zero eccentricity and inclination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquinoctialElements {
    pub a: f64,
    pub h: f64,
    pub k: f64,
    pub p: f64,
    pub q: f64,
    pub lambda: f64,
}

impl EquinoctialElements {
    pub fn to_keplerian(&self) -> Result<KeplerianElements> {
        let e = self.h.hypot(self.k);
        let t = self.p.hypot(self.q);
        let lp = if e > 0.0 { self.h.atan2(self.k) } else { 0.0 };
        let node = if t > 0.0 { self.p.atan2(self.q) } else { 0.0 };
        let i = 2.0 * t.atan();
        KeplerianElements::new(self.a, e, i, node, lp - node, self.lambda - lp)
    }
}

/// Secular state `(G, Z, g, z)` of the asteroid. `L` is a first integral
/// of the averaged problem and travels alongside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecularState {
    pub big_g: f64,
    pub big_z: f64,
    pub g: f64,
    pub z: f64,
}

impl SecularState {
    pub fn from_elements(el: &KeplerianElements) -> Result<Self> {
        let d = el.to_delaunay()?;
        Ok(Self { big_g: d.big_g, big_z: d.big_z, g: d.g, z: d.z })
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.big_g, self.big_z, self.g, self.z]
    }

    pub fn from_array(y: [f64; 4]) -> Self {
        Self { big_g: y[0], big_z: y[1], g: y[2], z: y[3] }
    }

    /// Orbit shape for semimajor axis `a`.
    pub fn orbit(&self, a: f64) -> Result<Orbit> {
        let el = self.keplerian(a, 0.0)?;
        Ok(el.orbit())
    }

    /// Keplerian elements; `a` is passed through unchanged rather than
    /// recovered from `L`.
    pub fn keplerian(&self, a: f64, mean_anom: f64) -> Result<KeplerianElements> {
        let mut el = DelaunayElements {
            big_l: GAUSS_K * a.sqrt(),
            big_g: self.big_g,
            big_z: self.big_z,
            l: mean_anom,
            g: self.g,
            z: self.z,
        }
        .to_keplerian()?;
        el.a = a;
        Ok(el)
    }
}

/// Jacobian `∂(a, e, i, Ω, ω)/∂(G, Z, g, z)` at fixed `L`, stored as a 4×5
/// matrix whose row `j` holds the Keplerian partials with respect to the
/// `j`-th secular variable.
///
/// The `G` and `Z` rows are singular for circular or equatorial orbits and
/// come out non-finite there.
pub fn delaunay_jacobian(a: f64, e: f64, i: f64) -> Matrix4x5<f64> {
    let big_l = GAUSS_K * a.sqrt();
    let big_g = big_l * (1.0 - e * e).sqrt();
    let (si, ci) = i.sin_cos();
    let mut j = Matrix4x5::zeros();
    j[(0, EL_E)] = -big_g / (big_l * big_l * e);
    j[(0, EL_I)] = ci / (big_g * si);
    j[(1, EL_I)] = -1.0 / (big_g * si);
    j[(2, EL_ARGP)] = 1.0;
    j[(3, EL_NODE)] = 1.0;
    j
}

/// Map Keplerian shape partials `∂f/∂κ` to secular-variable partials
/// `∂f/∂(G, Z, g, z)`.
pub fn to_secular_partials(a: f64, e: f64, i: f64, dk: &[f64; 5]) -> [f64; 4] {
    let j = delaunay_jacobian(a, e, i);
    let mut out = [0.0; 4];
    for (r, o) in out.iter_mut().enumerate() {
        // Skip structurally zero entries so singular ones do not poison
        // well-defined sums with 0 * inf.
        *o = (0..5).filter(|&c| j[(r, c)] != 0.0).map(|c| j[(r, c)] * dk[c]).sum();
    }
    out
}

/// Orbit shape with precomputed rotation frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Orbit {
    pub a: f64,
    pub e: f64,
    pub i: f64,
    pub node: f64,
    pub argp: f64,
    b: f64,
    p: Vector3<f64>,
    q: Vector3<f64>,
}

/// Position and its mean-anomaly derivatives at one point of an orbit.
#[derive(Debug, Clone, Copy)]
pub struct OrbitPoint {
    pub x: Vector3<f64>,
    pub x1: Vector3<f64>,
    pub x2: Vector3<f64>,
    pub x3: Vector3<f64>,
}

/// Position jet plus partials with respect to `(a, e, i, Ω, ω)` of the
/// position and of its first two mean-anomaly derivatives.
#[derive(Debug, Clone, Copy)]
pub struct OrbitJet {
    pub x: Vector3<f64>,
    pub x1: Vector3<f64>,
    pub x2: Vector3<f64>,
    pub x3: Vector3<f64>,
    pub dx: [Vector3<f64>; 5],
    pub dx1: [Vector3<f64>; 5],
    pub dx2: [Vector3<f64>; 5],
}

struct Perifocal {
    x: [f64; 4],
    y: [f64; 4],
    dex: [f64; 3],
    dey: [f64; 3],
}

impl Orbit {
    pub fn from_shape(a: f64, e: f64, i: f64, node: f64, argp: f64) -> Self {
        let (so, co) = node.sin_cos();
        let (sw, cw) = argp.sin_cos();
        let (si, ci) = i.sin_cos();
        let p = Vector3::new(co * cw - so * sw * ci, so * cw + co * sw * ci, sw * si);
        let q = Vector3::new(-co * sw - so * cw * ci, -so * sw + co * cw * ci, cw * si);
        Self { a, e, i, node, argp, b: a * (1.0 - e * e).sqrt(), p, q }
    }

    pub fn elements(&self, mean_anom: f64) -> KeplerianElements {
        KeplerianElements { a: self.a, e: self.e, i: self.i, node: self.node, argp: self.argp, mean_anom }
    }

    /// Unit vectors towards pericentre and 90° ahead of it in the orbit plane.
    pub fn frame(&self) -> (Vector3<f64>, Vector3<f64>) {
        (self.p, self.q)
    }

    /// Unit angular-momentum direction.
    pub fn normal(&self) -> Vector3<f64> {
        self.p.cross(&self.q)
    }

    /// Heliocentric position at mean anomaly `l`.
    pub fn position(&self, l: f64) -> Vector3<f64> {
        let big_e = solve_kepler(self.e, l).unwrap_or(l);
        let (s, c) = big_e.sin_cos();
        self.p * (self.a * (c - self.e)) + self.q * (self.b * s)
    }

    fn perifocal(&self, l: f64) -> Result<Perifocal> {
        let (a, e, b) = (self.a, self.e, self.b);
        let big_e = solve_kepler(e, l)?;
        let (s, c) = big_e.sin_cos();
        let d = 1.0 - e * c;
        let e1 = 1.0 / d;
        let e2 = -e * s / d.powi(3);
        let e3 = -e * c / d.powi(4) + 3.0 * e * e * s * s / d.powi(5);

        let x = [
            a * (c - e),
            -a * s * e1,
            -a * c * e1 * e1 - a * s * e2,
            a * s * e1.powi(3) - 3.0 * a * c * e1 * e2 - a * s * e3,
        ];
        let y = [
            b * s,
            b * c * e1,
            -b * s * e1 * e1 + b * c * e2,
            -b * c * e1.powi(3) - 3.0 * b * s * e1 * e2 + b * c * e3,
        ];

        // Partials in e at fixed E, then corrected to fixed mean anomaly via
        // dE/de = sin E / D, i.e. d/de|_l = d/de|_E + sin E d/dl.
        let de1 = c / (d * d);
        let de2 = -s / d.powi(3) - 3.0 * e * s * c / d.powi(4);
        let be = -a * e / (1.0 - e * e).sqrt();
        let dex = [-a + s * x[1], -a * s * de1 + s * x[2], -2.0 * a * c * e1 * de1 - a * s * de2 + s * x[3]];
        let dey = [
            be * s + s * y[1],
            be * c * e1 + b * c * de1 + s * y[2],
            be * (-s * e1 * e1 + c * e2) + b * (-2.0 * s * e1 * de1 + c * de2) + s * y[3],
        ];
        Ok(Perifocal { x, y, dex, dey })
    }

    /// Position and its first three mean-anomaly derivatives.
    pub fn point(&self, l: f64) -> Result<OrbitPoint> {
        let pf = self.perifocal(l)?;
        let v = |k: usize| self.p * pf.x[k] + self.q * pf.y[k];
        Ok(OrbitPoint { x: v(0), x1: v(1), x2: v(2), x3: v(3) })
    }

    /// Full jet including partials with respect to the shape elements.
    pub fn jet(&self, l: f64) -> Result<OrbitJet> {
        let pf = self.perifocal(l)?;
        let (p, q) = (self.p, self.q);
        let (so, co) = self.node.sin_cos();
        let (sw, cw) = self.argp.sin_cos();
        let (si, ci) = self.i.sin_cos();
        let p_i = Vector3::new(so * sw * si, -co * sw * si, sw * ci);
        let q_i = Vector3::new(so * cw * si, -co * cw * si, cw * ci);
        let p_node = Vector3::new(-p.y, p.x, 0.0);
        let q_node = Vector3::new(-q.y, q.x, 0.0);

        let level = |k: usize| -> [Vector3<f64>; 5] {
            let (xk, yk) = (pf.x[k], pf.y[k]);
            [
                (p * xk + q * yk) / self.a,
                p * pf.dex[k] + q * pf.dey[k],
                p_i * xk + q_i * yk,
                p_node * xk + q_node * yk,
                q * xk - p * yk,
            ]
        };
        let v = |k: usize| p * pf.x[k] + q * pf.y[k];
        Ok(OrbitJet { x: v(0), x1: v(1), x2: v(2), x3: v(3), dx: level(0), dx1: level(1), dx2: level(2) })
    }

    /// `X(l0 + dl) - X(l0)`, computed without cancellation so that it keeps
    /// full relative precision for small `dl`.
    pub fn position_increment(&self, l0: f64, dl: f64) -> Result<Vector3<f64>> {
        let e = self.e;
        let e0 = solve_kepler(e, l0)?;
        // Kepler's equation in increments: x - 2e cos(E0 + x/2) sin(x/2) = dl.
        let mut x = dl / (1.0 - e * e0.cos());
        for _ in 0..60 {
            let g = x - 2.0 * e * (e0 + 0.5 * x).cos() * (0.5 * x).sin() - dl;
            let step = g / (1.0 - e * (e0 + x).cos());
            x -= step;
            if step.abs() <= 1e-16 * x.abs() {
                break;
            }
        }
        let sh = (0.5 * x).sin();
        let mid = e0 + 0.5 * x;
        Ok(self.p * (-2.0 * self.a * mid.sin() * sh) + self.q * (2.0 * self.b * mid.cos() * sh))
    }

    /// Position with its shape-element partials only.
    pub fn position_partials(&self, l: f64) -> Result<(Vector3<f64>, [Vector3<f64>; 5])> {
        let (a, e, b) = (self.a, self.e, self.b);
        let big_e = solve_kepler(e, l)?;
        let (s, c) = big_e.sin_cos();
        let d = 1.0 - e * c;
        let x0 = a * (c - e);
        let y0 = b * s;
        let x1 = -a * s / d;
        let y1 = b * c / d;
        let be = -a * e / (1.0 - e * e).sqrt();
        let dex = -a + s * x1;
        let dey = be * s + s * y1;
        let (p, q) = (self.p, self.q);
        let (so, co) = self.node.sin_cos();
        let (sw, cw) = self.argp.sin_cos();
        let (si, ci) = self.i.sin_cos();
        let p_i = Vector3::new(so * sw * si, -co * sw * si, sw * ci);
        let q_i = Vector3::new(so * cw * si, -co * cw * si, cw * ci);
        let x = p * x0 + q * y0;
        Ok((x, [x / a, p * dex + q * dey, p_i * x0 + q_i * y0, Vector3::new(-x.y, x.x, 0.0), q * x0 - p * y0]))
    }
}
