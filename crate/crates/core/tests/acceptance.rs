//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero if any fails.

use nalgebra::{Matrix2, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use orbdist::averaged::LocalModel;
use orbdist::distance::{critical_points_with, signed_distance_gradient, torus_distance, CriticalPoint};
use orbdist::ephemeris::default_mass;
use orbdist::kepler::wrap_tau;
use orbdist::{
    averaged_gradient, averaged_keplerian, averaged_potential, critical_points, crossing_interval,
    crossing_probability, extended_field, extended_field_pair, phase_ensemble, propagate_secular, signed_distance,
    CriticalSet, ElementRecord, ElementTable, FieldSettings, ForecastSettings, FullSettings, KeplerianElements,
    KeplerianField, Method, Orbit, OrbitPair, Planet, SecularSettings, SecularState, Side, VirtualAsteroid,
    DAYS_PER_YEAR,
};

const T0: f64 = 51544.5;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn main() {
    let criteria: [(u32, fn() -> Outcome); 10] = [
        (1, moid_oracle),
        (2, closed_form_geometry),
        (3, gradient_fidelity),
        (4, extraction_consistency),
        (5, jump_formula),
        (6, generalized_solutions),
        (7, c1_regularity),
        (8, first_integrals),
        (9, secular_vs_full),
        (10, crossing_forecast),
    ];
    let only: Option<u32> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (n, f) in criteria {
        if only.is_some_and(|k| k != n) {
            continue;
        }
        let start = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        if !out.pass {
            failed += 1;
        }
        println!("{} criterion {n}: {} [{secs:.1} s]", if out.pass { "PASS" } else { "FAIL" }, out.detail);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn shape(a: f64, e: f64, i: f64, node: f64, argp: f64) -> Orbit {
    Orbit::from_shape(a, e, i, node, argp)
}

fn state_of(orbit: &Orbit) -> SecularState {
    SecularState::from_elements(&orbit.elements(0.0)).unwrap()
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den
}

fn field_vec(f: &KeplerianField) -> Vec<f64> {
    let mut v = vec![f.value];
    v.extend_from_slice(&f.grad);
    v
}

// ---------------------------------------------------------------------------
// Brute-force distance oracle with its own Kepler solver and frame.

struct Ellipse {
    a: f64,
    e: f64,
    b: f64,
    p: Vector3<f64>,
    q: Vector3<f64>,
}

impl Ellipse {
    fn new(a: f64, e: f64, i: f64, node: f64, argp: f64) -> Self {
        let (so, co) = node.sin_cos();
        let (sw, cw) = argp.sin_cos();
        let (si, ci) = i.sin_cos();
        Self {
            a,
            e,
            b: a * (1.0 - e * e).sqrt(),
            p: Vector3::new(co * cw - so * sw * ci, so * cw + co * sw * ci, sw * si),
            q: Vector3::new(-co * sw - so * cw * ci, -so * sw + co * cw * ci, cw * si),
        }
    }

    fn ecc_anom(&self, l: f64) -> f64 {
        let mut ea = if self.e < 0.8 { l } else { PI };
        for _ in 0..60 {
            let f = ea - self.e * ea.sin() - l;
            let step = f / (1.0 - self.e * ea.cos());
            ea -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        ea
    }

    /// Position and its first two mean-anomaly derivatives.
    fn jet(&self, l: f64) -> [Vector3<f64>; 3] {
        let ea = self.ecc_anom(l);
        let (s, c) = ea.sin_cos();
        let x = self.p * (self.a * (c - self.e)) + self.q * (self.b * s);
        let xe = self.p * (-self.a * s) + self.q * (self.b * c);
        let xee = self.p * (-self.a * c) + self.q * (-self.b * s);
        let n = 1.0 / (1.0 - self.e * c);
        let x1 = xe * n;
        let x2 = xee * (n * n) - xe * (self.e * s * n * n * n);
        [x, x1, x2]
    }
}

fn oracle_polish(o1: &Ellipse, o2: &Ellipse, mut v: Vector2<f64>) -> Option<Vector2<f64>> {
    let eval = |v: Vector2<f64>| {
        let [x, x1, x2] = o1.jet(v.x);
        let [y, y1, y2] = o2.jet(v.y);
        let d = x - y;
        let g = Vector2::new(2.0 * d.dot(&x1), -2.0 * d.dot(&y1));
        let h11 = 2.0 * (x1.dot(&x1) + d.dot(&x2));
        let h12 = -2.0 * x1.dot(&y1);
        let h22 = 2.0 * (y1.dot(&y1) - d.dot(&y2));
        (d.norm_squared(), g, Matrix2::new(h11, h12, h12, h22))
    };
    for _ in 0..100 {
        let (f, g, h) = eval(v);
        let pd = h[(0, 0)] > 0.0 && h.determinant() > 0.0;
        // Plain Newton once the Hessian is positive definite; damped
        // descent otherwise.
        let step = if pd {
            -(h.try_inverse()? * g)
        } else {
            let mut step = -g / h.norm();
            while eval(v + step).0 > f && step.norm() > 1e-14 {
                step *= 0.5;
            }
            step
        };
        v += step;
        if step.norm() < 1e-15 {
            break;
        }
    }
    let (_, g, h) = eval(v);
    let scale = (o1.a + o2.a).powi(2);
    let ok = g.norm() < 1e-11 * scale && h[(0, 0)] > 0.0 && h.determinant() > 0.0;
    ok.then(|| Vector2::new(wrap_tau(v.x), wrap_tau(v.y)))
}

fn grid_minima(o1: &Ellipse, o2: &Ellipse, n: usize) -> Vec<Vector2<f64>> {
    let step = TAU / n as f64;
    let xs: Vec<Vector3<f64>> = (0..n).map(|i| o1.jet(i as f64 * step)[0]).collect();
    let ys: Vec<Vector3<f64>> = (0..n).map(|j| o2.jet(j as f64 * step)[0]).collect();
    let f: Vec<f64> = (0..n * n).map(|k| (xs[k / n] - ys[k % n]).norm_squared()).collect();
    let mut out: Vec<Vector2<f64>> = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let v = f[i * n + j];
            let local = (0..9).filter(|&k| k != 4).all(|k| {
                let ii = (i + n + k / 3 - 1) % n;
                let jj = (j + n + k % 3 - 1) % n;
                f[ii * n + jj] >= v
            });
            if !local {
                continue;
            }
            if let Some(p) = oracle_polish(o1, o2, Vector2::new(i as f64 * step, j as f64 * step)) {
                if !out.iter().any(|q| torus_distance(*q, p) < 1e-8) {
                    out.push(p);
                }
            }
        }
    }
    out
}

fn random_shape(rng: &mut ChaCha8Rng) -> [f64; 5] {
    [
        rng.gen_range(0.5..5.0),
        rng.gen_range(0.0..0.9),
        rng.gen_range(0.0..PI),
        rng.gen_range(0.0..TAU),
        rng.gen_range(0.0..TAU),
    ]
}

fn moid_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let configs: Vec<([f64; 5], [f64; 5])> =
        (0..100).map(|_| (random_shape(&mut rng), random_shape(&mut rng))).collect();
    let results: Vec<Result<(usize, usize, f64), String>> = configs
        .par_iter()
        .map(|(s1, s2)| {
            let pair =
                OrbitPair::new(shape(s1[0], s1[1], s1[2], s1[3], s1[4]), shape(s2[0], s2[1], s2[2], s2[3], s2[4]));
            let set = critical_points(&pair).map_err(|e| e.to_string())?;
            let lib: Vec<Vector2<f64>> = set.minima().map(|m| m.v).collect();
            let grid = grid_minima(
                &Ellipse::new(s1[0], s1[1], s1[2], s1[3], s1[4]),
                &Ellipse::new(s2[0], s2[1], s2[2], s2[3], s2[4]),
                720,
            );
            let nearest = |p: &Vector2<f64>, set: &[Vector2<f64>]| {
                set.iter().map(|q| torus_distance(*p, *q)).fold(f64::INFINITY, f64::min)
            };
            let worst = lib.iter().chain(&grid).map(|p| nearest(p, &lib).max(nearest(p, &grid))).fold(0.0, f64::max);
            Ok((lib.len(), grid.len(), worst))
        })
        .collect();
    let mut errors = 0;
    let mut worst = 0.0f64;
    let mut minima = 0;
    let mut mismatched = 0;
    for r in &results {
        match r {
            Ok((nl, ng, w)) => {
                minima += nl;
                worst = worst.max(*w);
                if nl != ng || *w >= 1e-6 {
                    mismatched += 1;
                }
            }
            Err(_) => errors += 1,
        }
    }
    let pass = errors == 0 && mismatched == 0;
    outcome(
        pass,
        format!("100 configurations, {minima} minima, {mismatched} mismatched, {errors} errors, worst offset {worst:.2e} rad"),
    )
}

fn closed_form_geometry() -> Outcome {
    let run = |r2: f64| -> orbdist::Result<(usize, f64)> {
        let pair = OrbitPair::new(shape(1.0, 0.0, 0.0, 0.0, 0.0), shape(r2, 0.0, FRAC_PI_2, 0.0, 0.0));
        let set = critical_points(&pair)?;
        let worst = set.minima().map(|m| (m.distance() - (r2 - 1.0)).abs()).fold(0.0, f64::max);
        Ok((set.num_minima(), worst))
    };
    match (run(2.0), run(1.0)) {
        (Ok((n1, e1)), Ok((n2, e2))) => outcome(
            n1 == 2 && e1 < 1e-10 && n2 == 2 && e2 < 1e-10,
            format!("r=1/r=2: {n1} minima, |d-1| <= {e1:.1e}; unit circles: {n2} minima, d <= {e2:.1e}"),
        ),
        (a, b) => outcome(false, format!("errors: {:?} {:?}", a.err(), b.err())),
    }
}

fn nearest_minimum(set: &CriticalSet, v: Vector2<f64>) -> Option<&CriticalPoint> {
    set.minima().min_by(|a, b| torus_distance(a.v, v).total_cmp(&torus_distance(b.v, v)))
}

fn build_pair(e: &[f64; 10]) -> OrbitPair {
    OrbitPair::new(shape(e[0], e[1], e[2], e[3], e[4]), shape(e[5], e[6], e[7], e[8], e[9]))
}

fn gradient_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut configs: Vec<[f64; 10]> = Vec::new();
    let mut tries = 0;
    while configs.len() < 50 && tries < 200_000 {
        tries += 1;
        let ap = rng.gen_range(0.7..5.5);
        let planet =
            [ap, rng.gen_range(0.0..0.2), rng.gen_range(0.0..0.3), rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU)];
        let e = rng.gen_range(0.05..0.8);
        let q = ap * rng.gen_range(0.5..1.0);
        let asteroid = [q / (1.0 - e), e, rng.gen_range(0.0..2.5), rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU)];
        let mut el = [0.0; 10];
        el[..5].copy_from_slice(&asteroid);
        el[5..].copy_from_slice(&planet);
        let pair = build_pair(&el);
        let Ok(set) = critical_points(&pair) else { continue };
        let Ok(m) = set.minimum(0) else { continue };
        if m.distance() < 0.05 {
            configs.push(el);
        }
    }
    let errs: Vec<Result<f64, String>> = configs
        .par_iter()
        .map(|el| {
            let pair = build_pair(el);
            let set = critical_points(&pair).map_err(|e| e.to_string())?;
            let cp = set.minimum(0).map_err(|e| e.to_string())?;
            let analytic = signed_distance_gradient(&pair, cp, 0).map_err(|e| e.to_string())?;
            let mut fd = [0.0; 10];
            for k in 0..10 {
                let eps = 1e-6 * if k == 0 || k == 5 { el[k] } else { 1.0 };
                let mut val = [0.0; 2];
                for (n, sgn) in [1.0, -1.0].iter().enumerate() {
                    let mut p = *el;
                    p[k] += sgn * eps;
                    let pp = build_pair(&p);
                    let s = critical_points(&pp).map_err(|e| e.to_string())?;
                    let m = nearest_minimum(&s, cp.v).ok_or("minimum lost")?;
                    val[n] = signed_distance(&pp, m).map_err(|e| e.to_string())?.value;
                }
                fd[k] = (val[0] - val[1]) / (2.0 * eps);
            }
            Ok(rel(&analytic, &fd))
        })
        .collect();
    let failures = errs.iter().filter(|r| r.is_err()).count();
    let worst = errs.iter().filter_map(|r| r.as_ref().ok()).fold(0.0f64, |a, b| a.max(*b));
    outcome(
        configs.len() == 50 && failures == 0 && worst < 1e-4,
        format!(
            "{} configurations (|d| < 0.05 au), {failures} errors, worst relative error {worst:.2e}",
            configs.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// Crossing families: asteroid argument of perihelion as the parameter.

#[derive(Clone, Copy)]
struct Family {
    planet: [f64; 5],
    asteroid: [f64; 4],
}

impl Family {
    fn pair(&self, w: f64) -> OrbitPair {
        let [a, e, i, node] = self.asteroid;
        let p = self.planet;
        OrbitPair::new(shape(a, e, i, node, w), shape(p[0], p[1], p[2], p[3], p[4]))
    }

    fn signed(&self, w: f64, near: Option<Vector2<f64>>) -> (f64, Vector2<f64>) {
        let pair = self.pair(w);
        let set = critical_points(&pair).unwrap();
        let m = match near {
            Some(v) => nearest_minimum(&set, v).unwrap(),
            None => set.minimum(0).unwrap(),
        };
        (signed_distance(&pair, m).unwrap().value, m.v)
    }

    /// Parameter value where the closest minimum has signed distance
    /// `target`, and the location of that minimum.
    fn solve(&self, target: f64) -> (f64, Vector2<f64>) {
        let n = 180;
        let samples: Vec<(f64, f64, Vector2<f64>)> = (0..=n)
            .map(|k| {
                let w = TAU * k as f64 / n as f64;
                let (d, v) = self.signed(w, None);
                (w, d, v)
            })
            .collect();
        for win in samples.windows(2) {
            let (w0, d0, v0) = win[0];
            let (w1, d1, v1) = win[1];
            if d0.abs() < 0.1 && d1.abs() < 0.1 && torus_distance(v0, v1) < 0.3 && (d0 - target) * (d1 - target) < 0.0 {
                let (mut lo, mut hi, mut flo) = (w0, w1, d0 - target);
                let mut v = v0;
                for _ in 0..100 {
                    let mid = 0.5 * (lo + hi);
                    if mid <= lo || mid >= hi {
                        break;
                    }
                    let (d, vm) = self.signed(mid, Some(v));
                    v = vm;
                    if (d - target) * flo > 0.0 {
                        lo = mid;
                        flo = d - target;
                    } else {
                        hi = mid;
                    }
                }
                return (0.5 * (lo + hi), v);
            }
        }
        panic!("family has no crossing")
    }
}

fn families() -> [Family; 5] {
    [
        Family { planet: [1.0, 0.0167, 0.02, 0.3, 1.8], asteroid: [1.4, 0.35, 0.25, 0.5] },
        Family { planet: [5.2, 0.048, 0.023, 1.75, 4.78], asteroid: [3.5, 0.6, 0.4, 2.0] },
        Family { planet: [1.52, 0.093, 0.032, 0.86, 5.0], asteroid: [2.0, 0.45, 0.15, 4.0] },
        Family { planet: [0.723, 0.0068, 0.059, 1.34, 0.96], asteroid: [1.1, 0.5, 0.6, 3.0] },
        Family { planet: [1.0, 0.05, 0.1, 0.3, 1.2], asteroid: [1.5, 0.4, 1.2, 5.5] },
    ]
}

fn h_index(set: &CriticalSet, v: Vector2<f64>) -> usize {
    (0..set.num_minima())
        .min_by(|&a, &b| {
            torus_distance(set.minimum(a).unwrap().v, v).total_cmp(&torus_distance(set.minimum(b).unwrap().v, v))
        })
        .unwrap()
}

/// Adaptive Simpson on `[a, b]`.
fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn rec<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// `∬ 1/δ` over `{uᵀ𝒜u ≤ r²}` by polar quadrature in anomaly offsets.
fn disk_oracle(a: &Matrix2<f64>, d: f64, r: f64) -> f64 {
    let n = 256;
    (0..n)
        .map(|k| {
            let th = TAU * k as f64 / n as f64;
            let e = Vector2::new(th.cos(), th.sin());
            let q = e.dot(&(a * e));
            let rho_max = r / q.sqrt();
            simpson(&|rho: f64| rho / (d * d + rho * rho * q).sqrt(), 0.0, rho_max, 1e-15)
        })
        .sum::<f64>()
        * TAU
        / n as f64
}

fn extraction_consistency() -> Outcome {
    let fam = families()[0];
    let mu = 1e-3;
    let mut worst_side = 0.0f64;
    let mut worst_radius = 0.0f64;
    let mut worst_disk = 0.0f64;
    let mut notes = Vec::new();
    for target in [1e-3, -1e-3] {
        let (w, v) = fam.solve(target);
        let pair = fam.pair(w);
        let y = state_of(&pair.asteroid);
        let a = pair.asteroid.a;
        let s = FieldSettings::default();
        let set = critical_points_with(&pair, &s.scan).unwrap();
        let h = h_index(&set, v);
        let side = Side::of(target);
        let plain = averaged_keplerian(&pair.asteroid, &pair.planet, mu, &s).unwrap();
        let plain_sec = plain.secular(&pair.asteroid);
        let ext = extended_field(&y, a, &pair.planet, mu, h, side, &s).unwrap();
        let pairf = extended_field_pair(&y, a, &pair.planet, mu, h, &s).unwrap();
        let own = if side == Side::Plus { pairf.plus } else { pairf.minus };
        let e1 = rel(&field_vec(&ext.field), &field_vec(&plain));
        let e2 = rel(&field_vec(&own), &field_vec(&plain));
        let e3 = rel(&ext.secular, &plain_sec);
        worst_side = worst_side.max(e1).max(e2).max(e3);

        let r = 0.1;
        let s1 = FieldSettings { radius: Some(r), ..s };
        let s2 = FieldSettings { radius: Some(2.0 * r), ..s };
        let x1 = extended_field(&y, a, &pair.planet, mu, h, side.flipped(), &s1).unwrap();
        let x2 = extended_field(&y, a, &pair.planet, mu, h, side.flipped(), &s2).unwrap();
        let p1 = extended_field_pair(&y, a, &pair.planet, mu, h, &s1).unwrap();
        let p2 = extended_field_pair(&y, a, &pair.planet, mu, h, &s2).unwrap();
        let ratios = [x2.radius / x1.radius, p2.radius / p1.radius];
        if ratios.iter().any(|q| (q - 2.0).abs() > 1e-12) {
            return outcome(false, format!("requested radius doubling not honoured: radii {ratios:?}"));
        }
        notes.push(format!("r = {:.3}/{:.3}", x1.radius, p1.radius));
        worst_radius = worst_radius
            .max(rel(&field_vec(&x1.field), &field_vec(&x2.field)))
            .max(rel(&field_vec(&p1.plus), &field_vec(&p2.plus)))
            .max(rel(&field_vec(&p1.minus), &field_vec(&p2.minus)));

        let model = LocalModel::new(&pair, &set, h).unwrap();
        for rr in [0.05, 0.2, 0.6] {
            let closed = model.disk_integral(rr);
            let quad = disk_oracle(&model.a, model.d_signed, rr);
            worst_disk = worst_disk.max((closed - quad).abs() / quad.abs());
        }
        notes.push(format!("d={:+.1e}", ext.d_signed));
    }
    outcome(
        worst_side < 1e-4 && worst_radius < 1e-7 && worst_disk < 1e-8,
        format!(
            "{}: own side vs plain {worst_side:.2e}, radius doubling {worst_radius:.2e}, disk closed form {worst_disk:.2e}",
            notes.join(", ")
        ),
    )
}

fn jump_formula() -> Outcome {
    let mu = 1e-3;
    let eps = 1e-4;
    let rows: Vec<Result<(f64, [f64; 4], [f64; 4]), String>> = families()
        .par_iter()
        .map(|fam| {
            let (w0, v) = fam.solve(0.0);
            let (d1, _) = fam.signed(w0 + 1e-6, Some(v));
            let (d2, _) = fam.signed(w0 - 1e-6, Some(v));
            let slope = (d1 - d2) / 2e-6;
            let dw = eps / slope.abs();
            let s = FieldSettings::default();
            let grad_at = |w: f64| -> Result<[f64; 4], String> {
                let pair = fam.pair(w);
                let y = state_of(&pair.asteroid);
                averaged_gradient(&y, pair.asteroid.a, &pair.planet, mu, &s).map_err(|e| e.to_string())
            };
            // Extrapolated limit on the side where w moves by `sgn·dw`.
            let limit = |sgn: f64| -> Result<[f64; 4], String> {
                let f1 = grad_at(w0 + sgn * dw)?;
                let f2 = grad_at(w0 + 2.0 * sgn * dw)?;
                Ok(std::array::from_fn(|k| 2.0 * f1[k] - f2[k]))
            };
            let up = limit(1.0)?;
            let down = limit(-1.0)?;
            let (plus, minus) = if slope > 0.0 { (up, down) } else { (down, up) };
            let richardson: [f64; 4] = std::array::from_fn(|k| minus[k] - plus[k]);
            let pair = fam.pair(w0);
            let set = critical_points(&pair).map_err(|e| e.to_string())?;
            let h = h_index(&set, v);
            let y = state_of(&pair.asteroid);
            let ext = extended_field_pair(&y, pair.asteroid.a, &pair.planet, mu, h, &s).map_err(|e| e.to_string())?;
            let err = (0..4)
                .map(|k| (richardson[k] - ext.diff_secular[k]).abs() / ext.diff_secular[k].abs())
                .fold(0.0, f64::max);
            Ok((err, richardson, ext.diff_secular))
        })
        .collect();
    let mut worst = 0.0f64;
    let mut errors = Vec::new();
    for r in &rows {
        match r {
            Ok((e, _, _)) => worst = worst.max(*e),
            Err(e) => errors.push(e.clone()),
        }
    }
    outcome(
        errors.is_empty() && worst < 1e-3,
        format!(
            "5 families, worst componentwise relative error {worst:.2e}{}",
            if errors.is_empty() { String::new() } else { format!(", errors: {errors:?}") }
        ),
    )
}

// ---------------------------------------------------------------------------
// Secular runs through a crossing.

fn crossing_setup() -> (Vec<Planet>, KeplerianElements, SecularSettings) {
    let planet = Planet::two_body("planet", 1e-3, KeplerianElements::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0).unwrap(), T0);
    let ast = KeplerianElements::new(1.3, 0.3, 0.2, 0.0, 0.9, 0.0).unwrap();
    let settings = SecularSettings { step_days: 30.0, ..Default::default() };
    (vec![planet], ast, settings)
}

fn one_sided<F: Fn(f64) -> [f64; 4]>(f: F, t: f64, dt: f64) -> [f64; 4] {
    let (a, b, c) = (f(t), f(t + dt), f(t + 2.0 * dt));
    std::array::from_fn(|k| (-3.0 * a[k] + 4.0 * b[k] - c[k]) / (2.0 * dt))
}

fn generalized_solutions() -> Outcome {
    let (planets, ast, settings) = crossing_setup();
    let y0 = SecularState::from_elements(&ast).unwrap();
    let tf = T0 + 6.0 * DAYS_PER_YEAR;
    let fwd = match propagate_secular(&y0, T0, tf, ast.a, &planets, &settings) {
        Ok(t) => t,
        Err(e) => return outcome(false, format!("forward run failed: {e}")),
    };
    if fwd.events.is_empty() {
        return outcome(false, "no crossing detected".into());
    }
    let state = |t: f64| fwd.state_at(t).unwrap().to_array();
    let dt = 0.5;
    let mut worst = 0.0f64;
    for ev in &fwd.events {
        let before = one_sided(state, ev.t_c, -dt);
        let after = one_sided(state, ev.t_c, dt);
        let jump: [f64; 4] = std::array::from_fn(|k| after[k] - before[k]);
        worst = worst.max(rel(&jump, &ev.applied_jump));
    }
    let yf = fwd.final_state();
    let back = match propagate_secular(&yf, tf, T0, ast.a, &planets, &settings) {
        Ok(t) => t,
        Err(e) => return outcome(false, format!("backward run failed: {e}")),
    };
    let yb = back.final_state().to_array();
    let ya = y0.to_array();
    let scale = [ya[0], ya[0], 1.0, 1.0];
    let trip = (0..4).map(|k| (yb[k] - ya[k]).abs() / scale[k]).fold(0.0, f64::max);
    outcome(
        worst < 1e-4 && trip < 1e-8 && back.events.len() == fwd.events.len(),
        format!(
            "{} crossing(s) at t-t0 = {:.4} yr; slope jump vs recorded {worst:.2e}; round trip {trip:.2e} ({} crossing(s) backward)",
            fwd.events.len(),
            (fwd.events[0].t_c - T0) / DAYS_PER_YEAR,
            back.events.len()
        ),
    )
}

fn c1_regularity() -> Outcome {
    let (planets, ast, settings) = crossing_setup();
    let y0 = SecularState::from_elements(&ast).unwrap();
    let tf = T0 + 6.0 * DAYS_PER_YEAR;
    let traj = match propagate_secular(&y0, T0, tf, ast.a, &planets, &settings) {
        Ok(t) => t,
        Err(e) => return outcome(false, format!("run failed: {e}")),
    };
    if traj.events.is_empty() {
        return outcome(false, "no crossing detected".into());
    }
    let dt = 0.5;
    let mut worst_d = 0.0f64;
    let mut min_ratio = f64::INFINITY;
    let mut worst_bracket = 0.0f64;
    for ev in &traj.events {
        let planet = planets[ev.planet].orbit_at(ev.t_c).unwrap();
        let pair_c = OrbitPair::new(ev.y_c.orbit(traj.a).unwrap(), planet);
        let v_c = critical_points(&pair_c).unwrap().minimum(ev.h).unwrap().v;
        let dbar = |t: f64| -> [f64; 4] {
            let pair = OrbitPair::new(
                traj.state_at(t).unwrap().orbit(traj.a).unwrap(),
                planets[ev.planet].orbit_at(t).unwrap(),
            );
            let set = critical_points(&pair).unwrap();
            let m = nearest_minimum(&set, v_c).unwrap();
            [signed_distance(&pair, m).unwrap().value, 0.0, 0.0, 0.0]
        };
        let sb = one_sided(dbar, ev.t_c, -dt)[0];
        let sa = one_sided(dbar, ev.t_c, dt)[0];
        let rel_d = (sa - sb).abs() / sa.abs().max(sb.abs());
        let state = |t: f64| traj.state_at(t).unwrap().to_array();
        let yb = one_sided(state, ev.t_c, -dt);
        let ya = one_sided(state, ev.t_c, dt);
        let rel_y = (0..4).map(|k| (ya[k] - yb[k]).abs() / ya[k].abs().max(yb[k].abs())).fold(0.0, f64::max);
        worst_d = worst_d.max(rel_d);
        min_ratio = min_ratio.min(rel_y / rel_d.max(1e-3));
        let g = ev.distance_gradient;
        let j2g = [g[2], g[3], -g[0], -g[1]];
        let dot: f64 = (0..4).map(|k| ev.diff[k] * j2g[k]).sum();
        let norm = |x: &[f64; 4]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst_bracket = worst_bracket.max(dot.abs() / (norm(&ev.diff) * norm(&j2g)));
    }
    outcome(
        worst_d < 1e-3 && min_ratio >= 10.0 && worst_bracket < 1e-10,
        format!(
            "{} crossing(s): slope mismatch of d {worst_d:.2e}; Y jump / max(1e-3, d mismatch) >= {min_ratio:.1}; bracket {worst_bracket:.2e}",
            traj.events.len()
        ),
    )
}

fn first_integrals() -> Outcome {
    let planet_el = KeplerianElements::new(5.2, 0.0, 0.0, 0.0, 0.0, 0.0).unwrap();
    let planets = vec![Planet::two_body("planet", 9.5e-4, planet_el, T0)];
    let ast = KeplerianElements::new(2.5, 0.3, 0.3, 0.4, 1.0, 0.0).unwrap();
    let y0 = SecularState::from_elements(&ast).unwrap();
    let settings = SecularSettings { step_days: 20.0 * DAYS_PER_YEAR, ..Default::default() };
    let tf = T0 + 1e4 * DAYS_PER_YEAR;
    let traj = match propagate_secular(&y0, T0, tf, ast.a, &planets, &settings) {
        Ok(t) => t,
        Err(e) => return outcome(false, format!("run failed: {e}")),
    };
    let s = FieldSettings::default();
    let porbit = planet_el.orbit();
    let r0 = averaged_potential(&y0, ast.a, &porbit, 9.5e-4, &s).unwrap();
    let nodes = traj.nodes();
    let dz = nodes.iter().map(|(_, y)| ((y.big_z - y0.big_z) / y0.big_z).abs()).fold(0.0, f64::max);
    let dr = nodes
        .par_iter()
        .map(|(_, y)| ((averaged_potential(y, traj.a, &porbit, 9.5e-4, &s).unwrap() - r0) / r0).abs())
        .reduce(|| 0.0, f64::max);
    let a_const = traj.a.to_bits() == ast.a.to_bits()
        && nodes.iter().all(|(_, y)| y.orbit(traj.a).unwrap().a.to_bits() == ast.a.to_bits());
    let moved = (nodes.last().unwrap().1.g - y0.g).abs();
    outcome(
        dz < 1e-10 && dr < 1e-8 && a_const && traj.events.is_empty(),
        format!(
            "{} nodes over 1e4 yr (g moved {moved:.3} rad): Z drift {dz:.2e}, R drift {dr:.2e}, a constant: {a_const}",
            nodes.len()
        ),
    )
}

fn deg(x: f64) -> f64 {
    x.to_radians()
}

fn inner_planets() -> Vec<Planet> {
    // (name, a, e, i, node, argp, mean anomaly), J2000 osculating.
    let rows = [
        ("venus", 0.72333, 0.00677, deg(3.3947), deg(76.680), deg(54.884), deg(50.416)),
        ("earth", 1.00000, 0.01671, deg(0.00005), deg(-11.261), deg(114.208), deg(-2.481)),
        ("mars", 1.52368, 0.09340, deg(1.8497), deg(49.558), deg(286.502), deg(19.373)),
        ("jupiter", 5.20260, 0.04849, deg(1.3033), deg(100.464), deg(273.867), deg(20.020)),
        ("saturn", 9.55491, 0.05551, deg(2.4889), deg(113.666), deg(339.392), deg(317.021)),
    ];
    rows.iter()
        .map(|(n, a, e, i, o, w, m)| {
            let el = KeplerianElements::new(*a, *e, *i, wrap_tau(*o), wrap_tau(*w), wrap_tau(*m)).unwrap();
            Planet::two_body(n, default_mass(n).unwrap(), el, T0)
        })
        .collect()
}

fn secular_vs_full() -> Outcome {
    let planets = inner_planets();
    let ast = KeplerianElements::new(1.7, 0.3, 0.35, deg(40.0), deg(120.0), 0.0).unwrap();
    let tf = T0 + 200.0 * DAYS_PER_YEAR;
    let phases: Vec<f64> = (0..4).map(|k| k as f64 * FRAC_PI_2).collect();
    let full = FullSettings { output_step_days: 10.0 * DAYS_PER_YEAR, ..Default::default() };
    let stats = match phase_ensemble(&ast, T0, &phases, &phases, tf, &planets, &full) {
        Ok(s) => s,
        Err(e) => return outcome(false, format!("ensemble failed: {e}")),
    };
    let y0 = SecularState::from_elements(&ast).unwrap();
    let traj = match propagate_secular(&y0, T0, tf, ast.a, &planets, &SecularSettings::default()) {
        Ok(t) => t,
        Err(e) => return outcome(false, format!("secular run failed: {e}")),
    };
    let mut worst = 0.0f64;
    let mut bad = 0;
    let mut checked = 0;
    for (n, &t) in stats.epochs.iter().enumerate() {
        if t == T0 {
            continue;
        }
        let eq = traj.state_at(t).unwrap().keplerian(traj.a, 0.0).unwrap().to_equinoctial().unwrap();
        let sec = [eq.h, eq.k, eq.p, eq.q];
        for k in 0..4 {
            checked += 1;
            let z = (stats.mean[n][k] - sec[k]).abs() / stats.std[n][k];
            worst = worst.max(z);
            if !(z <= 3.0) {
                bad += 1;
            }
        }
    }
    outcome(
        stats.complete && bad == 0,
        format!(
            "{}/{} runs complete, {} crossing(s) in the secular run; {bad}/{checked} (epoch, element) pairs beyond 3 std, worst {worst:.2} std",
            stats.completed,
            stats.runs.len(),
            traj.events.len()
        ),
    )
}

// ---------------------------------------------------------------------------

fn ring_planet(r0: f64, rate_au_per_yr: f64, span: (f64, f64)) -> Planet {
    let row = |t: f64| ElementRecord {
        t_mjd: t,
        a: r0 + rate_au_per_yr * (t - T0) / DAYS_PER_YEAR,
        e: 0.0,
        i: 0.0,
        node: 0.0,
        argp: 0.0,
        mean_anom: 0.0,
    };
    Planet::table("ring", 0.0, ElementTable::new(vec![row(span.0), row(span.1)]).unwrap())
}

fn crossing_forecast() -> Outcome {
    let horizon = 100.0 * DAYS_PER_YEAR;
    let (r0, rate, e, hw) = (1.0, -1e-3, 0.2, 1e-3);
    let planets = vec![ring_planet(r0, rate, (T0 - 2.0 * DAYS_PER_YEAR, T0 + horizon + 2.0 * DAYS_PER_YEAR))];
    let perihelia: Vec<f64> = (0..11).map(|k| 0.94 + 0.002 * k as f64).chain([0.85]).collect();
    let raw: Vec<f64> = (0..perihelia.len()).map(|k| 1.0 + k as f64 % 3.0).collect();
    let total: f64 = raw.iter().sum();
    let vas: Vec<VirtualAsteroid> = perihelia
        .iter()
        .zip(&raw)
        .enumerate()
        .map(|(k, (q, w))| VirtualAsteroid {
            s: k as f64,
            elements: KeplerianElements::new(q / (1.0 - e), e, FRAC_PI_2, 0.0, 0.0, 0.0).unwrap(),
            weight: w / total,
        })
        .collect();
    let expected: Vec<Option<f64>> = perihelia
        .iter()
        .map(|q| {
            let t = T0 + (r0 - q - hw) / rate.abs() * DAYS_PER_YEAR;
            (t <= T0 + horizon).then_some(t)
        })
        .collect();
    let hand_j = expected.iter().flatten().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), t| (a.min(*t), b.max(*t)));
    let settings = ForecastSettings { band_halfwidth_au: hw, horizon_days: horizon, ..Default::default() };
    let mut worst_t = 0.0f64;
    let mut consistent = true;
    let mut forecasts = Vec::new();
    for method in [Method::Linearized, Method::Secular] {
        let fc = match crossing_interval(&vas, T0, &planets, method, &settings) {
            Ok(f) => f,
            Err(e) => return outcome(false, format!("{method:?} forecast failed: {e}")),
        };
        for (row, exp) in fc.vas.iter().zip(&expected) {
            match (row.t_cross, exp) {
                (Some(t), Some(x)) => worst_t = worst_t.max((t - x).abs()),
                (None, None) => {}
                _ => consistent = false,
            }
        }
        worst_t = worst_t.max((fc.interval.0 - hand_j.0).abs()).max((fc.interval.1 - hand_j.1).abs());
        forecasts.push(fc);
    }
    let exact = consistent && worst_t < 1e-6;

    // Additivity and monotonicity of P on random splits.
    let fc = &forecasts[0];
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut prob_ok = true;
    for _ in 0..200 {
        let mut cuts = [0.0; 3];
        for c in cuts.iter_mut() {
            *c = T0 + rng.gen_range(0.0..horizon);
        }
        cuts.sort_by(f64::total_cmp);
        let [x, y, z] = cuts;
        let whole = crossing_probability(fc, x, z);
        let parts = crossing_probability(fc, x, y) + crossing_probability(fc, y, z);
        let inner = crossing_probability(fc, y, z);
        prob_ok &= (whole - parts).abs() < 1e-12 && inner <= whole + 1e-15 && whole <= 1.0;
    }
    let crossing_weight: f64 = vas.iter().zip(&expected).filter(|(_, x)| x.is_some()).map(|(v, _)| v.weight).sum();
    let all = crossing_probability(fc, f64::NEG_INFINITY, f64::INFINITY);
    prob_ok &= (all - crossing_weight).abs() < 1e-12;

    // Slow physical family: linearized and secular intervals.
    let (cplanets, _, _) = crossing_setup();
    let slow_horizon = 20.0 * DAYS_PER_YEAR;
    let ws: Vec<f64> = (0..5).map(|k| 0.80 + 0.02 * k as f64).collect();
    let slow: Vec<VirtualAsteroid> = ws
        .iter()
        .enumerate()
        .map(|(k, w)| VirtualAsteroid {
            s: k as f64,
            elements: KeplerianElements::new(1.3, 0.3, 0.2, 0.0, *w, 0.0).unwrap(),
            weight: 0.2,
        })
        .collect();
    let slow_settings = ForecastSettings { horizon_days: slow_horizon, ..Default::default() };
    let lin = crossing_interval(&slow, T0, &cplanets, Method::Linearized, &slow_settings);
    let sec = crossing_interval(&slow, T0, &cplanets, Method::Secular, &slow_settings);
    let (slow_ok, slow_note) = match (lin, sec) {
        (Ok(l), Ok(s)) => {
            let shift = (l.interval.0 - s.interval.0).abs().max((l.interval.1 - s.interval.1).abs());
            let n_l = l.vas.iter().filter(|v| v.t_cross.is_some()).count();
            let n_s = s.vas.iter().filter(|v| v.t_cross.is_some()).count();
            (
                shift < 0.05 * slow_horizon && n_l >= 2 && n_s >= 2,
                format!(
                    "slow family J = [{:.2}, {:.2}] yr vs [{:.2}, {:.2}] yr, endpoint shift {:.3} yr ({:.2}% of horizon)",
                    (l.interval.0 - T0) / DAYS_PER_YEAR,
                    (l.interval.1 - T0) / DAYS_PER_YEAR,
                    (s.interval.0 - T0) / DAYS_PER_YEAR,
                    (s.interval.1 - T0) / DAYS_PER_YEAR,
                    shift / DAYS_PER_YEAR,
                    100.0 * shift / slow_horizon
                ),
            )
        }
        (l, s) => (false, format!("slow family failed: {:?} {:?}", l.err(), s.err())),
    };
    outcome(
        exact && prob_ok && slow_ok,
        format!("linear family worst band-entry error {worst_t:.2e} d (consistent: {consistent}); P additive/monotone: {prob_ok}; {slow_note}"),
    )
}
