//! Non-averaged restricted problem: the asteroid is massless and the planets
//! follow their ephemerides.

use std::cell::{Cell, RefCell};

use nalgebra::{SVector, Vector3, Vector6};
use ode_solvers::dop853::Dop853;
use ode_solvers::dop_shared::{IntegrationError, OutputType, System};
use rayon::prelude::*;
use serde::Serialize;

use crate::ephemeris::Planet;
use crate::error::{Error, Result};
use crate::gauss::{extrapolated_guess, gauss_step, GaussTableau, StageSettings};
use crate::kepler::{CartesianState, KeplerianElements, GM_SUN};

/// Heliocentric asteroid state at epoch `t` (MJD); au and au/day.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FullState {
    pub t: f64,
    pub pos: Vector3<f64>,
    pub vel: Vector3<f64>,
}

impl FullState {
    pub fn from_elements(el: &KeplerianElements, t: f64) -> Result<Self> {
        let c = el.to_cartesian(GM_SUN)?;
        Ok(Self { t, pos: c.pos, vel: c.vel })
    }

    /// Osculating heliocentric elements.
    pub fn elements(&self) -> Result<KeplerianElements> {
        KeplerianElements::from_cartesian(&CartesianState { pos: self.pos, vel: self.vel }, GM_SUN)
    }

    fn vector(&self) -> Vector6<f64> {
        Vector6::new(self.pos.x, self.pos.y, self.pos.z, self.vel.x, self.vel.y, self.vel.z)
    }

    fn from_vector(t: f64, y: &Vector6<f64>) -> Self {
        Self { t, pos: y.fixed_rows::<3>(0).into(), vel: y.fixed_rows::<3>(3).into() }
    }
}

/// Planet positions at epoch `t`.
pub fn planet_positions(planets: &[Planet], t: f64) -> Result<Vec<Vector3<f64>>> {
    planets.iter().map(|p| Ok(p.state_at(t)?.pos)).collect()
}

/// Acceleration of the asteroid at `pos` given the planet positions: the
/// Sun, the direct pull of each planet and the indirect term
/// `-μk² X'/|X'|³`. Returns the acceleration and the planetocentric
/// distances.
pub fn acceleration(pos: &Vector3<f64>, planets: &[Planet], xp: &[Vector3<f64>]) -> (Vector3<f64>, Vec<f64>) {
    let r = pos.norm();
    let mut acc = -pos * (GM_SUN / (r * r * r));
    let mut dist = Vec::with_capacity(planets.len());
    for (p, x) in planets.iter().zip(xp) {
        let rel = x - pos;
        let d = rel.norm();
        let rp = x.norm();
        dist.push(d);
        if p.mu != 0.0 {
            acc += (rel / (d * d * d) - x / (rp * rp * rp)) * (p.mu * GM_SUN);
        }
    }
    (acc, dist)
}

/// Right-hand side at epoch `t`; fails on collision.
pub fn full_rhs(state: &FullState, planets: &[Planet], collision_au: f64) -> Result<Vector3<f64>> {
    let xp = planet_positions(planets, state.t)?;
    let (acc, dist) = acceleration(&state.pos, planets, &xp);
    if let Some((k, d)) = dist.iter().enumerate().find(|(_, d)| **d < collision_au) {
        return Err(Error::CollisionSingularity { t: state.t, planet: planets[k].name.clone(), distance: *d });
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FullSettings {
    /// Relative and absolute local tolerance.
    pub tol: f64,
    /// Dense output interval (days).
    pub output_step_days: f64,
    pub collision_au: f64,
    /// Runs closer than this to a planet are flagged.
    pub close_approach_au: f64,
    pub max_steps: u32,
}

impl Default for FullSettings {
    fn default() -> Self {
        Self { tol: 1e-11, output_step_days: 365.25, collision_au: 1e-8, close_approach_au: 0.01, max_steps: 5_000_000 }
    }
}

/// Closest approach to one planet along a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Encounter {
    pub planet: String,
    pub distance: f64,
    pub t: f64,
}

#[derive(Debug, Clone)]
pub struct FullTrajectory {
    /// States at the epochs of [`output_epochs`].
    pub states: Vec<FullState>,
    pub encounters: Vec<Encounter>,
    pub close_approach: bool,
    pub accepted_steps: u32,
    pub rejected_steps: u32,
}

struct Rhs<'a> {
    planets: &'a [Planet],
    collision_au: f64,
    closest: Vec<Cell<(f64, f64)>>,
    failure: RefCell<Option<Error>>,
}

impl Rhs<'_> {
    fn eval(&self, t: f64, y: &Vector6<f64>) -> Result<Vector6<f64>> {
        let pos = Vector3::new(y[0], y[1], y[2]);
        let xp = planet_positions(self.planets, t)?;
        let (acc, dist) = acceleration(&pos, self.planets, &xp);
        for (k, d) in dist.iter().enumerate() {
            if *d < self.closest[k].get().0 {
                self.closest[k].set((*d, t));
            }
            if *d < self.collision_au {
                return Err(Error::CollisionSingularity { t, planet: self.planets[k].name.clone(), distance: *d });
            }
        }
        Ok(Vector6::new(y[3], y[4], y[5], acc.x, acc.y, acc.z))
    }
}

/// The adaptive integrator sees an autonomous system: the seventh component
/// is the time elapsed since `origin`.
type Augmented = SVector<f64, 7>;

struct Autonomous<'r, 'a> {
    rhs: &'r Rhs<'a>,
    origin: f64,
}

impl System<f64, Augmented> for Autonomous<'_, '_> {
    fn system(&self, _x: f64, y: &Augmented, dy: &mut Augmented) {
        let t = self.origin + y[6];
        match self.rhs.eval(t, &y.fixed_rows::<6>(0).into()) {
            Ok(v) => {
                dy.fixed_rows_mut::<6>(0).copy_from(&v);
                dy[6] = 1.0;
            }
            Err(e) => {
                self.rhs.failure.borrow_mut().get_or_insert(e);
                *dy = Augmented::zeros();
            }
        }
    }

    fn solout(&mut self, _x: f64, _y: &Augmented, _dy: &Augmented) -> bool {
        self.rhs.failure.borrow().is_some()
    }
}

/// Propagate from `state0` to `tf` (forward in time) with an adaptive
/// Dormand–Prince 8(5,3) integrator.
pub fn propagate_full(state0: &FullState, tf: f64, planets: &[Planet], s: &FullSettings) -> Result<FullTrajectory> {
    if !(tf > state0.t) {
        return Err(Error::InvalidElements(format!("final epoch {tf} must follow {}", state0.t)));
    }
    let rhs = Rhs {
        planets,
        collision_au: s.collision_au,
        closest: planets.iter().map(|_| Cell::new((f64::INFINITY, state0.t))).collect(),
        failure: RefCell::new(None),
    };
    // Each output interval is its own sparse run, started with the last
    // step size, so output states are integrator nodes rather than
    // interpolants.
    let epochs = output_epochs(state0.t, tf, s.output_step_days);
    let mut states = vec![*state0];
    let mut y = state0.vector();
    let mut h: f64 = 0.0;
    let (mut accepted, mut rejected) = (0u32, 0u32);
    for w in epochs.windows(2) {
        let (a, b) = (w[0], w[1]);
        let mut z = Augmented::zeros();
        z.fixed_rows_mut::<6>(0).copy_from(&y);
        let mut solver = Dop853::from_param(
            Autonomous { rhs: &rhs, origin: a },
            0.0,
            b - a,
            b - a,
            z,
            s.tol,
            s.tol,
            0.9,
            0.0,
            0.333,
            6.0,
            b - a,
            h.min(b - a),
            s.max_steps.saturating_sub(accepted + rejected).max(1),
            u32::MAX,
            OutputType::Sparse,
        );
        let stats = match solver.integrate() {
            Ok(stats) => stats,
            Err(IntegrationError::StepSizeUnderflow { x }) => return Err(Error::StepUnderflow { t: a + x }),
            Err(IntegrationError::MaxNumStepReached { x, .. }) => {
                return Err(Error::StepLimit { t: a + x, steps: s.max_steps })
            }
            Err(IntegrationError::StiffnessDetected { x }) => return Err(Error::StepUnderflow { t: a + x }),
        };
        if let Some(e) = rhs.failure.borrow_mut().take() {
            return Err(e);
        }
        accepted += stats.accepted_steps;
        rejected += stats.rejected_steps;
        let (ts, ys) = solver.results().get();
        let n = ts.len();
        y = ys[n - 1].fixed_rows::<6>(0).into();
        if n >= 3 {
            // The final step is usually clipped to the epoch; the one before
            // reflects the controller.
            h = ts[n - 2] - ts[n - 3];
        } else if n == 2 {
            h = ts[1] - ts[0];
        }
        states.push(FullState::from_vector(b, &y));
    }
    let encounters: Vec<Encounter> = planets
        .iter()
        .zip(&rhs.closest)
        .map(|(p, c)| Encounter { planet: p.name.clone(), distance: c.get().0, t: c.get().1 })
        .collect();
    let close_approach = encounters.iter().any(|e| e.distance < s.close_approach_au);
    Ok(FullTrajectory { states, encounters, close_approach, accepted_steps: accepted, rejected_steps: rejected })
}

/// Propagate with fixed-step Gauss collocation (`stages` = 1..3), returning
/// the state at `tf`. An implicit method of a different family from
/// [`propagate_full`].
pub fn propagate_full_collocation(
    state0: &FullState,
    tf: f64,
    planets: &[Planet],
    step_days: f64,
    stages: usize,
    collision_au: f64,
) -> Result<FullState> {
    let tab = GaussTableau::new(stages)?;
    let settings = StageSettings { tol: 1e-15, max_iter: 100 };
    let rhs = Rhs {
        planets,
        collision_au,
        closest: planets.iter().map(|_| Cell::new((f64::INFINITY, state0.t))).collect(),
        failure: RefCell::new(None),
    };
    let n = ((tf - state0.t) / step_days).abs().ceil().max(1.0) as usize;
    let h = (tf - state0.t) / n as f64;
    let mut y = state0.vector();
    let mut prev = None;
    for i in 0..n {
        let t0 = state0.t + i as f64 * h;
        let guess = prev.as_ref().map(|p| extrapolated_guess(p, h));
        let step = gauss_step(&tab, &settings, t0, &y, h, guess.as_deref(), |t, v| rhs.eval(t, v))?;
        y = step.y1;
        prev = Some(step);
    }
    Ok(FullState::from_vector(tf, &y))
}

/// Equinoctial `(h, k, p, q)` of a state.
pub fn hkpq(state: &FullState) -> Result<[f64; 4]> {
    let eq = state.elements()?.to_equinoctial()?;
    Ok([eq.h, eq.k, eq.p, eq.q])
}

/// One member of a phase ensemble.
#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub asteroid_phase: f64,
    pub planet_phase: f64,
    /// `(h, k, p, q)` at the ensemble epochs, empty if the run failed.
    pub hkpq: Vec<[f64; 4]>,
    pub close_approach: bool,
    pub failure: Option<String>,
}

/// Per-epoch mean and (population) standard deviation of `(h, k, p, q)`
/// over the completed runs.
#[derive(Debug, Clone)]
pub struct EnsembleStats {
    pub epochs: Vec<f64>,
    pub mean: Vec<[f64; 4]>,
    pub std: Vec<[f64; 4]>,
    pub completed: usize,
    /// Whether every run completed.
    pub complete: bool,
    pub runs: Vec<EnsembleRun>,
}

/// Output epochs `t0, t0 + dt, …`, ending exactly at `tf`.
pub fn output_epochs(t0: f64, tf: f64, dt: f64) -> Vec<f64> {
    let n = ((tf - t0) / dt * (1.0 + 1e-12)).floor() as usize;
    let mut out: Vec<f64> = (0..=n).map(|k| t0 + k as f64 * dt).collect();
    if tf - out[out.len() - 1] > 1e-9 * dt {
        out.push(tf);
    }
    out
}

/// Run the full model for every pair of asteroid and planet phases and
/// average the equinoctial elements. All planets share each planet phase
/// (their mean anomaly at `t0`).
pub fn phase_ensemble(
    elements0: &KeplerianElements,
    t0: f64,
    asteroid_phases: &[f64],
    planet_phases: &[f64],
    tf: f64,
    planets: &[Planet],
    s: &FullSettings,
) -> Result<EnsembleStats> {
    if asteroid_phases.is_empty() || planet_phases.is_empty() {
        return Err(Error::InvalidElements("empty phase grid".into()));
    }
    let epochs = output_epochs(t0, tf, s.output_step_days);
    let jobs: Vec<(f64, f64)> =
        asteroid_phases.iter().flat_map(|a| planet_phases.iter().map(move |p| (*a, *p))).collect();
    let runs: Vec<EnsembleRun> = jobs
        .par_iter()
        .map(|&(pa, pp)| {
            let run = || -> Result<(Vec<[f64; 4]>, bool)> {
                let mut el = *elements0;
                el.mean_anom = pa;
                let el = KeplerianElements::new(el.a, el.e, el.i, el.node, el.argp, el.mean_anom)?;
                let moved: Vec<Planet> = planets.iter().map(|p| p.with_phase(t0, pp)).collect::<Result<_>>()?;
                let traj = propagate_full(&FullState::from_elements(&el, t0)?, tf, &moved, s)?;
                let rows = sample_epochs(&traj.states, &epochs)?.iter().map(hkpq).collect::<Result<Vec<_>>>()?;
                Ok((rows, traj.close_approach))
            };
            match run() {
                Ok((rows, close)) => EnsembleRun {
                    asteroid_phase: pa,
                    planet_phase: pp,
                    hkpq: rows,
                    close_approach: close,
                    failure: None,
                },
                Err(e) => {
                    log::warn!("ensemble run ({pa}, {pp}) failed: {e}");
                    EnsembleRun {
                        asteroid_phase: pa,
                        planet_phase: pp,
                        hkpq: Vec::new(),
                        close_approach: false,
                        failure: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    let done: Vec<&EnsembleRun> = runs.iter().filter(|r| r.failure.is_none()).collect();
    let n = done.len() as f64;
    let mut mean = vec![[0.0; 4]; epochs.len()];
    let mut std = vec![[0.0; 4]; epochs.len()];
    if !done.is_empty() {
        for e in 0..epochs.len() {
            for c in 0..4 {
                let m = done.iter().map(|r| r.hkpq[e][c]).sum::<f64>() / n;
                let v = done.iter().map(|r| (r.hkpq[e][c] - m).powi(2)).sum::<f64>() / n;
                mean[e][c] = m;
                std[e][c] = v.sqrt();
            }
        }
    }
    Ok(EnsembleStats { epochs, mean, std, completed: done.len(), complete: done.len() == runs.len(), runs })
}

/// Pick the dense-output states at the requested epochs.
fn sample_epochs(states: &[FullState], epochs: &[f64]) -> Result<Vec<FullState>> {
    epochs
        .iter()
        .map(|t| {
            states
                .iter()
                .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
                .filter(|s| (s.t - t).abs() < 1e-6)
                .copied()
                .ok_or_else(|| Error::InvalidElements(format!("no output state at epoch {t}")))
        })
        .collect()
}
