//! Secular evolution of `(G, Z, g, z)` under the averaged perturbations,
//! continued through orbit crossings as a generalized solution.
//!
//! Every local minimum of the orbit distance is tracked by a label and
//! carries the side of the crossing surface whose analytic continuation of
//! the field is in use. A step runs with the sides frozen; when the signed
//! distance of a tracked minimum changes sign inside a step, the step is cut
//! back to the crossing epoch, the side is flipped and integration restarts
//! from the shared state.

use std::cell::Cell;

use nalgebra::{SVector, Vector2};
use serde::Serialize;

use crate::averaged::{extended_pair_of, field_scale, Averaging, FieldSettings, KeplerianField, LocalModel, Side};
use crate::distance::{critical_points_with, match_points, signed_distance, CriticalSet, OrbitPair};
use crate::ephemeris::Planet;
use crate::error::{Error, Result};
use crate::gauss::{extrapolated_guess, gauss_step, GaussStep, GaussTableau, StageSettings};
use crate::kepler::{to_secular_partials, KeplerianElements, Orbit, SecularState, DAYS_PER_YEAR};

pub type Vec4 = SVector<f64, 4>;

/// `Ẏ` from `∇_Y R̄`: `Ġ = ∂R̄/∂g`, `Ż = ∂R̄/∂z`, `ġ = -∂R̄/∂G`,
/// `ż = -∂R̄/∂Z`.
pub fn hamiltonian_flow(grad: &[f64; 4]) -> [f64; 4] {
    [grad[2], grad[3], -grad[0], -grad[1]]
}

fn dot4(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm4(a: &[f64; 4]) -> f64 {
    dot4(a, a).sqrt()
}

#[derive(Debug, Clone, Copy)]
pub struct SecularSettings {
    /// Nominal step (days).
    pub step_days: f64,
    /// Gauss stages, 2 or 3.
    pub stages: usize,
    pub stage: StageSettings,
    /// Required `|d̃|` (au) at a located crossing.
    pub crossing_tol_au: f64,
    /// Iteration cap of the crossing refinement.
    pub max_refine: usize,
    /// Below this `|dd̃/dt|` (au/yr) a crossing counts as tangent.
    pub tangent_rate_au_per_yr: f64,
    /// Dense-output samples per step used to look for sign changes.
    pub samples: usize,
    pub min_step_days: f64,
    /// Local error bound checked by step doubling, if set.
    pub error_tol: Option<f64>,
    /// Planets with a minimum within this distance (au) are sampled inside
    /// each step.
    pub watch_au: f64,
    /// Torus radius for matching minima between epochs.
    pub match_radius: f64,
    /// Relative mismatch between extraction and plain quadrature inside the
    /// check band that triggers a warning.
    pub cross_check_rel: f64,
    pub field: FieldSettings,
}

impl Default for SecularSettings {
    fn default() -> Self {
        Self {
            step_days: DAYS_PER_YEAR,
            stages: 2,
            stage: StageSettings::default(),
            crossing_tol_au: 1e-10,
            max_refine: 80,
            tangent_rate_au_per_yr: 1e-8,
            samples: 8,
            min_step_days: 1e-3,
            error_tol: None,
            watch_au: 0.05,
            match_radius: 0.5,
            cross_check_rel: 1e-6,
            field: FieldSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Tracked {
    label: usize,
    v: Vector2<f64>,
    side: Side,
    d_signed: f64,
}

#[derive(Debug, Clone, Default)]
struct Tracker {
    minima: Vec<Tracked>,
    next_label: usize,
    leader: Option<usize>,
}

impl Tracker {
    /// Index into `self.minima` for every minimum `h` of `set`.
    fn assign(&self, set: &CriticalSet, radius: f64) -> Vec<Option<usize>> {
        let prev: Vec<Vector2<f64>> = self.minima.iter().map(|m| m.v).collect();
        let cur: Vec<Vector2<f64>> = set.minima().map(|p| p.v).collect();
        let mut out = vec![None; cur.len()];
        for (i, m) in match_points(&prev, &cur, radius).into_iter().enumerate() {
            if let Some(h) = m {
                out[h] = Some(i);
            }
        }
        out
    }

    fn index_of(&self, label: usize) -> Option<usize> {
        self.minima.iter().position(|m| m.label == label)
    }
}

/// One local minimum as seen at a given epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MinimumSample {
    /// Tracking label, `None` for a minimum not seen before.
    pub label: Option<usize>,
    /// Index in the distance-ordered list of minima.
    pub h: usize,
    pub distance: f64,
    pub d_signed: f64,
    pub tangent: bool,
    #[serde(skip)]
    pub v: Vector2<f64>,
}

/// Minima of one asteroid–planet pair at one epoch.
#[derive(Debug, Clone)]
pub struct PlanetCensus {
    pub planet: usize,
    pub pair: OrbitPair,
    pub set: CriticalSet,
    pub minima: Vec<MinimumSample>,
}

impl PlanetCensus {
    /// The minimum with the smallest distance.
    pub fn closest(&self) -> Option<&MinimumSample> {
        self.minima.first()
    }
}

/// A crossing of the surface `d̃_h = 0` along the secular evolution.
#[derive(Debug, Clone, Serialize)]
pub struct CrossingEvent {
    pub t_c: f64,
    pub planet: usize,
    pub planet_name: String,
    /// Index of the minimum among the minima at `t_c`.
    pub h: usize,
    pub label: usize,
    pub y_c: SecularState,
    pub asteroid: KeplerianElements,
    pub planet_elements: KeplerianElements,
    pub d_signed: f64,
    pub side_before: Side,
    pub side_after: Side,
    /// `Ẏ` after minus `Ẏ` before.
    pub applied_jump: [f64; 4],
    /// `∂R̄/∂Y` on the minus side minus the plus side.
    pub diff: [f64; 4],
    pub flow_before: [f64; 4],
    pub flow_after: [f64; 4],
    /// `∇_Y d̃_h`.
    pub distance_gradient: [f64; 4],
    pub rate_au_per_yr: f64,
    /// `|Ẏ-jump of Diff · ∇d̃| / (|·||·|)`, zero in exact arithmetic.
    pub bracket_residual: f64,
    pub refine_iterations: usize,
}

/// The absolute minimum switched from one tracked minimum to another.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BranchExchange {
    pub t: f64,
    pub planet: usize,
    pub from_label: usize,
    pub to_label: usize,
}

/// Smooth piece of a generalized solution.
#[derive(Debug, Clone, Default)]
pub struct Segment {
    pub steps: Vec<GaussStep<4>>,
}

impl Segment {
    pub fn span(&self) -> Option<(f64, f64)> {
        Some((self.steps.first()?.t0, self.steps.last()?.t1()))
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct Diagnostics {
    pub field_evaluations: usize,
    pub rejected_steps: usize,
    pub cross_checks: usize,
    pub max_cross_check_rel: f64,
    pub max_local_error: f64,
    /// Field evaluations with more than one minimum extracted at once.
    pub multi_extractions: usize,
}

/// Piecewise smooth secular solution with its crossing events.
#[derive(Debug, Clone)]
pub struct GeneralizedTrajectory {
    /// Semimajor axis, never updated.
    pub a: f64,
    pub t0: f64,
    pub y0: SecularState,
    pub segments: Vec<Segment>,
    pub events: Vec<CrossingEvent>,
    pub exchanges: Vec<BranchExchange>,
    pub settings: SecularSettings,
    pub diagnostics: Diagnostics,
}

impl GeneralizedTrajectory {
    pub fn steps(&self) -> impl Iterator<Item = &GaussStep<4>> {
        self.segments.iter().flat_map(|s| s.steps.iter())
    }

    pub fn t_end(&self) -> f64 {
        self.steps().last().map(|s| s.t1()).unwrap_or(self.t0)
    }

    pub fn final_state(&self) -> SecularState {
        self.steps().last().map(|s| SecularState::from_array(s.y1.into())).unwrap_or(self.y0)
    }

    fn step_at(&self, t: f64, after: bool) -> Option<&GaussStep<4>> {
        let mut found = None;
        for s in self.steps() {
            if s.contains(t) {
                let at_end = t == s.t1();
                let at_start = t == s.t0;
                // Prefer the step on the requested side of a shared endpoint.
                let forward = s.h > 0.0;
                let wants_later = after == forward;
                if (at_end && wants_later) || (at_start && !wants_later) {
                    found = found.or(Some(s));
                    continue;
                }
                return Some(s);
            }
        }
        found
    }

    /// State at epoch `t` from the dense output.
    pub fn state_at(&self, t: f64) -> Option<SecularState> {
        if t == self.t0 {
            return Some(self.y0);
        }
        let s = self.step_at(t, false)?;
        Some(SecularState::from_array(s.at(t).into()))
    }

    /// Dense-output derivative at `t`; at a step boundary, `after` selects
    /// the later step in time.
    pub fn derivative_at(&self, t: f64, after: bool) -> Option<[f64; 4]> {
        let s = self.step_at(t, after)?;
        Some(s.dense_derivative((t - s.t0) / s.h).into())
    }

    /// Output rows: the initial state and every step end.
    pub fn nodes(&self) -> Vec<(f64, SecularState)> {
        let mut out = vec![(self.t0, self.y0)];
        out.extend(self.steps().map(|s| (s.t1(), SecularState::from_array(s.y1.into()))));
        out
    }
}

/// Averaged field of all planets with the side bookkeeping of a running
/// propagation.
pub struct SecularSystem<'a> {
    pub a: f64,
    planets: &'a [Planet],
    settings: SecularSettings,
    tableau: GaussTableau,
    tracks: Vec<Tracker>,
    evaluations: Cell<usize>,
    cross_checks: Cell<usize>,
    multi: Cell<usize>,
    max_cross: Cell<f64>,
    /// When false, tracked sides follow the sign of `d̃` instead of being
    /// frozen (used when only sampling a finished trajectory).
    frozen_sides: bool,
}

/// Total averaged field at one state.
#[derive(Debug, Clone, Copy)]
pub struct FieldValue {
    pub value: f64,
    /// `∂R̄/∂(G, Z, g, z)`.
    pub grad: [f64; 4],
}

enum Detection {
    None,
    Ambiguous,
    Crossing { planet: usize, index: usize, theta: f64 },
}

impl<'a> SecularSystem<'a> {
    pub fn new(a: f64, planets: &'a [Planet], settings: SecularSettings) -> Result<Self> {
        Ok(Self {
            a,
            planets,
            settings,
            tableau: GaussTableau::new(settings.stages)?,
            tracks: vec![Tracker::default(); planets.len()],
            evaluations: Cell::new(0),
            cross_checks: Cell::new(0),
            multi: Cell::new(0),
            max_cross: Cell::new(0.0),
            frozen_sides: true,
        })
    }

    pub fn settings(&self) -> &SecularSettings {
        &self.settings
    }

    fn orbit(&self, y: &Vec4) -> Result<Orbit> {
        SecularState::from_array((*y).into()).orbit(self.a)
    }

    /// Minima of planet `p` at `(t, y)`, labelled against the tracks.
    pub fn census_planet(&self, p: usize, t: f64, asteroid: &Orbit) -> Result<PlanetCensus> {
        let pair = OrbitPair::new(*asteroid, self.planets[p].orbit_at(t)?);
        let set = critical_points_with(&pair, &self.settings.field.scan)?;
        let assign = self.tracks[p].assign(&set, self.settings.match_radius);
        let mut minima = Vec::with_capacity(set.num_minima());
        for (h, cp) in set.minima().enumerate() {
            let sd = signed_distance(&pair, cp)?;
            minima.push(MinimumSample {
                label: assign[h].map(|i| self.tracks[p].minima[i].label),
                h,
                distance: cp.distance(),
                d_signed: sd.value,
                tangent: sd.degenerate,
                v: cp.v,
            });
        }
        Ok(PlanetCensus { planet: p, pair, set, minima })
    }

    pub fn census(&self, t: f64, y: &Vec4) -> Result<Vec<PlanetCensus>> {
        let orbit = self.orbit(y)?;
        (0..self.planets.len()).map(|p| self.census_planet(p, t, &orbit)).collect()
    }

    /// Start tracking at `(t, y)` with every minimum on its physical side.
    pub fn initialize(&mut self, t: f64, y: &Vec4) -> Result<Vec<PlanetCensus>> {
        for tr in &mut self.tracks {
            *tr = Tracker::default();
        }
        let census = self.census(t, y)?;
        for c in &census {
            if let Some(m) = c.minima.iter().find(|m| m.d_signed.abs() <= self.settings.crossing_tol_au) {
                return Err(Error::TooCloseToCrossing { d_min: m.distance });
            }
        }
        self.commit(&census, t, None);
        self.census(t, y)
    }

    /// Labels and sides currently tracked for planet `p`.
    pub fn sides(&self, p: usize) -> Vec<(usize, Side)> {
        self.tracks[p].minima.iter().map(|m| (m.label, m.side)).collect()
    }

    pub fn set_side(&mut self, p: usize, label: usize, side: Side) {
        if let Some(i) = self.tracks[p].index_of(label) {
            self.tracks[p].minima[i].side = side;
        }
    }

    fn commit(&mut self, census: &[PlanetCensus], t: f64, exchanges: Option<&mut Vec<BranchExchange>>) {
        let mut log = Vec::new();
        for c in census {
            let tr = &mut self.tracks[c.planet];
            let mut kept = Vec::with_capacity(c.minima.len());
            for m in &c.minima {
                match m.label.and_then(|l| tr.index_of(l)) {
                    Some(i) => {
                        let mut k = tr.minima[i];
                        if !self.frozen_sides {
                            k.side = Side::of(m.d_signed);
                        } else if Side::of(m.d_signed) != k.side && m.d_signed.abs() > self.settings.crossing_tol_au {
                            log::warn!("minimum {} of planet {} is off its tracked side at t = {t}", k.label, c.planet);
                        }
                        k.v = m.v;
                        k.d_signed = m.d_signed;
                        kept.push(k);
                    }
                    None => {
                        let label = tr.next_label;
                        tr.next_label += 1;
                        kept.push(Tracked { label, v: m.v, side: Side::of(m.d_signed), d_signed: m.d_signed });
                    }
                }
            }
            let leader = kept.first().map(|k| k.label);
            if let (Some(old), Some(new)) = (tr.leader, leader) {
                if old != new {
                    log::info!("planet {}: absolute minimum moved from branch {old} to {new} at t = {t}", c.planet);
                    log.push(BranchExchange { t, planet: c.planet, from_label: old, to_label: new });
                }
            }
            tr.leader = leader;
            tr.minima = kept;
        }
        if let Some(ex) = exchanges {
            ex.extend(log);
        }
    }

    fn planet_field(&self, p: usize, t: f64, asteroid: &Orbit) -> Result<KeplerianField> {
        let planet = &self.planets[p];
        if planet.mu == 0.0 {
            return Ok(KeplerianField::zero());
        }
        let fs = &self.settings.field;
        let av = Averaging::new(OrbitPair::new(*asteroid, planet.orbit_at(t)?), fs)?;
        let hs = av.triggered();
        let vals = if hs.is_empty() {
            av.plain()?.value
        } else {
            if hs.len() > 1 {
                self.multi.set(self.multi.get() + 1);
                log::debug!("{} minima of planet {p} extracted together at t = {t}", hs.len());
            }
            let assign = self.tracks[p].assign(&av.set, self.settings.match_radius);
            let loc = av.localized(&hs, None)?;
            let sides: Vec<Side> = hs
                .iter()
                .zip(&loc.extractions)
                .map(|(&h, ex)| match assign[h] {
                    Some(i) => self.tracks[p].minima[i].side,
                    None => Side::of(ex.model.d_signed),
                })
                .collect();
            let vals = loc.with_sides(&sides);
            let d_min = av.d_min();
            if d_min >= fs.check_band.0 && d_min <= fs.check_band.1 {
                let plain = av.plain()?.value;
                let rel = (plain - loc.physical()).amax() / plain.amax().max(f64::MIN_POSITIVE);
                self.cross_checks.set(self.cross_checks.get() + 1);
                self.max_cross.set(self.max_cross.get().max(rel));
                if rel > self.settings.cross_check_rel {
                    log::warn!("extraction and plain quadrature differ by {rel:.2e} at d_min = {d_min:.4e}");
                }
            }
            vals
        };
        Ok(KeplerianField::from_vals(&vals, field_scale(planet.mu)))
    }

    /// `R̄` and `∂R̄/∂Y` with planets taken at epoch `t` and the tracked
    /// sides.
    pub fn field(&self, t: f64, y: &Vec4) -> Result<FieldValue> {
        self.evaluations.set(self.evaluations.get() + 1);
        let orbit = self.orbit(y)?;
        let mut total = KeplerianField::zero();
        for p in 0..self.planets.len() {
            total = total.add(&self.planet_field(p, t, &orbit)?);
        }
        Ok(FieldValue { value: total.value, grad: total.secular(&orbit) })
    }

    /// `Ẏ` at `(t, y)` with planets at `t`.
    pub fn flow(&self, t: f64, y: &Vec4) -> Result<Vec4> {
        Ok(Vec4::from(hamiltonian_flow(&self.field(t, y)?.grad)))
    }

    /// One collocation step with planets frozen at the step midpoint.
    pub fn step(&self, t0: f64, y0: &Vec4, h: f64, guess: Option<&[Vec4]>) -> Result<GaussStep<4>> {
        let tm = t0 + 0.5 * h;
        gauss_step(&self.tableau, &self.settings.stage, t0, y0, h, guess, |_, y| self.flow(tm, y))
    }

    fn tracked_distance(&self, p: usize, label: usize, t: f64, y: &Vec4) -> Result<f64> {
        let c = self.census_planet(p, t, &self.orbit(y)?)?;
        c.minima.iter().find(|m| m.label == Some(label)).map(|m| m.d_signed).ok_or(Error::LostMinimum { t })
    }

    fn detect(&self, step: &GaussStep<4>) -> Result<Detection> {
        let tol = self.settings.crossing_tol_au;
        let n = self.settings.samples.max(1);
        let mut best: Option<(usize, usize, f64)> = None;
        for p in 0..self.planets.len() {
            let watched: Vec<Tracked> =
                self.tracks[p].minima.iter().filter(|m| m.d_signed.abs() < self.settings.watch_au).copied().collect();
            if watched.is_empty() {
                continue;
            }
            let mut sign: Vec<f64> = watched.iter().map(|m| m.side.sigma()).collect();
            let mut changes = vec![0usize; watched.len()];
            let mut bracket = vec![(0.0, 1.0); watched.len()];
            let mut prev_theta = 0.0;
            for j in 1..=n {
                let theta = j as f64 / n as f64;
                let y = if j == n { step.y1 } else { step.dense(theta) };
                let c = self.census_planet(p, step.t0 + theta * step.h, &self.orbit(&y)?)?;
                for (w, m) in watched.iter().enumerate() {
                    let Some(s) = c.minima.iter().find(|x| x.label == Some(m.label)) else {
                        continue;
                    };
                    if s.d_signed.abs() > tol && s.d_signed.signum() != sign[w] {
                        sign[w] = -sign[w];
                        changes[w] += 1;
                        if changes[w] == 1 {
                            bracket[w] = (prev_theta, theta);
                        }
                    }
                }
                prev_theta = theta;
            }
            for (w, m) in watched.iter().enumerate() {
                if changes[w] >= 2 {
                    return Ok(Detection::Ambiguous);
                }
                if changes[w] == 1 {
                    let theta = self.dense_root(step, p, m, bracket[w])?;
                    if best.map(|b| theta < b.2).unwrap_or(true) {
                        best = Some((p, self.tracks[p].index_of(m.label).unwrap_or(0), theta));
                    }
                }
            }
        }
        Ok(match best {
            Some((planet, index, theta)) => Detection::Crossing { planet, index, theta },
            None => Detection::None,
        })
    }

    fn dense_root(&self, step: &GaussStep<4>, p: usize, m: &Tracked, bracket: (f64, f64)) -> Result<f64> {
        let f = |theta: f64| {
            let y = step.dense(theta);
            self.tracked_distance(p, m.label, step.t0 + theta * step.h, &y)
        };
        let lo =
            if bracket.0 == 0.0 { m.side.sigma() * m.d_signed.abs().max(f64::MIN_POSITIVE) } else { f(bracket.0)? };
        let hi = f(bracket.1)?;
        let (x, _, _) =
            illinois(f, (bracket.0, lo), (bracket.1, hi), None, 1e-3 * self.settings.crossing_tol_au, 1e-15, 100)?;
        Ok(x)
    }

    fn cut_step(&self, step: &GaussStep<4>, p: usize, index: usize, theta: f64) -> Result<(GaussStep<4>, usize)> {
        let m = self.tracks[p].minima[index];
        let target = 1e-3 * self.settings.crossing_tol_au;
        let mut last: Option<GaussStep<4>> = None;
        let mut f = |tau: f64| -> Result<f64> {
            let guess: Vec<Vec4> = self.tableau.c.iter().map(|c| step.dense_derivative(c * tau / step.h)).collect();
            let s = self.step(step.t0, &step.y0, tau, Some(&guess))?;
            let d = self.tracked_distance(p, m.label, s.t1(), &s.y1)?;
            last = Some(s);
            Ok(d)
        };
        let lo = m.side.sigma() * m.d_signed.abs().max(f64::MIN_POSITIVE);
        let hi = self.tracked_distance(p, m.label, step.t1(), &step.y1)?;
        let (tau, d, iters) = illinois(
            &mut f,
            (0.0, lo),
            (step.h, hi),
            Some(theta * step.h),
            target,
            1e-13 * step.h.abs(),
            self.settings.max_refine,
        )?;
        let cut = match last {
            Some(s) if s.h == tau => s,
            _ => self.step(step.t0, &step.y0, tau, None)?,
        };
        if d.abs() > self.settings.crossing_tol_au {
            return Err(Error::CrossingRefinement { t: cut.t1(), residual: d.abs() });
        }
        Ok((cut, iters))
    }

    fn crossing_event(&self, p: usize, index: usize, t_c: f64, y_c: &Vec4, iters: usize) -> Result<CrossingEvent> {
        let planet = &self.planets[p];
        let tracked = self.tracks[p].minima[index];
        let orbit = self.orbit(y_c)?;
        let census = self.census_planet(p, t_c, &orbit)?;
        let sample = census
            .minima
            .iter()
            .find(|m| m.label == Some(tracked.label))
            .copied()
            .ok_or(Error::LostMinimum { t: t_c })?;
        let h = sample.h;
        let av = Averaging::with_set(census.pair, census.set.clone(), &self.settings.field);
        let model = LocalModel::new(&census.pair, &census.set, h)?;
        let grad_d = to_secular_partials(orbit.a, orbit.e, orbit.i, &model.dd_signed);
        let diff = if planet.mu == 0.0 { [0.0; 4] } else { extended_pair_of(&av, planet.mu, h)?.diff_secular };
        let flow_before = hamiltonian_flow(&self.field(t_c, y_c)?.grad);
        let s = tracked.side.sigma();
        let flow_diff = hamiltonian_flow(&diff);
        let applied_jump = flow_diff.map(|x| s * x);
        let mut flow_after = flow_before;
        for (a, j) in flow_after.iter_mut().zip(&applied_jump) {
            *a += j;
        }
        let rate = dot4(&grad_d, &flow_before) * DAYS_PER_YEAR;
        let denom = norm4(&flow_diff) * norm4(&grad_d);
        let bracket_residual = if denom > 0.0 { dot4(&flow_diff, &grad_d).abs() / denom } else { 0.0 };
        Ok(CrossingEvent {
            t_c,
            planet: p,
            planet_name: planet.name.clone(),
            h,
            label: tracked.label,
            y_c: SecularState::from_array((*y_c).into()),
            asteroid: orbit.elements(0.0),
            planet_elements: planet.elements_at(t_c)?,
            d_signed: sample.d_signed,
            side_before: tracked.side,
            side_after: tracked.side.flipped(),
            applied_jump,
            diff,
            flow_before,
            flow_after,
            distance_gradient: grad_d,
            rate_au_per_yr: rate,
            bracket_residual,
            refine_iterations: iters,
        })
    }

    fn local_error(&self, t0: f64, y0: &Vec4, h: f64, full: &GaussStep<4>) -> Result<f64> {
        let first = self.step(t0, y0, 0.5 * h, None)?;
        let second = self.step(t0 + 0.5 * h, &first.y1, 0.5 * h, None)?;
        let p = self.tableau.order() as i32;
        Ok((full.y1 - second.y1).amax() / (2f64.powi(p) - 1.0))
    }

    fn diagnostics(&self, rejected: usize, max_err: f64) -> Diagnostics {
        Diagnostics {
            field_evaluations: self.evaluations.get(),
            rejected_steps: rejected,
            cross_checks: self.cross_checks.get(),
            max_cross_check_rel: self.max_cross.get(),
            max_local_error: max_err,
            multi_extractions: self.multi.get(),
        }
    }
}

/// Illinois regula falsi on a sign-changing bracket. Returns the abscissa,
/// the function value there and the number of evaluations.
pub(crate) fn illinois<F>(
    mut f: F,
    a: (f64, f64),
    b: (f64, f64),
    first: Option<f64>,
    ftol: f64,
    xtol: f64,
    max_iter: usize,
) -> Result<(f64, f64, usize)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let (mut xa, mut fa) = a;
    let (mut xb, mut fb) = b;
    if fa == 0.0 {
        return Ok((xa, fa, 0));
    }
    if fb == 0.0 {
        return Ok((xb, fb, 0));
    }
    let mut best = if fa.abs() < fb.abs() { (xa, fa) } else { (xb, fb) };
    for it in 1..=max_iter {
        let mut x = match (it, first) {
            (1, Some(g)) => g,
            _ => (xa * fb - xb * fa) / (fb - fa),
        };
        let (lo, hi) = if xa < xb { (xa, xb) } else { (xb, xa) };
        if !(x > lo && x < hi) {
            x = 0.5 * (xa + xb);
        }
        let fx = f(x)?;
        if fx.abs() < best.1.abs() {
            best = (x, fx);
        }
        if fx.abs() <= ftol || (xb - xa).abs() <= xtol {
            return Ok((x, fx, it));
        }
        if fx.signum() == fb.signum() {
            fa *= 0.5;
        } else {
            xa = xb;
            fa = fb;
        }
        xb = x;
        fb = fx;
    }
    Ok((best.0, best.1, max_iter))
}

/// Per-step callback; returning `true` stops the propagation after the
/// step.
pub type StopFn<'s> = dyn FnMut(&GaussStep<4>, &[PlanetCensus]) -> bool + 's;

/// Propagate `y0` from `t0` to `tf` (days, either direction) and return
/// the trajectory together with the error that ended it early, if any.
pub fn propagate_secular_partial(
    y0: &SecularState,
    t0: f64,
    tf: f64,
    a: f64,
    planets: &[Planet],
    settings: &SecularSettings,
    mut stop: Option<&mut StopFn<'_>>,
) -> (GeneralizedTrajectory, Option<Error>) {
    let mut traj = GeneralizedTrajectory {
        a,
        t0,
        y0: *y0,
        segments: vec![Segment::default()],
        events: Vec::new(),
        exchanges: Vec::new(),
        settings: *settings,
        diagnostics: Diagnostics::default(),
    };
    let mut sys = match SecularSystem::new(a, planets, *settings) {
        Ok(s) => s,
        Err(e) => return (traj, Some(e)),
    };
    let result = run(&mut sys, &mut traj, tf, &mut stop);
    (traj, result.err())
}

fn run(
    sys: &mut SecularSystem<'_>,
    traj: &mut GeneralizedTrajectory,
    tf: f64,
    stop: &mut Option<&mut StopFn<'_>>,
) -> Result<()> {
    let settings = sys.settings;
    let mut t = traj.t0;
    let mut y = Vec4::from(traj.y0.to_array());
    sys.initialize(t, &y)?;
    let dir = if tf >= t { 1.0 } else { -1.0 };
    let nominal = settings.step_days.abs() * dir;
    let mut h_cur = nominal;
    let mut prev: Option<GaussStep<4>> = None;
    let mut rejected = 0usize;
    let mut max_err = 0.0f64;
    let t_eps = 1e-9 * settings.step_days.abs();
    let result = (|| -> Result<()> {
        while (tf - t) * dir > t_eps {
            let h = if (t + h_cur - tf) * dir > 0.0 { tf - t } else { h_cur };
            if h.abs() < settings.min_step_days && (tf - t).abs() > settings.min_step_days {
                return Err(Error::StepUnderflow { t });
            }
            let guess = prev.as_ref().map(|p| extrapolated_guess(p, h));
            let step = sys.step(t, &y, h, guess.as_deref())?;
            if let Some(tol) = settings.error_tol {
                let err = sys.local_error(t, &y, h, &step)?;
                if err > tol && h.abs() > settings.min_step_days {
                    rejected += 1;
                    h_cur = 0.5 * h;
                    prev = None;
                    continue;
                }
                max_err = max_err.max(err);
            }
            match sys.detect(&step)? {
                Detection::Ambiguous => {
                    rejected += 1;
                    h_cur = 0.5 * h;
                    prev = None;
                    log::debug!("two sign changes in one step at t = {t}; halving to {h_cur}");
                }
                Detection::None => {
                    t = step.t1();
                    y = step.y1;
                    let census = sys.census(t, &y)?;
                    sys.commit(&census, t, Some(&mut traj.exchanges));
                    let halt = stop.as_mut().map(|f| f(&step, &census)).unwrap_or(false);
                    traj.segments.last_mut().expect("segment").steps.push(step.clone());
                    prev = Some(step);
                    if h_cur.abs() < nominal.abs() {
                        h_cur = (2.0 * h_cur).abs().min(nominal.abs()) * dir;
                    }
                    if halt {
                        return Ok(());
                    }
                }
                Detection::Crossing { planet, index, theta } => {
                    let (cut, iters) = sys.cut_step(&step, planet, index, theta)?;
                    t = cut.t1();
                    y = cut.y1;
                    traj.segments.last_mut().expect("segment").steps.push(cut.clone());
                    let event = sys.crossing_event(planet, index, t, &y, iters)?;
                    if event.rate_au_per_yr.abs() < settings.tangent_rate_au_per_yr {
                        return Err(Error::TangentCrossing { t, rate: event.rate_au_per_yr });
                    }
                    log::info!(
                        "crossing with {} at t = {t:.6} (minimum {}, rate {:.3e} au/yr)",
                        event.planet_name,
                        event.h,
                        event.rate_au_per_yr
                    );
                    let label = event.label;
                    let after = event.side_after;
                    traj.events.push(event);
                    sys.set_side(planet, label, after);
                    let census = sys.census(t, &y)?;
                    sys.commit(&census, t, Some(&mut traj.exchanges));
                    traj.segments.push(Segment::default());
                    let halt = stop.as_mut().map(|f| f(&cut, &census)).unwrap_or(false);
                    prev = None;
                    if halt {
                        return Ok(());
                    }
                }
            }
        }
        Ok(())
    })();
    if traj.segments.len() > 1 && traj.segments.last().map(|s| s.steps.is_empty()).unwrap_or(false) {
        traj.segments.pop();
    }
    traj.diagnostics = sys.diagnostics(rejected, max_err);
    result
}

/// Propagate `y0` from `t0` to `tf` (days). `a` is held fixed.
pub fn propagate_secular(
    y0: &SecularState,
    t0: f64,
    tf: f64,
    a: f64,
    planets: &[Planet],
    settings: &SecularSettings,
) -> Result<GeneralizedTrajectory> {
    match propagate_secular_partial(y0, t0, tf, a, planets, settings, None) {
        (traj, None) => Ok(traj),
        (_, Some(e)) => Err(e),
    }
}

/// Signed distances of every minimum along a trajectory.
#[derive(Debug, Clone, Serialize)]
pub struct DistanceSample {
    pub t: f64,
    /// Per planet: `(label, d̃)` for every minimum, in distance order.
    pub minima: Vec<Vec<(usize, f64)>>,
    /// `d̃` of the minimum closest to zero over all planets.
    pub dmin_signed: f64,
    pub dmin_planet: usize,
    pub dmin_label: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct DistanceSeries {
    pub samples: Vec<DistanceSample>,
    pub exchanges: Vec<BranchExchange>,
}

impl DistanceSeries {
    /// `(t, d̃)` of one tracked minimum.
    pub fn track(&self, planet: usize, label: usize) -> Vec<(f64, f64)> {
        self.samples.iter().filter_map(|s| s.minima[planet].iter().find(|m| m.0 == label).map(|m| (s.t, m.1))).collect()
    }
}

/// `d̄_h(t) = d̃_h(E(t))` on the epochs `times` (monotone), with minima
/// labelled consistently and exchanges of the absolute minimum logged.
pub fn secular_distance_series(
    traj: &GeneralizedTrajectory,
    planets: &[Planet],
    times: &[f64],
) -> Result<DistanceSeries> {
    let mut sys = SecularSystem::new(traj.a, planets, traj.settings)?;
    sys.frozen_sides = false;
    let mut samples = Vec::with_capacity(times.len());
    let mut exchanges = Vec::new();
    let mut first = true;
    for &t in times {
        let y = traj.state_at(t).ok_or(Error::EphemerisRange {
            planet: "trajectory".into(),
            t,
            start: traj.t0,
            end: traj.t_end(),
        })?;
        let y = Vec4::from(y.to_array());
        let census = sys.census(t, &y)?;
        sys.commit(&census, t, if first { None } else { Some(&mut exchanges) });
        first = false;
        let census = sys.census(t, &y)?;
        let mut best = (f64::INFINITY, 0usize, 0usize);
        let mut minima = Vec::with_capacity(census.len());
        for c in &census {
            let row: Vec<(usize, f64)> = c.minima.iter().map(|m| (m.label.unwrap_or(usize::MAX), m.d_signed)).collect();
            if let Some(m) = c.closest() {
                if m.d_signed.abs() < best.0.abs() {
                    best = (m.d_signed, c.planet, m.label.unwrap_or(usize::MAX));
                }
            }
            minima.push(row);
        }
        samples.push(DistanceSample { t, minima, dmin_signed: best.0, dmin_planet: best.1, dmin_label: best.2 });
    }
    Ok(DistanceSeries { samples, exchanges })
}

/// Signed distance of the minimum closest to zero over all planets.
pub fn dmin_signed(y: &SecularState, a: f64, t: f64, planets: &[Planet], settings: &SecularSettings) -> Result<f64> {
    let orbit = y.orbit(a)?;
    let mut best = f64::INFINITY;
    for p in planets {
        let pair = OrbitPair::new(orbit, p.orbit_at(t)?);
        let set = critical_points_with(&pair, &settings.field.scan)?;
        if let Ok(m) = set.minimum(0) {
            let d = signed_distance(&pair, m)?.value;
            if d.abs() < best.abs() {
                best = d;
            }
        }
    }
    Ok(best)
}
