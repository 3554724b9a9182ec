//! Crossing-time forecasts for a one-parameter family of virtual asteroids.

use std::io::Read;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ephemeris::Planet;
use crate::error::{Error, Result};
use crate::kepler::{KeplerianElements, SecularState, DAYS_PER_YEAR};
use crate::secular::{dmin_signed, propagate_secular, propagate_secular_partial, SecularSettings, StopFn};

/// One sample orbit of the family, with its probability weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VirtualAsteroid {
    pub s: f64,
    pub elements: KeplerianElements,
    pub weight: f64,
}

#[derive(Debug, Deserialize)]
struct VaRow {
    s: f64,
    a: f64,
    e: f64,
    i: f64,
    node: f64,
    argp: f64,
    mean_anom: f64,
    weight: f64,
}

/// Read `s,a,e,i,node,argp,mean_anom,weight` rows. Weights must be
/// non-negative and sum to one within `1e-9`.
pub fn read_virtual_asteroids<R: Read>(reader: R) -> Result<Vec<VirtualAsteroid>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(reader);
    let mut out = Vec::new();
    for (line, row) in rdr.deserialize::<VaRow>().enumerate() {
        let r = row.map_err(|e| Error::Parse(format!("virtual asteroid row {}: {e}", line + 1)))?;
        let elements = KeplerianElements::new(r.a, r.e, r.i, r.node, r.argp, r.mean_anom)
            .map_err(|e| Error::Parse(format!("virtual asteroid row {}: {e}", line + 1)))?;
        out.push(VirtualAsteroid { s: r.s, elements, weight: r.weight });
    }
    check_weights(&out)?;
    Ok(out)
}

pub fn check_weights(vas: &[VirtualAsteroid]) -> Result<()> {
    if vas.is_empty() {
        return Err(Error::Parse("no virtual asteroids".into()));
    }
    if let Some(v) = vas.iter().find(|v| !(v.weight >= 0.0)) {
        return Err(Error::Parse(format!("negative weight {} at s = {}", v.weight, v.s)));
    }
    let total: f64 = vas.iter().map(|v| v.weight).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Parse(format!("weights sum to {total}, not 1")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Linearized,
    Secular,
}

/// Which event defines the crossing time of a virtual asteroid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CrossingCriterion {
    /// First entry into the band `|d̃_min| <= half-width`.
    #[default]
    BandEntry,
    /// First zero of `d̃_min`.
    Zero,
}

#[derive(Debug, Clone, Copy)]
pub struct ForecastSettings {
    /// Band half-width (au).
    pub band_halfwidth_au: f64,
    pub horizon_days: f64,
    /// Half-span of the centered difference for the slope (days).
    pub slope_half_span_days: f64,
    /// Slopes below this (au/yr) count as zero.
    pub zero_slope_au_per_yr: f64,
    pub criterion: CrossingCriterion,
    pub secular: SecularSettings,
}

impl Default for ForecastSettings {
    fn default() -> Self {
        Self {
            band_halfwidth_au: 1e-3,
            horizon_days: 100.0 * DAYS_PER_YEAR,
            slope_half_span_days: DAYS_PER_YEAR,
            zero_slope_au_per_yr: 1e-12,
            criterion: CrossingCriterion::BandEntry,
            secular: SecularSettings::default(),
        }
    }
}

/// Forecast for one virtual asteroid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VaForecast {
    pub s: f64,
    pub weight: f64,
    /// `d̃_min` at the initial epoch (au).
    pub d0: f64,
    /// `dd̄_min/dt` at the initial epoch (au/yr), when computed.
    pub slope: Option<f64>,
    /// Linear-ray times of reaching the near and far band edges.
    pub edge_times: Option<(f64, f64)>,
    /// Crossing time under the chosen criterion, if within the horizon.
    pub t_cross: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CrossingForecast {
    pub method: Method,
    pub t0: f64,
    pub vas: Vec<VaForecast>,
    /// `[t1, t2]`: earliest and latest crossing times.
    pub interval: (f64, f64),
}

fn closest_with_planet(
    y: &SecularState,
    a: f64,
    t: f64,
    planets: &[Planet],
    settings: &SecularSettings,
) -> Result<(f64, usize)> {
    let mut best = (f64::INFINITY, 0);
    for (k, p) in planets.iter().enumerate() {
        let d = dmin_signed(y, a, t, std::slice::from_ref(p), settings)?;
        if d.abs() < best.0.abs() {
            best = (d, k);
        }
    }
    Ok(best)
}

/// Slope of `d̄_min` at `t0` (au/yr) by a centered difference over one
/// secular step each way, following the planet of the closest minimum.
pub fn dmin_slope(y0: &SecularState, a: f64, t0: f64, planets: &[Planet], settings: &ForecastSettings) -> Result<f64> {
    let (_, k) = closest_with_planet(y0, a, t0, planets, &settings.secular)?;
    let dt = settings.slope_half_span_days;
    let mut s = settings.secular;
    s.step_days = dt;
    let fwd = propagate_secular(y0, t0, t0 + dt, a, planets, &s)?.final_state();
    let bwd = propagate_secular(y0, t0, t0 - dt, a, planets, &s)?.final_state();
    let one = std::slice::from_ref(&planets[k]);
    let dp = dmin_signed(&fwd, a, t0 + dt, one, &s)?;
    let dm = dmin_signed(&bwd, a, t0 - dt, one, &s)?;
    Ok((dp - dm) / (2.0 * dt / DAYS_PER_YEAR))
}

/// Crossing time of the linear ray `d0 + slope·(t - t0)` (times in days,
/// slope in au/yr). Returns the near/far band-edge times and the crossing
/// time under `criterion`; `None` when the ray moves away or is flat.
pub fn linear_ray_crossing(
    t0: f64,
    d0: f64,
    slope: f64,
    halfwidth: f64,
    zero_slope: f64,
    criterion: CrossingCriterion,
) -> (Option<(f64, f64)>, Option<f64>) {
    if d0.abs() <= halfwidth {
        let t = match criterion {
            CrossingCriterion::BandEntry => Some(t0),
            CrossingCriterion::Zero if slope.abs() >= zero_slope && d0 * slope <= 0.0 => {
                Some(t0 + d0.abs() / slope.abs() * DAYS_PER_YEAR)
            }
            CrossingCriterion::Zero => None,
        };
        return (None, t);
    }
    if slope.abs() < zero_slope || d0 * slope >= 0.0 {
        return (None, None);
    }
    let rate = slope.abs() / DAYS_PER_YEAR;
    let near = t0 + (d0.abs() - halfwidth) / rate;
    let far = t0 + (d0.abs() + halfwidth) / rate;
    let t = match criterion {
        CrossingCriterion::BandEntry => near,
        CrossingCriterion::Zero => t0 + d0.abs() / rate,
    };
    (Some((near, far)), Some(t))
}

fn va_state(va: &VirtualAsteroid) -> Result<SecularState> {
    SecularState::from_elements(&va.elements)
}

/// Linearized forecast for one virtual asteroid.
pub fn linearized_crossing_time(
    va: &VirtualAsteroid,
    t0: f64,
    planets: &[Planet],
    settings: &ForecastSettings,
) -> Result<VaForecast> {
    let y0 = va_state(va)?;
    let a = va.elements.a;
    let (d0, _) = closest_with_planet(&y0, a, t0, planets, &settings.secular)?;
    let slope = dmin_slope(&y0, a, t0, planets, settings)?;
    let (edges, t) = linear_ray_crossing(
        t0,
        d0,
        slope,
        settings.band_halfwidth_au,
        settings.zero_slope_au_per_yr,
        settings.criterion,
    );
    let t = t.filter(|t| *t <= t0 + settings.horizon_days);
    Ok(VaForecast { s: va.s, weight: va.weight, d0, slope: Some(slope), edge_times: edges, t_cross: t, failure: None })
}

/// Forecast from the secular evolution: the first epoch within the horizon
/// where the criterion is met.
pub fn secular_crossing_time(
    va: &VirtualAsteroid,
    t0: f64,
    planets: &[Planet],
    settings: &ForecastSettings,
) -> Result<VaForecast> {
    let y0 = va_state(va)?;
    let a = va.elements.a;
    let hw = settings.band_halfwidth_au;
    let (d0, _) = closest_with_planet(&y0, a, t0, planets, &settings.secular)?;
    let mut out =
        VaForecast { s: va.s, weight: va.weight, d0, slope: None, edge_times: None, t_cross: None, failure: None };
    if d0.abs() <= hw && settings.criterion == CrossingCriterion::BandEntry {
        out.t_cross = Some(t0);
        return Ok(out);
    }
    let s = settings.secular;
    let ztol = 10.0 * s.crossing_tol_au;
    let mut hit: Option<(f64, f64)> = None;
    let mut last_error: Option<Error> = None;
    {
        let mut stop =
            |step: &crate::gauss::GaussStep<4>, census: &[crate::secular::PlanetCensus]| -> bool {
                let d_end = census
                    .iter()
                    .filter_map(|c| c.closest().map(|m| m.d_signed))
                    .fold(f64::INFINITY, |b, d| if d.abs() < b.abs() { d } else { b });
                let inside = match settings.criterion {
                    CrossingCriterion::BandEntry => d_end.abs() <= hw,
                    CrossingCriterion::Zero => d_end.abs() <= ztol,
                };
                if inside {
                    hit = Some((step.t0, step.t1()));
                }
                inside
            };
        let stop_ref: &mut StopFn<'_> = &mut stop;
        let (traj, err) =
            propagate_secular_partial(&y0, t0, t0 + settings.horizon_days, a, planets, &s, Some(stop_ref));
        if let Some(e) = err {
            last_error = Some(e);
        }
        if let Some((ta, tb)) = hit {
            out.t_cross = Some(match settings.criterion {
                CrossingCriterion::Zero => tb,
                CrossingCriterion::BandEntry => {
                    let f = |t: f64| -> Result<f64> {
                        let y = traj.state_at(t).ok_or(Error::LostMinimum { t })?;
                        Ok(dmin_signed(&y, a, t, planets, &s)?.abs() - hw)
                    };
                    let fa = f(ta)?;
                    let fb = f(tb)?;
                    if fa <= 0.0 {
                        ta
                    } else {
                        crate::secular::illinois(f, (ta, fa), (tb, fb), None, 1e-12, 1e-9, 100)?.0
                    }
                }
            });
        }
    }
    if out.t_cross.is_none() {
        if let Some(e) = last_error {
            out.failure = Some(e.to_string());
        }
    }
    Ok(out)
}

/// Forecast every virtual asteroid. A failed forecast is kept as a row
/// with its error message.
pub fn forecast_family(
    vas: &[VirtualAsteroid],
    t0: f64,
    planets: &[Planet],
    method: Method,
    settings: &ForecastSettings,
) -> Vec<VaForecast> {
    vas.par_iter()
        .map(|va| {
            let r = match method {
                Method::Linearized => linearized_crossing_time(va, t0, planets, settings),
                Method::Secular => secular_crossing_time(va, t0, planets, settings),
            };
            r.unwrap_or_else(|e| VaForecast {
                s: va.s,
                weight: va.weight,
                d0: f64::NAN,
                slope: None,
                edge_times: None,
                t_cross: None,
                failure: Some(e.to_string()),
            })
        })
        .collect()
}

/// Forecast every virtual asteroid and form the interval of crossing times.
pub fn crossing_interval(
    vas: &[VirtualAsteroid],
    t0: f64,
    planets: &[Planet],
    method: Method,
    settings: &ForecastSettings,
) -> Result<CrossingForecast> {
    let rows = forecast_family(vas, t0, planets, method, settings);
    let times: Vec<f64> = rows.iter().filter_map(|r| r.t_cross).collect();
    if times.is_empty() {
        return Err(Error::NoCrossings);
    }
    let t1 = times.iter().copied().fold(f64::INFINITY, f64::min);
    let t2 = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(CrossingForecast { method, t0, vas: rows, interval: (t1, t2) })
}

/// Probability that the crossing time falls in `[lo, hi)`: the summed
/// weight of those virtual asteroids.
pub fn crossing_probability(forecast: &CrossingForecast, lo: f64, hi: f64) -> f64 {
    forecast
        .vas
        .iter()
        .filter(|v| v.t_cross.map(|t| t >= lo && t < hi).unwrap_or(false))
        .map(|v| v.weight)
        .sum::<f64>()
        .clamp(0.0, 1.0)
}
