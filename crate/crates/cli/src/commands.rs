use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;

use anyhow::Context;
use serde_json::json;

use orbdist::distance::{crossing_matrix, CriticalPoint};
use orbdist::ephemeris::planets_from_rows;
use orbdist::full::{hkpq, output_epochs};
use orbdist::predictor::read_virtual_asteroids;
use orbdist::secular::{propagate_secular_partial, secular_distance_series};
use orbdist::{
    critical_points, crossing_probability, forecast_family, phase_ensemble, propagate_full, signed_distance,
    CriticalKind, CrossingForecast, Error, ForecastSettings, FullSettings, FullState, GeneralizedTrajectory,
    KeplerianElements, Method, OrbitPair, Planet, SecularSettings, SecularState, VaForecast, DAYS_PER_YEAR,
};

use crate::config::{InputError, Loaded};
use crate::output::{num, opt, OutDir};

fn secular_settings(cfg: &Loaded) -> SecularSettings {
    let c = &cfg.config.secular;
    let mut s = SecularSettings::default();
    s.step_days = c.step_days;
    s.stages = c.stages;
    s.stage.tol = c.tol;
    s.field.tol = c.field_tol;
    s.crossing_tol_au = c.crossing_tol_au;
    s
}

fn full_settings(cfg: &Loaded) -> FullSettings {
    let c = &cfg.config.full;
    FullSettings {
        tol: c.tol,
        output_step_days: c.output_step_days,
        close_approach_au: c.close_approach_au,
        ..FullSettings::default()
    }
}

fn asteroid_elements(cfg: &Loaded) -> anyhow::Result<(String, KeplerianElements, f64)> {
    let (name, r, t0) = cfg.asteroid()?;
    let el = KeplerianElements::new(r.a, r.e, r.i, r.node, r.argp, r.mean_anom)
        .map_err(|e| InputError(format!("elements of `{name}`: {e}")))?;
    Ok((name, el, t0))
}

fn kind_name(k: CriticalKind) -> &'static str {
    match k {
        CriticalKind::Minimum => "minimum",
        CriticalKind::Saddle => "saddle",
        CriticalKind::Maximum => "maximum",
        CriticalKind::Degenerate => "degenerate",
    }
}

pub fn moid(cfg: &Loaded) -> anyhow::Result<()> {
    let mut groups = cfg.element_groups()?;
    if cfg.config.ephemerides.is_some() {
        groups.extend(cfg.ephemeris_groups()?);
    }
    let names: [String; 2] = match &cfg.config.moid.bodies {
        Some(b) => b.clone(),
        None if groups.len() >= 2 => [groups[0].0.clone(), groups[1].0.clone()],
        None => return Err(InputError("moid needs two bodies in the elements file".into()).into()),
    };
    let first = groups.iter().find(|(n, _)| *n == names[0]);
    let t0 = cfg.config.t0.or(first.map(|(_, rows)| rows[0].t_mjd)).unwrap_or(0.0);
    let mut orbits = Vec::new();
    for name in &names {
        let (_, rows) =
            groups.iter().find(|(n, _)| n == name).ok_or_else(|| InputError(format!("body `{name}` not found")))?;
        // Only the shape matters here; mass ratios are irrelevant.
        let masses = BTreeMap::from([(name.clone(), 0.0)]);
        let body = planets_from_rows(vec![(name.clone(), rows.clone())], &masses)
            .map_err(|e| InputError(format!("elements of `{name}`: {e}")))?;
        orbits.push(body[0].orbit_at(t0).map_err(|e| InputError(format!("elements of `{name}`: {e}")))?);
    }
    let pair = OrbitPair::new(orbits[0], orbits[1]);
    let set = critical_points(&pair)?;

    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut push = |index: usize, h: Option<usize>, cp: &CriticalPoint| -> anyhow::Result<()> {
        let (signed, det, tangent) = match h {
            Some(_) => {
                let sd = signed_distance(&pair, cp)?;
                (num(sd.value), num(crossing_matrix(&pair, cp)?.det), u8::from(sd.degenerate).to_string())
            }
            None => (String::new(), String::new(), String::new()),
        };
        rows.push(vec![
            index.to_string(),
            kind_name(cp.kind).to_string(),
            h.map(|h| h.to_string()).unwrap_or_default(),
            num(cp.v.x),
            num(cp.v.y),
            num(cp.distance()),
            signed,
            det,
            tangent,
        ]);
        Ok(())
    };
    let mut listed = vec![false; set.points.len()];
    for h in 0..set.num_minima() {
        let k = set.minimum_point_index(h).expect("minimum index");
        listed[k] = true;
        push(k, Some(h), &set.points[k])?;
    }
    for (k, cp) in set.points.iter().enumerate().filter(|(k, _)| !listed[*k]) {
        push(k, None, cp)?;
    }

    let closest = set.minimum(0)?;
    let sd0 = signed_distance(&pair, closest)?;
    let mut text = String::new();
    text += &format!("# bodies: {} / {}\n", names[0], names[1]);
    text += &format!("# epoch_mjd: {}\n", num(t0));
    text += &format!(
        "# critical_points: {} (minima {}, saddles {}, maxima {}, degenerate {})\n",
        set.points.len(),
        set.count(CriticalKind::Minimum),
        set.count(CriticalKind::Saddle),
        set.count(CriticalKind::Maximum),
        set.count(CriticalKind::Degenerate)
    );
    text += &format!("# d_min_au: {}\n", num(closest.distance()));
    if sd0.degenerate {
        text += "# d_min_signed_au: undefined (orbits tangent at the closest minimum)\n";
    } else {
        text += &format!("# d_min_signed_au: {}\n", num(sd0.value));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(MOID_HEADER)?;
    for r in &rows {
        w.write_record(r)?;
    }
    text += std::str::from_utf8(&w.into_inner()?)?;
    std::io::stdout().write_all(text.as_bytes())?;

    if let Some(dir) = &cfg.out {
        let mut out = OutDir::create(dir)?;
        out.csv("moid.csv", &MOID_HEADER, rows)?;
        let details = json!({
            "bodies": names,
            "epoch_mjd": t0,
            "d_min_au": closest.distance(),
            "d_min_signed_au": if sd0.degenerate { None } else { Some(sd0.value) },
        });
        out.manifest("moid", cfg, details)?;
    }
    Ok(())
}

const MOID_HEADER: [&str; 9] = ["index", "kind", "h", "l", "l_prime", "d_au", "d_signed_au", "det_a", "tangent"];

/// `(h, k, p, q)` of a secular state.
fn secular_hkpq(y: &SecularState, a: f64) -> anyhow::Result<[f64; 4]> {
    let eq = y.keplerian(a, 0.0)?.to_equinoctial()?;
    Ok([eq.h, eq.k, eq.p, eq.q])
}

fn sorted_epochs(mut t: Vec<f64>) -> Vec<f64> {
    t.sort_by(f64::total_cmp);
    t.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    t
}

fn secular_rows(traj: &GeneralizedTrajectory, planets: &[Planet], step: f64) -> anyhow::Result<Vec<Vec<String>>> {
    let t_end = traj.t_end();
    let mut times = if t_end > traj.t0 { output_epochs(traj.t0, t_end, step) } else { vec![traj.t0] };
    times.extend(traj.events.iter().map(|e| e.t_c));
    let times = sorted_epochs(times);
    let series = secular_distance_series(traj, planets, &times)?;
    times
        .iter()
        .zip(&series.samples)
        .map(|(&t, sample)| {
            let y = traj.state_at(t).context("epoch outside the trajectory")?;
            let e = secular_hkpq(&y, traj.a)?;
            let mut row = vec![num(t)];
            row.extend(y.to_array().iter().chain(&e).map(|x| num(*x)));
            row.push(num(sample.dmin_signed));
            Ok(row)
        })
        .collect()
}

pub fn propagate_secular(cfg: &Loaded) -> anyhow::Result<()> {
    let (name, el, t0) = asteroid_elements(cfg)?;
    let planets = cfg.planets()?;
    let s = secular_settings(cfg);
    let y0 = SecularState::from_elements(&el)?;
    let (traj, stop) = propagate_secular_partial(&y0, t0, cfg.tf(t0), el.a, &planets, &s, None);
    if let Some(e) = stop {
        if !matches!(e, Error::TangentCrossing { .. }) {
            return Err(e.into());
        }
        // Keep what was computed up to the tangency.
        write_secular(cfg, &name, &traj, &planets)?;
        let t_end = traj.t_end();
        return Err(anyhow::Error::new(e).context(format!(
            "propagation stopped; last valid epoch {t_end} MJD (partial output in {})",
            cfg.out_dir().display()
        )));
    }
    write_secular(cfg, &name, &traj, &planets)
}

fn write_secular(cfg: &Loaded, name: &str, traj: &GeneralizedTrajectory, planets: &[Planet]) -> anyhow::Result<()> {
    let rows = secular_rows(traj, planets, cfg.config.secular.output_step_days)?;
    let mut out = OutDir::create(&cfg.out_dir())?;
    out.csv("secular.csv", &["t_mjd", "G", "Z", "g", "z", "h", "k", "p", "q", "dmin_signed"], rows)?;
    let events = traj.events.iter().map(|e| {
        let mut row = vec![num(e.t_c), e.planet_name.clone(), e.h.to_string()];
        row.extend(e.applied_jump.iter().map(|x| num(*x)));
        row
    });
    out.csv("events.csv", &["t_mjd", "planet", "h_index", "jump_G", "jump_Z", "jump_g", "jump_z"], events)?;
    let d = &traj.diagnostics;
    let details = json!({
        "asteroid": name,
        "a_au": traj.a,
        "t0_mjd": traj.t0,
        "t_end_mjd": traj.t_end(),
        "planets": planets.iter().map(|p| json!({"name": p.name, "mu": p.mu})).collect::<Vec<_>>(),
        "crossings": traj.events.len(),
        "field_evaluations": d.field_evaluations,
        "rejected_steps": d.rejected_steps,
        "multi_extractions": d.multi_extractions,
    });
    out.manifest("propagate-secular", cfg, details)
}

struct Run {
    asteroid_phase: Option<f64>,
    planet_phase: Option<f64>,
    hkpq: Vec<[f64; 4]>,
    close_approach: bool,
    failure: Option<String>,
}

struct Ensemble {
    epochs: Vec<f64>,
    mean: Vec<[f64; 4]>,
    std: Vec<[f64; 4]>,
    completed: usize,
    runs: Vec<Run>,
}

fn ensemble(cfg: &Loaded, el: &KeplerianElements, t0: f64, planets: &[Planet]) -> anyhow::Result<Ensemble> {
    let s = full_settings(cfg);
    let tf = cfg.tf(t0);
    let n = cfg.config.full.phases;
    if n == 1 {
        let traj = propagate_full(&FullState::from_elements(el, t0)?, tf, planets, &s)?;
        let rows = traj.states.iter().map(hkpq).collect::<orbdist::Result<Vec<_>>>()?;
        let epochs = traj.states.iter().map(|x| x.t).collect();
        return Ok(Ensemble {
            epochs,
            mean: rows.clone(),
            std: vec![[0.0; 4]; rows.len()],
            completed: 1,
            runs: vec![Run {
                asteroid_phase: None,
                planet_phase: None,
                hkpq: rows,
                close_approach: traj.close_approach,
                failure: None,
            }],
        });
    }
    let grid: Vec<f64> = (0..n).map(|k| std::f64::consts::TAU * k as f64 / n as f64).collect();
    let stats = phase_ensemble(el, t0, &grid, &grid, tf, planets, &s)?;
    if stats.completed == 0 {
        let why = stats.runs.iter().find_map(|r| r.failure.clone()).unwrap_or_default();
        anyhow::bail!("every ensemble run failed; first failure: {why}");
    }
    if !stats.complete {
        log::warn!("{} of {} ensemble runs failed", stats.runs.len() - stats.completed, stats.runs.len());
    }
    Ok(Ensemble {
        epochs: stats.epochs,
        mean: stats.mean,
        std: stats.std,
        completed: stats.completed,
        runs: stats
            .runs
            .into_iter()
            .map(|r| Run {
                asteroid_phase: Some(r.asteroid_phase),
                planet_phase: Some(r.planet_phase),
                hkpq: r.hkpq,
                close_approach: r.close_approach,
                failure: r.failure,
            })
            .collect(),
    })
}

const HKPQ_HEADER: [&str; 6] = ["t_mjd", "h", "k", "p", "q", "mean_flag"];

fn hkpq_rows<'a>(epochs: &'a [f64], rows: &'a [[f64; 4]], flag: u8) -> impl Iterator<Item = Vec<String>> + 'a {
    epochs.iter().zip(rows).map(move |(t, r)| {
        let mut row = vec![num(*t)];
        row.extend(r.iter().map(|x| num(*x)));
        row.push(flag.to_string());
        row
    })
}

pub fn propagate_full_cmd(cfg: &Loaded) -> anyhow::Result<()> {
    let (name, el, t0) = asteroid_elements(cfg)?;
    let planets = cfg.planets()?;
    let ens = ensemble(cfg, &el, t0, &planets)?;
    let mut out = OutDir::create(&cfg.out_dir())?;
    for (k, run) in ens.runs.iter().enumerate() {
        if run.failure.is_none() {
            out.csv(&format!("full_run_{k:03}.csv"), &HKPQ_HEADER, hkpq_rows(&ens.epochs, &run.hkpq, 0))?;
        }
    }
    out.csv("full_mean.csv", &HKPQ_HEADER, hkpq_rows(&ens.epochs, &ens.mean, 1))?;
    let stats = ens.epochs.iter().zip(ens.mean.iter().zip(&ens.std)).map(|(t, (m, s))| {
        let mut row = vec![num(*t)];
        row.extend(m.iter().chain(s).map(|x| num(*x)));
        row.push(ens.completed.to_string());
        row
    });
    out.csv(
        "full_stats.csv",
        &["t_mjd", "h_mean", "k_mean", "p_mean", "q_mean", "h_std", "k_std", "p_std", "q_std", "runs"],
        stats,
    )?;
    let runs = ens.runs.iter().enumerate().map(|(k, r)| {
        vec![
            k.to_string(),
            opt(r.asteroid_phase),
            opt(r.planet_phase),
            u8::from(r.close_approach).to_string(),
            r.failure.clone().unwrap_or_default(),
        ]
    });
    out.csv("full_runs.csv", &["run", "asteroid_phase", "planet_phase", "close_approach", "failure"], runs)?;
    let details = json!({
        "asteroid": name,
        "t0_mjd": t0,
        "runs": ens.runs.len(),
        "completed": ens.completed,
        "close_approaches": ens.runs.iter().filter(|r| r.close_approach).count(),
    });
    out.manifest("propagate-full", cfg, details)
}

pub fn compare(cfg: &Loaded) -> anyhow::Result<()> {
    let (name, el, t0) = asteroid_elements(cfg)?;
    let planets = cfg.planets()?;
    let s = secular_settings(cfg);
    let y0 = SecularState::from_elements(&el)?;
    let (traj, stop) = propagate_secular_partial(&y0, t0, cfg.tf(t0), el.a, &planets, &s, None);
    if let Some(e) = stop {
        let t_end = traj.t_end();
        return Err(anyhow::Error::new(e).context(format!("secular propagation stopped; last valid epoch {t_end} MJD")));
    }
    let ens = ensemble(cfg, &el, t0, &planets)?;
    let mut worst = 0.0f64;
    let mut rows = Vec::with_capacity(ens.epochs.len());
    for (e, &t) in ens.epochs.iter().enumerate() {
        let y = traj.state_at(t).context("ensemble epoch outside the secular trajectory")?;
        let sec = secular_hkpq(&y, el.a)?;
        if e > 0 {
            for c in 0..4 {
                if ens.std[e][c] > 0.0 {
                    worst = worst.max((sec[c] - ens.mean[e][c]).abs() / ens.std[e][c]);
                }
            }
        }
        let mut row = vec![num(t)];
        row.extend(sec.iter().chain(&ens.mean[e]).chain(&ens.std[e]).map(|x| num(*x)));
        rows.push(row);
    }
    let mut out = OutDir::create(&cfg.out_dir())?;
    out.csv(
        "compare.csv",
        &[
            "t_mjd", "h_sec", "k_sec", "p_sec", "q_sec", "h_mean", "k_mean", "p_mean", "q_mean", "h_std", "k_std",
            "p_std", "q_std",
        ],
        rows,
    )?;
    let details = json!({
        "asteroid": name,
        "t0_mjd": t0,
        "runs": ens.runs.len(),
        "completed": ens.completed,
        "crossings": traj.events.len(),
        "max_deviation_in_std": worst,
    });
    out.manifest("compare", cfg, details)
}

fn forecast_rows(rows: &[VaForecast]) -> impl Iterator<Item = Vec<String>> + '_ {
    rows.iter().map(|r| {
        vec![
            num(r.s),
            num(r.weight),
            num(r.d0),
            opt(r.slope),
            opt(r.edge_times.map(|e| e.0)),
            opt(r.edge_times.map(|e| e.1)),
            opt(r.t_cross),
            r.failure.clone().unwrap_or_default(),
        ]
    })
}

pub fn crossing_times(cfg: &Loaded) -> anyhow::Result<()> {
    let path = cfg
        .config
        .forecast
        .virtual_asteroids
        .as_deref()
        .ok_or_else(|| InputError("config has no `forecast.virtual_asteroids` file".into()))?;
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let vas = read_virtual_asteroids(file).map_err(|e| InputError(format!("{}: {e}", path.display())))?;
    let t0 = match cfg.config.t0 {
        Some(t) => t,
        None if cfg.config.elements.is_some() => cfg.asteroid()?.2,
        None => return Err(InputError("crossing-times needs `t0` or an elements file".into()).into()),
    };
    let planets = cfg.planets()?;
    let f = &cfg.config.forecast;
    let settings = ForecastSettings {
        band_halfwidth_au: 0.5 * f.band_au,
        horizon_days: cfg.horizon_years * DAYS_PER_YEAR,
        slope_half_span_days: f.slope_half_span_days,
        criterion: f.criterion,
        secular: secular_settings(cfg),
        ..ForecastSettings::default()
    };
    let mut out = OutDir::create(&cfg.out_dir())?;
    let header = ["s", "weight", "d0_au", "slope_au_per_yr", "t_near_mjd", "t_far_mjd", "t_cross_mjd", "failure"];
    let mut forecasts = Vec::new();
    let mut summary = Vec::new();
    for (method, label, file) in [
        (Method::Linearized, "linearized", "crossing_linearized.csv"),
        (Method::Secular, "secular", "crossing_secular.csv"),
    ] {
        let rows = forecast_family(&vas, t0, &planets, method, &settings);
        out.csv(file, &header, forecast_rows(&rows))?;
        let times: Vec<f64> = rows.iter().filter_map(|r| r.t_cross).collect();
        let t1 = times.iter().copied().reduce(f64::min);
        let t2 = times.iter().copied().reduce(f64::max);
        let weight: f64 = rows.iter().filter(|r| r.t_cross.is_some()).map(|r| r.weight).sum();
        let failed = rows.iter().filter(|r| r.failure.is_some()).count();
        summary.push(vec![
            label.to_string(),
            opt(t1),
            opt(t2),
            num(weight),
            times.len().to_string(),
            failed.to_string(),
        ]);
        let interval = (t1.unwrap_or(f64::NAN), t2.unwrap_or(f64::NAN));
        forecasts.push(CrossingForecast { method, t0, vas: rows, interval });
    }
    out.csv(
        "crossing_summary.csv",
        &["method", "t1_mjd", "t2_mjd", "crossing_weight", "crossing_count", "failed_count"],
        summary,
    )?;
    let probs = f.intervals.iter().map(|iv| {
        let mut row = vec![num(iv[0]), num(iv[1])];
        row.extend(forecasts.iter().map(|fc| num(crossing_probability(fc, iv[0], iv[1]))));
        row
    });
    out.csv("crossing_probability.csv", &["lo_mjd", "hi_mjd", "p_linearized", "p_secular"], probs)?;
    let none = forecasts.iter().all(|fc| fc.vas.iter().all(|v| v.t_cross.is_none()));
    let details = json!({
        "t0_mjd": t0,
        "virtual_asteroids": vas.len(),
        "band_halfwidth_au": settings.band_halfwidth_au,
        "criterion": f.criterion,
    });
    out.manifest("crossing-times", cfg, details)?;
    if none {
        return Err(Error::NoCrossings.into());
    }
    Ok(())
}
