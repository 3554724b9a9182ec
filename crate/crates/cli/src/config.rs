use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use orbdist::ephemeris::{planets_from_rows, read_element_rows};
use orbdist::{CrossingCriterion, ElementRecord, Planet, DAYS_PER_YEAR};

/// A problem with the configuration or an input file. Maps to exit code 1.
#[derive(Debug)]
pub struct InputError(pub String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

fn input_error(msg: impl Into<String>) -> anyhow::Error {
    InputError(msg.into()).into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Subcommand to run when none is given on the command line.
    pub command: Option<String>,
    /// Osculating elements, `t_mjd,planet,a,e,i,node,argp,mean_anom`.
    pub elements: Option<PathBuf>,
    /// Body in `elements` to propagate (default: the first one).
    pub asteroid: Option<String>,
    /// Planet element table, same columns as `elements`.
    pub ephemerides: Option<PathBuf>,
    /// Subset of the planets in `ephemerides` (default: all).
    pub planets: Option<Vec<String>>,
    /// Planet/Sun mass ratios overriding the built-in values.
    #[serde(default)]
    pub mu: BTreeMap<String, f64>,
    /// Initial epoch (MJD). Defaults to the epoch of the asteroid row.
    pub t0: Option<f64>,
    pub horizon_years: Option<f64>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub moid: MoidConfig,
    #[serde(default)]
    pub secular: SecularConfig,
    #[serde(default)]
    pub full: FullConfig,
    #[serde(default)]
    pub forecast: ForecastConfig,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoidConfig {
    /// The two bodies to compare, looked up in `elements` and then in
    /// `ephemerides`. Default: the first two bodies of `elements`.
    pub bodies: Option<[String; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SecularConfig {
    pub step_days: f64,
    pub stages: usize,
    /// Collocation stage tolerance.
    pub tol: f64,
    /// Relative tolerance of the averaging quadrature.
    pub field_tol: f64,
    pub crossing_tol_au: f64,
    pub output_step_days: f64,
}

impl Default for SecularConfig {
    fn default() -> Self {
        let s = orbdist::SecularSettings::default();
        Self {
            step_days: s.step_days,
            stages: s.stages,
            tol: s.stage.tol,
            field_tol: s.field.tol,
            crossing_tol_au: s.crossing_tol_au,
            output_step_days: DAYS_PER_YEAR,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FullConfig {
    /// Integrator tolerance.
    pub tol: f64,
    pub output_step_days: f64,
    /// Phases per body in the ensemble grid; 1 runs the nominal orbit only.
    pub phases: usize,
    pub close_approach_au: f64,
}

impl Default for FullConfig {
    fn default() -> Self {
        let s = orbdist::FullSettings::default();
        Self { tol: s.tol, output_step_days: s.output_step_days, phases: 1, close_approach_au: s.close_approach_au }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastConfig {
    /// `s,a,e,i,node,argp,mean_anom,weight` rows.
    pub virtual_asteroids: Option<PathBuf>,
    /// Total width of the band around `d̃ = 0` (au).
    pub band_au: f64,
    pub criterion: CrossingCriterion,
    pub slope_half_span_days: f64,
    /// `[lo, hi)` epochs (MJD) for crossing probabilities.
    pub intervals: Vec<[f64; 2]>,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        let s = orbdist::ForecastSettings::default();
        Self {
            virtual_asteroids: None,
            band_au: 2.0 * s.band_halfwidth_au,
            criterion: s.criterion,
            slope_half_span_days: s.slope_half_span_days,
            intervals: Vec::new(),
        }
    }
}

/// Overrides from the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub tol: Option<f64>,
    pub horizon_years: Option<f64>,
    pub band_au: Option<f64>,
}

/// A loaded configuration with paths resolved against its directory.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    pub hash: String,
    /// Output directory from `--out` or the config, if either gave one.
    pub out: Option<PathBuf>,
    pub horizon_years: f64,
}

pub const DEFAULT_HORIZON_YEARS: f64 = 100.0;

pub fn load(path: &Path, ov: &Overrides) -> anyhow::Result<Loaded> {
    let bytes = fs::read(path).map_err(|e| input_error(format!("cannot read config {}: {e}", path.display())))?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| input_error("config is not valid UTF-8"))?;
    let mut config: RunConfig =
        toml::from_str(&text).map_err(|e| input_error(format!("config {}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let resolve = |p: &mut Option<PathBuf>| {
        if let Some(q) = p.as_mut() {
            if q.is_relative() {
                *q = base.join(&*q);
            }
        }
    };
    resolve(&mut config.elements);
    resolve(&mut config.ephemerides);
    resolve(&mut config.forecast.virtual_asteroids);
    resolve(&mut config.out);
    if let Some(tol) = ov.tol {
        config.secular.tol = tol;
        config.full.tol = tol;
    }
    if let Some(w) = ov.band_au {
        config.forecast.band_au = w;
    }
    let horizon_years = ov.horizon_years.or(config.horizon_years).unwrap_or(DEFAULT_HORIZON_YEARS);
    let out = ov.out.clone().or_else(|| config.out.clone());
    let loaded = Loaded { hash: hex::encode(sha256(&bytes)), config, out, horizon_years };
    loaded.validate()?;
    Ok(loaded)
}

fn sha256(bytes: &[u8]) -> Vec<u8> {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).to_vec()
}

impl Loaded {
    fn validate(&self) -> anyhow::Result<()> {
        let c = &self.config;
        for p in [&c.elements, &c.ephemerides, &c.forecast.virtual_asteroids].into_iter().flatten() {
            if !p.is_file() {
                return Err(input_error(format!("input file {} does not exist", p.display())));
            }
        }
        let positive = [
            ("secular.step_days", c.secular.step_days),
            ("secular.tol", c.secular.tol),
            ("secular.field_tol", c.secular.field_tol),
            ("secular.crossing_tol_au", c.secular.crossing_tol_au),
            ("secular.output_step_days", c.secular.output_step_days),
            ("full.tol", c.full.tol),
            ("full.output_step_days", c.full.output_step_days),
            ("full.close_approach_au", c.full.close_approach_au),
            ("forecast.band_au", c.forecast.band_au),
            ("forecast.slope_half_span_days", c.forecast.slope_half_span_days),
            ("horizon_years", self.horizon_years),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(input_error(format!("{name} must be positive, got {v}")));
            }
        }
        if !(2..=3).contains(&c.secular.stages) {
            return Err(input_error(format!("secular.stages must be 2 or 3, got {}", c.secular.stages)));
        }
        if c.full.phases == 0 {
            return Err(input_error("full.phases must be at least 1"));
        }
        if let Some((k, v)) = c.mu.iter().find(|(_, v)| !(**v >= 0.0)) {
            return Err(input_error(format!("mu.{k} must be non-negative, got {v}")));
        }
        if let Some(iv) = c.forecast.intervals.iter().find(|iv| !(iv[0] < iv[1])) {
            return Err(input_error(format!("interval [{}, {}) is empty", iv[0], iv[1])));
        }
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn elements_path(&self) -> anyhow::Result<&Path> {
        self.config.elements.as_deref().ok_or_else(|| input_error("config has no `elements` file"))
    }

    pub fn element_groups(&self) -> anyhow::Result<Vec<(String, Vec<ElementRecord>)>> {
        read_groups(self.elements_path()?)
    }

    /// The asteroid's elements and the initial epoch.
    pub fn asteroid(&self) -> anyhow::Result<(String, ElementRecord, f64)> {
        let groups = self.element_groups()?;
        let (name, rows) = match &self.config.asteroid {
            Some(want) => groups
                .into_iter()
                .find(|(n, _)| n == want)
                .ok_or_else(|| input_error(format!("body `{want}` not found in elements file")))?,
            None => groups.into_iter().next().ok_or_else(|| input_error("elements file is empty"))?,
        };
        let row = rows[0];
        Ok((name, row, self.config.t0.unwrap_or(row.t_mjd)))
    }

    pub fn ephemeris_groups(&self) -> anyhow::Result<Vec<(String, Vec<ElementRecord>)>> {
        let path = self.config.ephemerides.as_deref().ok_or_else(|| input_error("config has no `ephemerides` file"))?;
        let mut groups = read_groups(path)?;
        if let Some(want) = &self.config.planets {
            if let Some(missing) = want.iter().find(|w| !groups.iter().any(|(n, _)| n == *w)) {
                return Err(input_error(format!("planet `{missing}` not found in ephemerides")));
            }
            groups.retain(|(n, _)| want.contains(n));
        }
        Ok(groups)
    }

    pub fn planets(&self) -> anyhow::Result<Vec<Planet>> {
        let groups = self.ephemeris_groups()?;
        if groups.is_empty() {
            return Err(input_error("no planets selected"));
        }
        planets_from_rows(groups, &self.config.mu).map_err(|e| input_error(e.to_string()))
    }

    pub fn tf(&self, t0: f64) -> f64 {
        t0 + self.horizon_years * DAYS_PER_YEAR
    }
}

fn read_groups(path: &Path) -> anyhow::Result<Vec<(String, Vec<ElementRecord>)>> {
    let file = fs::File::open(path).map_err(|e| input_error(format!("cannot open {}: {e}", path.display())))?;
    read_element_rows(file).map_err(|e| input_error(format!("{}: {e}", path.display())))
}
