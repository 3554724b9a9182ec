//! Planet ephemerides: fixed two-body orbits or tabulated element histories.

use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kepler::{wrap_pi, wrap_tau, CartesianState, KeplerianElements, Orbit, GAUSS_K, GM_SUN};

/// Planet/Sun mass ratios of the major planets.
pub const PLANET_MASSES: [(&str, f64); 8] = [
    ("mercury", 1.0 / 6_023_600.0),
    ("venus", 1.0 / 408_523.71),
    ("earth", 1.0 / 328_900.56),
    ("mars", 1.0 / 3_098_708.0),
    ("jupiter", 1.0 / 1_047.348_6),
    ("saturn", 1.0 / 3_497.898),
    ("uranus", 1.0 / 22_902.98),
    ("neptune", 1.0 / 19_412.24),
];

/// Mass ratio of a major planet by (case-insensitive) name.
pub fn default_mass(name: &str) -> Option<f64> {
    let key = name.to_ascii_lowercase();
    PLANET_MASSES.iter().find(|(n, _)| *n == key).map(|(_, m)| *m)
}

/// One row of an element table or element input file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElementRecord {
    pub t_mjd: f64,
    pub a: f64,
    pub e: f64,
    pub i: f64,
    pub node: f64,
    pub argp: f64,
    pub mean_anom: f64,
}

#[derive(Debug, Deserialize)]
struct ElementRow {
    t_mjd: f64,
    planet: String,
    a: f64,
    e: f64,
    i: f64,
    node: f64,
    argp: f64,
    mean_anom: f64,
}

/// Read `t_mjd,planet,a,e,i,node,argp,mean_anom` rows grouped by body name,
/// in file order.
pub fn read_element_rows<R: Read>(reader: R) -> Result<Vec<(String, Vec<ElementRecord>)>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(reader);
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<ElementRecord>> = BTreeMap::new();
    for (line, row) in rdr.deserialize::<ElementRow>().enumerate() {
        let r = row.map_err(|e| Error::Parse(format!("element row {}: {e}", line + 1)))?;
        let rec = ElementRecord {
            t_mjd: r.t_mjd,
            a: r.a,
            e: r.e,
            i: r.i,
            node: r.node,
            argp: r.argp,
            mean_anom: r.mean_anom,
        };
        KeplerianElements::new(rec.a, rec.e, rec.i, rec.node, rec.argp, rec.mean_anom)
            .map_err(|e| Error::Parse(format!("element row {}: {e}", line + 1)))?;
        if !groups.contains_key(&r.planet) {
            order.push(r.planet.clone());
        }
        groups.entry(r.planet).or_default().push(rec);
    }
    Ok(order
        .into_iter()
        .map(|name| {
            let rows = groups.remove(&name).unwrap_or_default();
            (name, rows)
        })
        .collect())
}

/// Element history sampled at increasing epochs (MJD).
///
/// Shape elements are interpolated linearly, angles along the shorter arc.
/// The mean anomaly is carried forward from the preceding row with that
/// row's mean motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementTable {
    rows: Vec<ElementRecord>,
}

impl ElementTable {
    pub fn new(rows: Vec<ElementRecord>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Parse("empty element table".into()));
        }
        for w in rows.windows(2) {
            if !(w[1].t_mjd > w[0].t_mjd) {
                return Err(Error::Parse(format!(
                    "table epochs must be strictly increasing ({} then {})",
                    w[0].t_mjd, w[1].t_mjd
                )));
            }
        }
        Ok(Self { rows })
    }

    pub fn span(&self) -> (f64, f64) {
        (self.rows[0].t_mjd, self.rows[self.rows.len() - 1].t_mjd)
    }

    pub fn rows(&self) -> &[ElementRecord] {
        &self.rows
    }

    fn interpolate(&self, t: f64, mu: f64) -> Option<KeplerianElements> {
        let (t0, t1) = self.span();
        if !(t0..=t1).contains(&t) {
            return None;
        }
        let j = self.rows.partition_point(|r| r.t_mjd <= t).clamp(1, self.rows.len().max(2) - 1);
        let (r0, r1) =
            if self.rows.len() == 1 { (self.rows[0], self.rows[0]) } else { (self.rows[j - 1], self.rows[j]) };
        let s = if r1.t_mjd > r0.t_mjd { (t - r0.t_mjd) / (r1.t_mjd - r0.t_mjd) } else { 0.0 };
        let lin = |x0: f64, x1: f64| x0 + s * (x1 - x0);
        let ang = |x0: f64, x1: f64| x0 + s * wrap_pi(x1 - x0);
        let n0 = mean_motion(r0.a, mu);
        Some(KeplerianElements {
            a: lin(r0.a, r1.a),
            e: lin(r0.e, r1.e),
            i: lin(r0.i, r1.i),
            node: wrap_tau(ang(r0.node, r1.node)),
            argp: wrap_tau(ang(r0.argp, r1.argp)),
            mean_anom: wrap_tau(r0.mean_anom + n0 * (t - r0.t_mjd)),
        })
    }
}

/// Heliocentric mean motion (rad/day) of a body of mass ratio `mu`.
pub fn mean_motion(a: f64, mu: f64) -> f64 {
    GAUSS_K * (1.0 + mu).sqrt() / a.powf(1.5)
}

/// How a planet's elements evolve in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Ephemeris {
    /// Fixed osculating elements at `epoch` (MJD), mean anomaly advancing
    /// at the two-body rate.
    TwoBody {
        elements: KeplerianElements,
        epoch: f64,
    },
    Table(ElementTable),
}

/// A perturbing planet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Planet {
    pub name: String,
    /// Planet/Sun mass ratio.
    pub mu: f64,
    pub ephemeris: Ephemeris,
}

impl Planet {
    pub fn two_body(name: &str, mu: f64, elements: KeplerianElements, epoch: f64) -> Self {
        Self { name: name.to_string(), mu, ephemeris: Ephemeris::TwoBody { elements, epoch } }
    }

    pub fn table(name: &str, mu: f64, table: ElementTable) -> Self {
        Self { name: name.to_string(), mu, ephemeris: Ephemeris::Table(table) }
    }

    /// Osculating elements at epoch `t` (MJD).
    pub fn elements_at(&self, t: f64) -> Result<KeplerianElements> {
        match &self.ephemeris {
            Ephemeris::TwoBody { elements, epoch } => {
                let mut el = *elements;
                el.mean_anom = wrap_tau(el.mean_anom + mean_motion(el.a, self.mu) * (t - epoch));
                Ok(el)
            }
            Ephemeris::Table(table) => table.interpolate(t, self.mu).ok_or_else(|| {
                let (start, end) = table.span();
                Error::EphemerisRange { planet: self.name.clone(), t, start, end }
            }),
        }
    }

    pub fn orbit_at(&self, t: f64) -> Result<Orbit> {
        Ok(self.elements_at(t)?.orbit())
    }

    /// Heliocentric position and velocity at epoch `t`.
    pub fn state_at(&self, t: f64) -> Result<CartesianState> {
        self.elements_at(t)?.to_cartesian(GM_SUN * (1.0 + self.mu))
    }

    /// The same planet with its mean anomaly at `epoch` replaced by `phase`.
    pub fn with_phase(&self, epoch: f64, phase: f64) -> Result<Self> {
        let mut el = self.elements_at(epoch)?;
        el.mean_anom = wrap_tau(phase);
        Ok(Self::two_body(&self.name, self.mu, el, epoch))
    }

    /// Whether the planet's orbit shape is constant in time.
    pub fn is_fixed(&self) -> bool {
        matches!(self.ephemeris, Ephemeris::TwoBody { .. })
    }
}

/// Build planets from grouped table rows. A single row gives a two-body
/// planet; several rows give a table. Masses come from `masses` or the
/// built-in list.
pub fn planets_from_rows(
    groups: Vec<(String, Vec<ElementRecord>)>,
    masses: &BTreeMap<String, f64>,
) -> Result<Vec<Planet>> {
    groups
        .into_iter()
        .map(|(name, rows)| {
            let mu = masses
                .get(&name)
                .copied()
                .or_else(|| default_mass(&name))
                .ok_or_else(|| Error::UnknownPlanet(name.clone()))?;
            if rows.len() == 1 {
                let r = rows[0];
                let el = KeplerianElements::new(r.a, r.e, r.i, r.node, r.argp, r.mean_anom)?;
                Ok(Planet::two_body(&name, mu, el, r.t_mjd))
            } else {
                Ok(Planet::table(&name, mu, ElementTable::new(rows)?))
            }
        })
        .collect()
}
