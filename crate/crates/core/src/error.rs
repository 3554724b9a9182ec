use thiserror::Error;

/// Errors raised by the orbit-distance, averaging and propagation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid orbital elements: {0}")]
    InvalidElements(String),

    #[error("Kepler equation failed to converge (e = {e}, M = {mean_anom})")]
    KeplerNonConvergence { e: f64, mean_anom: f64 },

    #[error("degenerate orbit configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("orbits are tangent at minimum {h}: signed distance is undefined")]
    TangentOrbits { h: usize },

    #[error("no local minimum with index {h} (only {count} found)")]
    NoSuchMinimum { h: usize, count: usize },

    #[error("orbit distance {d_min:.3e} au is below the plain-quadrature margin")]
    TooCloseToCrossing { d_min: f64 },

    #[error("crossing matrix is singular at minimum {h} (det = {det:.3e})")]
    DegenerateCrossing { h: usize, det: f64 },

    #[error("collocation stages did not converge at t = {t} (residual {residual:.3e})")]
    StageNonConvergence { t: f64, residual: f64 },

    #[error("tangent crossing at t = {t}: d(dmin)/dt = {rate:.3e} au/yr")]
    TangentCrossing { t: f64, rate: f64 },

    #[error("collision singularity at t = {t}: distance {distance:.3e} au to planet {planet}")]
    CollisionSingularity { t: f64, planet: String, distance: f64 },

    #[error("crossing refinement failed at t = {t}: |signed distance| = {residual:.3e} au")]
    CrossingRefinement { t: f64, residual: f64 },

    #[error("lost track of a local minimum at t = {t}")]
    LostMinimum { t: f64 },

    #[error("step size underflow at t = {t}")]
    StepUnderflow { t: f64 },

    #[error("step limit of {steps} reached at t = {t}")]
    StepLimit { t: f64, steps: u32 },

    #[error("no virtual asteroid reaches the band within the horizon")]
    NoCrossings,

    #[error("epoch {t} is outside the ephemeris range [{start}, {end}] for {planet}")]
    EphemerisRange { planet: String, t: f64, start: f64, end: f64 },

    #[error("unknown planet `{0}`")]
    UnknownPlanet(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
