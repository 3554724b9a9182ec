//! Orbit distance geometry and secular dynamics of an asteroid perturbed by
//! planets, including the passage through orbit crossings.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod averaged;
pub mod distance;
pub mod ephemeris;
pub mod error;
pub mod full;
pub mod gauss;
pub mod kepler;
pub mod predictor;
pub mod quad;
pub mod secular;

pub use averaged::{
    averaged_gradient, averaged_keplerian, averaged_potential, extended_field, extended_field_pair, FieldSettings,
    KeplerianField, Side,
};
pub use distance::{critical_points, orbit_distance, signed_distance, CriticalKind, CriticalSet, OrbitPair};
pub use ephemeris::{ElementRecord, ElementTable, Ephemeris, Planet};
pub use error::{Error, Result};
pub use full::{phase_ensemble, propagate_full, EnsembleStats, FullSettings, FullState, FullTrajectory};
pub use kepler::{
    CartesianState, DelaunayElements, EquinoctialElements, KeplerianElements, Orbit, SecularState, DAYS_PER_YEAR,
    GAUSS_K, GM_SUN,
};
pub use predictor::{
    crossing_interval, crossing_probability, forecast_family, CrossingCriterion, CrossingForecast, ForecastSettings,
    Method, VaForecast, VirtualAsteroid,
};
pub use secular::{propagate_secular, CrossingEvent, GeneralizedTrajectory, SecularSettings};
