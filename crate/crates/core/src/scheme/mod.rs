//! One convex-integration stage `q → q+1`: parameters, time partition,
//! iteration states and the stage pipeline itself.

use thiserror::Error;

use crate::blocks::BlockError;
use crate::exact_modes::ModeError;
use crate::spectral::SpectralError;
use crate::transport::TransportError;

pub mod partition;
pub mod schedule;
pub mod stage;
pub mod state;

pub use partition::{chi, chi_prime, EnergyProfile, TimePartition};
pub use schedule::{
    check_inequalities, make_schedule, manual_schedule, GeometricParams, InequalityReport,
    ManualParams, ParameterSchedule, ScheduleKind, StageParams,
};
pub use stage::{euler2d_stage, run_stage, Stage, StageOptions, StageReport, StagedSource};
pub use state::{SeedSpec, SeededSource, StateSnapshot, StateSource, ZeroSource};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchemeError {
    #[error("schedule: {0}")]
    Schedule(String),
    #[error("amplitude target leaves the ε-ball at l = {l}: ‖M̊/2ρ‖ = {ratio:e} ≥ ε = {eps:e}; use a smaller η or a smaller stress")]
    EpsilonBall { l: i64, ratio: f64, eps: f64 },
    #[error(
        "inductive assumption ρ_l ≤ δ_(q+1) violated at l = {l}: ρ_l = {rho:e}, δ = {delta:e}"
    )]
    RhoOverflow { l: i64, rho: f64, delta: f64 },
    #[error("frequency λ = {0} overflows the grid band")]
    BandOverflow(i64),
    #[error("inductive assumption `{name}` failed: {detail}")]
    Invariant { name: String, detail: String },
    #[error("2D Euler stage needs z-independent planar input: {0}")]
    NotPlanar(String),
    #[error("reconstruction residual {0:e} exceeds the tolerance")]
    Decomposition(f64),
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error(transparent)]
    Mode(#[from] ModeError),
}

impl SchemeError {
    pub(crate) fn invariant(name: &str, detail: impl Into<String>) -> Self {
        SchemeError::Invariant {
            name: name.into(),
            detail: detail.into(),
        }
    }
}
