//! Numerical toolkit for regime-switching diffusions whose switching rates
//! depend on the trailing path segment.
//!
//! The crate covers segment bookkeeping, model definitions, path simulation,
//! Lyapunov drift checks, ergodicity statistics, and finite-difference solvers
//! for the associated elliptic systems.

pub mod elliptic;
pub mod ergostats;
pub mod expr;
pub mod lyapunov;
pub mod model;
pub mod rng;
pub mod segment;
pub mod simulate;
pub mod tridiag;

pub use elliptic::{
    mean_exit_time, recurrence_indicator, switch_before_exit_mc, ContractionBound, DomainInterval, EllipticError,
    EllipticSpec, EllipticSystem, IterationTrace, RecurrenceOptions, RecurrenceReport, Solution, Verdict,
};
pub use ergostats::{empirical_tv, fit_exponential_rate, hitting_stats, Binning, StateSamples, TvCurve};
pub use expr::{Expr, ExprKind, Scope};
pub use lyapunov::{
    apply_generator, dynkin_residual, scan_drift_condition, CylindricalLyapunov, DriftKind, DriftReport, TimeWeight, F1,
};
pub use model::{
    builtin_model, BuiltinName, BuiltinParams, ModelError, ModelSpec, RateKernel, Regime, RegimeSwitchingModel,
};
pub use segment::{SegmentError, SegmentPath};
pub use simulate::{first_hit, simulate_path, HitTarget, JumpMode, PathInit, Region, SimConfig, SimError, Trajectory};
pub use tridiag::{TridiagError, Tridiagonal};
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
