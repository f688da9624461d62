//! Minimum empirical phi-divergence estimation for moment condition models,
//! with a first-order uniform-minimum-risk-equivariant correction for models
//! invariant under translations, and a seeded Monte Carlo harness.

/// Toolkit version, reported by the CLI and stored in simulation reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod divergence;
pub mod dual;
pub mod error;
pub mod estimator;
mod linalg;
pub mod model;
pub mod sim;
pub mod umre;

pub use divergence::{make_power_divergence, DivergenceKind, DivergenceSpec, Interval};
pub use dual::{
    dual_objective, primal_value, solve_inner, solve_inner_el, DualSolution, DualStatus,
    SolverOptions,
};
pub use error::{Error, Result};
pub use estimator::{
    estimate, profile_divergence, EstimateOptions, EstimateResult, EstimateStatus,
};
pub use model::{
    builtin_model, check_invariance, evaluate_moments, initial_theta, Group, MomentModel, Sample,
    ThetaBox,
};
pub use nalgebra;
pub use sim::{
    generate_sample, run_simulation, write_report, DataDistribution, MethodSpec, SimConfig,
    SimReport,
};
pub use umre::{
    fisher_empirical, score_matrix, solve_tilt, umre_correct, TiltSolution, TiltStatus,
    UmreOptions, UmreResult,
};
