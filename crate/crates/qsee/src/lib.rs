//! Simulator for quasilinear stochastic parabolic equations.
//!
//! The solver freezes the quasilinear operator at an anchor state, integrates
//! the resulting semilinear equation with a semi-implicit Euler–Maruyama
//! scheme under a ramp cut-off, restarts whenever a path monitor exceeds its
//! budget, and stitches the segments into a maximal path. A truncation
//! hierarchy extends the scheme to locally Lipschitz coefficients, and a
//! blow-up detector classifies abnormal terminations.
//!
//! Modules:
//! - [`spaces`]: grid fields, the discrete norm scale, cut-off, monitor.
//! - [`noise`]: counter-based truncated cylindrical Brownian increments.
//! - [`stepper`]: frozen-coefficient segment solver, Picard iteration,
//!   regularity-constant estimation, cut-off budget selection.
//! - [`localizer`]: segment gluing, truncation hierarchy, termination
//!   classification.
//! - [`models`]: concrete divergence / non-divergence models and the
//!   analytic verifiers (scalar oracle, power approximants, moment and
//!   energy checks).
//! - [`harness`]: experiment configuration, orchestration, CSV/JSON output.

pub mod harness;
pub mod localizer;
pub mod models;
pub mod noise;
pub mod spaces;
pub mod stepper;

/// Unified error type for the whole crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A field contained NaN or infinite entries where finite data was required.
    #[error("non-finite field")]
    NonFiniteField,
    /// Invalid configuration or parameters, detected before any solve.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// A coefficient failed the uniform positivity check.
    #[error("ellipticity violated")]
    EllipticityViolated,
    /// Runtime failure inside a solver (linear solve breakdown and similar).
    #[error("solver failure: {0}")]
    Solver(String),
    /// The cut-off budget cannot be satisfied with the given constants.
    #[error("smallness condition unsatisfiable")]
    SmallnessUnsatisfiable,
    /// Fixed-point iteration hit its cap without a contracting tail.
    #[error("no contraction after {0} iterations")]
    NoContraction(usize),
    /// A sampled-property battery found a violation.
    #[error("property violated: {0}")]
    PropertyViolated(String),
    /// Filesystem or serialization failure while emitting results.
    #[error("output failure: {0}")]
    Output(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 invalid config, 3 solver error,
    /// 4 property violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::PropertyViolated(_) => 4,
            _ => 3,
        }
    }
}
