use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent input (dimensions, ranges, topology).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A numerical routine failed to converge or produced garbage.
    #[error("numerical failure in {routine}: {detail}")]
    Numerical { routine: &'static str, detail: String },

    /// An invariant of a constraint schedule or region was violated.
    #[error("invariant violated at t = {t}: {detail}")]
    Invariant { t: f64, detail: String },

    /// The transmission-zero rank condition fails for an agent.
    #[error("agent {agent}: transmission-zero rank condition fails (rank {rank}, need {required})")]
    TransmissionZero {
        agent: usize,
        rank: usize,
        required: usize,
    },

    /// The regulator equations have no solution within tolerance.
    #[error("regulator infeasible: residual {residual:.3e} exceeds {tolerance:.1e}")]
    RegulatorInfeasible { residual: f64, tolerance: f64 },

    /// A supplied feedback gain does not make the closed loop Hurwitz.
    #[error("gain is not stabilizing; offending eigenvalues: {eigenvalues}")]
    NotStabilizing { eigenvalues: String },

    /// Gain synthesis (Riccati or pole placement) failed.
    #[error("stabilizer synthesis failed: {0}")]
    Synthesis(String),

    /// The barrier function is negative at the initial condition.
    #[error("initial condition violates the barrier: h(0) = {h0:.6e} < 0")]
    UnsafeInitialCondition { h0: f64 },

    /// The integrated state became non-finite.
    #[error("simulation diverged at t = {t}")]
    Divergence { t: f64 },

    /// An iterative solver exhausted its iteration budget.
    #[error("{routine} did not converge within {iterations} iterations (last step {last_step:.3e})")]
    NonConvergence {
        routine: &'static str,
        iterations: usize,
        last_step: f64,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numerical(routine: &'static str, detail: impl Into<String>) -> Self {
        Error::Numerical {
            routine,
            detail: detail.into(),
        }
    }
}
