use thiserror::Error;

/// Why an LMI solve gave up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LmiFailure {
    /// The best achievable minimum eigenvalue is provably non-positive
    /// (up to the barrier duality gap).
    Disproved,
    /// The solver hit its iteration cap without finding a strictly feasible point.
    NotConverged,
    /// A feasible point exists but its margin is below the requested `eps_pd`.
    MarginTooSmall,
}

impl std::fmt::Display for LmiFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LmiFailure::Disproved => write!(f, "infeasibility certified by the barrier bound"),
            LmiFailure::NotConverged => {
                write!(f, "no feasible point found within the iteration cap")
            }
            LmiFailure::MarginTooSmall => write!(f, "feasible margin below the requested eps_pd"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("decomposition failed: {0}")]
    DecompositionFailure(String),

    #[error("pencil (E, A) is not regular at any sampled shift ({trials} trials)")]
    NotRegular { trials: usize },

    #[error("shift s0 = {s0} makes s0*E - A singular or ill-conditioned (cond = {cond:e})")]
    BadShift { s0: f64, cond: f64 },

    #[error("horizon too short: need at least {needed} inputs, got {got}")]
    InsufficientHorizon { needed: usize, got: usize },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("no singular-value gap with ratio >= {min_ratio}; refusing a verdict (spectrum {singular_values:?})")]
    AmbiguousSpectrum {
        singular_values: Vec<f64>,
        min_ratio: f64,
    },

    #[error("system has no slow part (n1 = 0); nothing to stabilize")]
    NothingToStabilize,

    #[error("LMI infeasible: {reason} (best minimum eigenvalue {best_min_eig:e})")]
    LmiInfeasible {
        reason: LmiFailure,
        best_min_eig: f64,
    },

    #[error("degenerate certificate: {0}")]
    DegenerateCertificate(String),

    #[error("persistency of excitation fails: rank {rank} < {expected}")]
    NotPersistent { rank: usize, expected: usize },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
