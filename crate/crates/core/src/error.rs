use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("total dimension {dim} exceeds the dense-diagonalization cap {cap}")]
    DimensionCap { dim: usize, cap: usize },

    #[error(
        "degenerate spectrum: smallest level gap {gap:e} is not above tolerance {tolerance:e}"
    )]
    Degenerate { gap: f64, tolerance: f64 },

    #[error("matrix is not Hermitian (max |A - A^dagger| = {deviation:e})")]
    NotHermitian { deviation: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("site {site} is outside the environment chain of {n_sites} sites")]
    InvalidSite { site: usize, n_sites: usize },

    #[error("eigensolver did not converge")]
    EigenFailure,

    #[error("index {index} out of range (length {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("epsilon must lie in (0, 1), got {0}")]
    InvalidEpsilon(f64),

    #[error("energy window [{lo}, {hi}] contains no states")]
    EmptyWindow { lo: f64, hi: f64 },

    #[error("energy shell [{start}, {end}] contains no states")]
    EmptyShell { start: f64, end: f64 },

    #[error("shell center sits at fraction {fraction:.3} of the spectrum, outside the allowed middle {allowed:.2}")]
    ShellNearEdge { fraction: f64, allowed: f64 },

    #[error("need at least {required} levels, found {found}")]
    TooFewLevels { found: usize, required: usize },

    #[error("need at least {required} bins, got {found}")]
    TooFewBins { found: usize, required: usize },

    #[error("density estimate vanishes inside the fit window")]
    ZeroDensity,

    #[error("interaction is not of the form H^IS (x) I^E")]
    NotSolvableForm,

    #[error("missing ETH statistics for interaction term {0}")]
    MissingEthStats(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}
