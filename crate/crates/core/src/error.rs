use thiserror::Error;

/// Failure modes surfaced by samplers, solvers, and couplings.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid run configuration (grid shape, initial state, parameter ranges).
    #[error("configuration error: {0}")]
    Config(String),

    /// Drift or diffusion evaluated to a non-finite value along a trajectory.
    #[error("non-finite dynamics at state {state:?}")]
    NonFinite { state: Vec<f64> },

    /// The requested integrator cannot handle the model (missing diffusion
    /// gradient, non-diagonal noise).
    #[error("unsupported scheme: {0}")]
    UnsupportedScheme(String),

    /// Bridge crossing probability requested with a non-positive strength.
    #[error("bridge strength must be positive, got {0}")]
    InvalidBridgeStrength(f64),

    /// No killing events were observed, so the killing rate is undefined.
    #[error("no killing events observed")]
    NoKillingObserved,

    /// The constrained system lost row rank during factorization.
    #[error("rank-deficient constraint system{}", block_label(.block))]
    RankDeficient { block: Option<usize> },

    /// A diagnostic was requested on a system too large for dense treatment.
    #[error("diagnostic unavailable: {0}")]
    DiagnosticUnavailable(String),

    /// The exponential tail fit could not be carried out.
    #[error("tail fit rejected: {0}")]
    FitRejected(String),

    /// A contraction factor outside (0, 1) cannot bound the Wasserstein gap.
    #[error("invalid contraction: gamma = {gamma}, horizon = {horizon}")]
    InvalidContraction { gamma: f64, horizon: f64 },

    /// Reflection coupling has no reflection direction when the chains agree.
    #[error("degenerate reflection direction: chains are at the same state")]
    DegenerateDirection,

    /// The maximal-coupling rejection loop exceeded its iteration cap.
    #[error("maximal coupling rejection loop exceeded {0} iterations")]
    LoopOverflow(usize),

    /// Two grids that must match (solver input vs reference) do not.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// Unknown experiment name.
    #[error("unknown experiment `{0}`")]
    UnknownExperiment(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed input file (density CSV, tau list).
    #[error("parse error: {0}")]
    Parse(String),
}

fn block_label(block: &Option<usize>) -> String {
    match block {
        Some(b) => format!(" in block {b}"),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;
