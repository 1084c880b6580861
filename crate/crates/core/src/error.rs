use thiserror::Error;

/// Errors produced by the simulation library.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch: {context} (left {left:?}, right {right:?})")]
    ShapeMismatch {
        context: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("operator is not Hermitian: max|A - A^dag| = {deviation:.3e} exceeds {tolerance:.3e}")]
    NonHermitian { deviation: f64, tolerance: f64 },

    #[error("eigenvalue {value:.6e} below floor -{floor:.3e}; operator is not positive semidefinite")]
    NegativeEigenvalue { value: f64, floor: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("operator basis incompatible with phase grid: {0}")]
    IncompatibleBasis(String),

    #[error("resolution error: {0}")]
    Resolution(String),

    #[error("unknown axis {0}; expected 0 (Q) or 1 (P)")]
    UnknownAxis(usize),

    #[error("derivative order {0} unsupported (must be 1 or 2)")]
    UnsupportedDerivativeOrder(usize),

    #[error("star product order {0} unsupported (must be 0, 1, or 2)")]
    UnsupportedStarOrder(usize),

    #[error("closed-form derivative unavailable: {0}")]
    DerivativeUnavailable(String),

    #[error(
        "integrator instability at t = {time:.6}: {what}; try dt <= {suggested_dt:.3e}"
    )]
    IntegratorInstability {
        time: f64,
        what: String,
        suggested_dt: f64,
    },

    #[error("time {time:.6} outside reference range [{t0:.6}, {t1:.6}]")]
    OutOfRange { time: f64, t0: f64, t1: f64 },

    #[error("reference state degenerate at t = {time:.6}: eigenvalue {value:.3e}")]
    ReferenceDegeneracy { time: f64, value: f64 },

    #[error(
        "CFL bound violated: dt = {dt:.3e} exceeds stable limit {limit:.3e}"
    )]
    CflViolation { dt: f64, limit: f64 },

    #[error("solution lost positivity: min value {min:.3e} below tolerance")]
    Instability { min: f64 },

    #[error("diffusion matrix not positive semidefinite: eigenvalue {value:.3e} at grid point ({i}, {j})")]
    PsdViolation { value: f64, i: usize, j: usize },

    #[error("matrix asymmetry {0:.3e} beyond tolerance")]
    Asymmetry(f64),

    #[error("particle {particle} diverged at step {step}")]
    Divergence { particle: usize, step: usize },

    #[error("ensemble is empty")]
    EmptyEnsemble,

    #[error("undersampled: no bin reached {required} counts (max was {max_count})")]
    Undersampled { required: usize, max_count: usize },

    #[error("hbar sweep needs at least 3 distinct values, got {0}")]
    InsufficientSweep(usize),

    #[error("duplicate hbar value {0} in sweep")]
    DuplicateSweepValue(f64),

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Configuration errors carry a distinct code per failure class so the CLI
/// can map them to exit codes.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file not found: {0}")]
    MissingFile(String),

    #[error("config syntax error: {0}")]
    Syntax(String),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("config constraint violated: {0}")]
    Constraint(String),

    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),

    #[error("unknown pipeline `{0}`")]
    UnknownPipeline(String),

    #[error("bad override `{0}`: expected key=value")]
    BadOverride(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
