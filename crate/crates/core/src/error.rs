use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("invalid schedule: {0}")]
    InvalidSpec(String),
    #[error("time {t} outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("grid ends at {grid} but schedule horizon is {horizon}")]
    GridMismatch { grid: f64, horizon: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("prox solver did not converge after {iterations} iterations (best gradient residual {best_residual:e})")]
    SolverFailed {
        best_residual: f64,
        iterations: usize,
    },
    #[error("score is not available from a {0} oracle")]
    ScoreUnavailable(&'static str),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("step size gamma = {gamma} at step {step} violates gamma < 2")]
    StepSize { step: usize, gamma: f64 },
    #[error("oracle failure at step {step}, chain {chain}: {source}")]
    Oracle {
        step: usize,
        chain: usize,
        #[source]
        source: OracleError,
    },
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("unsupported size: {0}")]
    UnsupportedSize(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("method/target combination is not affine: {0}")]
    NotAffine(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss at iteration {iteration} (phase {phase})")]
    NonFinite { iteration: usize, phase: usize },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("malformed data: {0}")]
    Malformed(String),
}

/// Failure of a single sampler update.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum StepError {
    #[error("step size gamma = {0} violates gamma < 2")]
    StepSize(f64),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("invalid fixture: {0}")]
    InvalidFixture(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}
