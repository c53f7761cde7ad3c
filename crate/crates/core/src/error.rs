use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid duct: {0}")]
    InvalidDuct(String),
    #[error("infeasible obstruction geometry: {0}")]
    Infeasible(String),
    #[error("arc parameter {s} outside [0, {extent}]")]
    ArcParameter { s: f64, extent: f64 },
    #[error("point ({0}, {1}) is not on the fluid boundary")]
    OffBoundary(f64, f64),
    #[error("invalid node request: {0}")]
    NodeRequest(String),
    #[error("measurement geometry: {0}")]
    Measurement(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("invalid kernel configuration: {0}")]
    Config(String),
    #[error("kernel derivative of order {order} is singular at r = 0")]
    Singular { order: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("collocation system is numerically rank deficient (condition estimate {condition:.3e})")]
    RankDeficient { condition: f64 },
    #[error("linear solve failed at step {step} (t = {time}): {detail}")]
    Step { step: usize, time: f64, detail: String },
    #[error("integration diverged at step {step}: |u| = {norm:.3e}")]
    Divergence { step: usize, norm: f64 },
    #[error("invalid time stepping: {0}")]
    TimeGrid(String),
    #[error("point ({0}, {1}) lies outside the fluid domain")]
    OutsideDomain(f64, f64),
    #[error("{0}")]
    Eigen(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WaveError {
    #[error("CFL condition violated: number {0:.4} > 1")]
    Cfl(f64),
    #[error("invalid wave grid: {0}")]
    Grid(String),
    #[error("boundary datum: {0}")]
    Datum(String),
    #[error("coupling: {0}")]
    Coupling(String),
    #[error("grid mismatch: {0}")]
    Mismatch(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InversionError {
    #[error(transparent)]
    Wave(#[from] WaveError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("invalid problem: {0}")]
    Problem(String),
    #[error("chain error: {0}")]
    Chain(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Wave(#[from] WaveError),
    #[error(transparent)]
    Inversion(#[from] InversionError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("malformed file {path}: {detail}")]
    Parse { path: String, detail: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors that originate in user-supplied configuration.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Geometry(_)
                | Error::Kernel(KernelError::Config(_))
                | Error::Wave(WaveError::Cfl(_))
                | Error::Wave(WaveError::Grid(_))
                | Error::Parse { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
