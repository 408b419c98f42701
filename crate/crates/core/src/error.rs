use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("generator is not square: {rows} rows, row {row} has {len} entries")]
    NotSquare { rows: usize, row: usize, len: usize },
    #[error("negative intensity a[{i}][{j}] = {value}")]
    NegativeIntensity { i: usize, j: usize, value: f64 },
    #[error("row {row} of the generator sums to {sum}, expected 0")]
    RowSumNonzero { row: usize, sum: f64 },
    #[error("regime index {0} out of range")]
    StateOutOfRange(usize),
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("weights must be non-negative and sum to one: {0}")]
    InvalidWeights(String),
    #[error("empty sample")]
    EmptySample,
    #[error("matrix block {block} is singular")]
    Singular { block: String },
    #[error("positive-definiteness violated in {block} (piece {piece}, regime {regime}): smallest eigenvalue {min_eigenvalue:.3e}")]
    PdViolation { block: String, piece: usize, regime: usize, min_eigenvalue: f64 },
    #[error("non-finite state at node {node} (scenario {scenario})")]
    NonFiniteState { node: usize, scenario: usize },
    #[error("non-finite adjoint at node {node}")]
    NonFiniteAdjoint { node: usize },
    #[error("Picard iteration did not converge after {sweeps} sweeps (last error {last_error:.3e})")]
    NoConvergence { sweeps: usize, last_error: f64 },
    #[error("homotopy step floor reached at lambda = {lambda}")]
    StepFloorReached { lambda: f64 },
    #[error("invalid lambda schedule: {0}")]
    InvalidSchedule(String),
    #[error("no non-negative Riccati root")]
    NoPsdRoot,
    #[error("game structure violated: {0}")]
    StructureViolation(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
