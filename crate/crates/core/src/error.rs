use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate node id {0}")]
    DuplicateNode(u32),
    #[error("unknown node id {0}")]
    UnknownNode(u32),
    #[error("node {node} has no phase {phase}")]
    MissingPhase { node: u32, phase: char },
    #[error("network is disconnected: {0}")]
    Disconnected(String),
    #[error("admittance matrix Y_LL is singular")]
    SingularAdmittance,
    #[error("invalid feeder description: {0}")]
    InvalidFeeder(String),
    #[error("zero voltage at loaded phase/connection {index}")]
    ZeroVoltage { index: usize },
    #[error("power flow did not converge after {iterations} iterations (residual {residual:e})")]
    PowerFlowNonConvergence { iterations: usize, residual: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("node {node} is not metered as a {connection} connection")]
    WrongConnection { node: u32, connection: &'static str },
    #[error("averaging window {window}s is not a multiple of the resolution {resolution}s")]
    WindowNotMultiple { window: f64, resolution: f64 },
    #[error("batch solver stopped after {iterations} iterations with gradient norm {grad_norm:e}")]
    BatchNonConvergence { iterations: usize, grad_norm: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("stream out of order: frame k={got} after k={prev}")]
    OutOfOrder { prev: u64, got: u64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
