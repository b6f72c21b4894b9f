use thiserror::Error;

use crate::model::ExprError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("invalid problem: {0}")]
    Structural(String),
    #[error("problem file: {0}")]
    ProblemFile(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("simulation failed on path {path}, step {step}: {source}")]
    Simulation {
        path: usize,
        step: usize,
        source: ExprError,
    },
    #[error("explicit scheme unstable: dt = {dt} exceeds bound {bound}")]
    Unstable { dt: f64, bound: f64 },
    #[error("sigma sigma^T not positive semidefinite at {location:?} (eigenvalue {eigenvalue})")]
    NotPsd { location: Vec<f64>, eigenvalue: f64 },
    #[error("obstacle iteration at time level {level} did not settle within {iters} passes (residual {residual})")]
    PolicyIteration {
        level: usize,
        iters: usize,
        residual: f64,
    },
    #[error("linear solve failed at time level {level}: {reason}")]
    LinearSolve { level: usize, reason: String },
    #[error("trinomial probabilities infeasible at level {level}, x = {x}: {probs:?}")]
    InfeasibleChain {
        level: usize,
        x: f64,
        probs: [f64; 3],
    },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("{truncated} of {total} paths left the grid box")]
    TooManyTruncated { truncated: usize, total: usize },
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;
