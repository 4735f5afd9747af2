use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not symmetric: relative asymmetry {asymmetry:.3e} exceeds {tol:.3e}")]
    NonSymmetric { asymmetry: f64, tol: f64 },
    #[error("matrix is not positive semi-definite: min eigenvalue {min_eig:.3e} below {tol:.3e}")]
    NotPsd { min_eig: f64, tol: f64 },
    #[error("data covariance is numerically singular (condition number {cond:.3e})")]
    SingularDataCovariance { cond: f64 },
    #[error("ensemble has {got} members, need at least {need}")]
    TooFewMembers { got: usize, need: usize },
    #[error("ensembles have mismatched member counts: {a} vs {b}")]
    MemberCountMismatch { a: usize, b: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value encountered in {what}")]
    NonFinite { what: &'static str },
    #[error("inner step {dt:.3e} does not divide interval {interval:.3e}")]
    StepMismatch { interval: f64, dt: f64 },
    #[error("ensemble covariance has numerical rank {rank} < state dimension {dim}")]
    RankDeficientState { rank: usize, dim: usize },
    #[error("free matrix is outside the admissible transport family (min eigenvalue {min_eig:.3e})")]
    NotInFamily { min_eig: f64 },
    #[error("selector orthogonal factor is not orthogonal (deviation {dev:.3e})")]
    NotOrthogonal { dev: f64 },
    #[error("forward map matrix must be square and invertible")]
    SingularForward,
    #[error("all grid weights underflowed to zero")]
    GridUnderflow,
    #[error("paths are misaligned: {0}")]
    Alignment(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
