use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("empty grid")]
    EmptyGrid,
    #[error("grid not strictly increasing at index {0}")]
    UnsortedGrid(usize),
    #[error("grid and values differ in length ({grid} vs {values})")]
    LengthMismatch { grid: usize, values: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("not convex: slopes at nodes {0}, {1}, {2} decrease ({3} > {4})")]
    NonConvex(usize, usize, usize, f64, f64),
    #[error("{what} = {value} outside domain [{lo}, {hi}]")]
    OutOfDomain {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("graph is empty")]
    EmptyGraph,
    #[error("graph not monotone: samples {0} and {1} give pairing {2} < 0")]
    NonMonotone(usize, usize, f64),
    #[error("representative inequality violated by {violation} (tolerance {tol}); sampling too coarse")]
    Representation { violation: f64, tol: f64 },
    #[error("evaluation hit the clipped (infinite) region of a conjugate")]
    Clipped,
    #[error("{solver} did not converge after {iterations} iterations (residual {residual})")]
    NoConvergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },
    #[error("mesh incompatible with period: {0}")]
    Mesh(String),
    #[error("inclusion certificate failed at node {node}: residual {residual}")]
    InclusionRejected { node: usize, residual: f64 },
    #[error("certificate part {part} = {value} below tolerance {tol}")]
    NegativeCertificate {
        part: &'static str,
        value: f64,
        tol: f64,
    },
    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
