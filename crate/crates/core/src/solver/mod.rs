//! Robust kernels, a sparse Levenberg-Marquardt minimizer and an ADMM solver
//! for L1 problems with lower-bounded scale unknowns.

pub mod admm;
pub mod kernel;
pub mod lm;
mod problem;
mod sparse;

pub use admm::{admm_l1, AdmmL1Problem, AdmmOptions, AdmmResult};
pub use kernel::{kernel_weight, KernelKind, RobustKernel};
pub use lm::{check_jacobian, levenberg_marquardt, LmOptions, LmStatus, LmSummary};
pub(crate) use sparse::SparseSpd;
pub use problem::{BlockId, BlockKind, CostFunction, ParameterBlock, Problem};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SolverError {
    #[error("normal equations are not positive definite")]
    NotPositiveDefinite,
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("damping exceeded its upper limit without an acceptable step")]
    DampingExceeded,
    #[error("under-constrained variables {0:?}")]
    UnderConstrained(Vec<usize>),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}
