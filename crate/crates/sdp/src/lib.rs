//! Primal-dual interior-point solver for small, dense, block-structured
//! semidefinite programs, plus reading and writing of the SDPA sparse format.

mod error;
mod linalg;
mod problem;
mod reduce;
pub mod sdpa;
mod solver;
mod verify;

pub use error::SdpError;
pub use problem::{Entry, LinearEquality, SdpProblem, Sense};
pub use reduce::Reduction;
pub use solver::{solve, Certificate, IterationLog, SdpSolution, SolveStatus, SolverOptions};
pub use verify::{certified_bound, verify, ResidualReport};
