//! Sparse structural covariance steering for discrete-time linear stochastic systems.
//!
//! The crate finds a sparse additive intervention `U` on the system matrix of
//! `x(k+1) = (A + U) x(k) + B w(k)` so that the stationary state covariance
//! approaches a target, measured by the Gaussian KL divergence.
//!
//! * [`linalg`]: matrix newtypes and stability / definiteness predicates.
//! * [`lyapunov`]: primal and adjoint discrete Lyapunov solvers plus a brute-force oracle.
//! * [`objective`]: Gaussian KL divergence and its covariance gradient.
//! * [`steering`]: adjoint gradient, soft-thresholding and the proximal gradient loop.
//! * [`experiment`]: trajectory sampling, PCA projection, λ sweeps and file emission.
//! * [`config`], [`cli`]: TOML configuration and the `covsteer` binary.

pub mod cli;
pub mod config;
pub mod experiment;
pub mod linalg;
pub mod lyapunov;
pub mod objective;
pub mod output;
pub mod steering;

pub use config::ExperimentConfig;
pub use linalg::{RectMatrix, SquareMatrix, SymmetricMatrix};
pub use steering::{solve, SolveResult, SolveStatus, SolverConfig, SteeringProblem, Support};
