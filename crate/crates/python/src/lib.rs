//! Python bindings for `covsteer`.
//!
//! Matrices cross the boundary as lists of rows (anything that extracts to
//! `list[list[float]]`, e.g. nested lists or `ndarray.tolist()`); indices are
//! zero-based.

use std::path::PathBuf;

use covsteer::config::ExperimentConfig;
use covsteer::experiment::{self, CloudLabel};
use covsteer::linalg::{self, RectMatrix, SquareMatrix, SymmetricMatrix};
use covsteer::lyapunov;
use covsteer::objective;
use covsteer::steering::{self, SolverConfig, SteeringProblem, Support};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

type Rows = Vec<Vec<f64>>;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn square(rows: &Rows) -> PyResult<SquareMatrix> {
    SquareMatrix::from_rows(rows).map_err(value_err)
}

fn symmetric(rows: &Rows) -> PyResult<SymmetricMatrix> {
    SymmetricMatrix::from_rows(rows).map_err(value_err)
}

/// Spectral radius of a square matrix.
#[pyfunction]
fn spectral_radius(m: Rows) -> PyResult<f64> {
    linalg::spectral_radius(&square(&m)?).map_err(runtime_err)
}

/// Whether every eigenvalue of `m` has modulus below `1 - margin`.
#[pyfunction]
#[pyo3(signature = (m, margin = 0.0))]
fn is_schur_stable(m: Rows, margin: f64) -> PyResult<bool> {
    linalg::is_schur_stable(&square(&m)?, margin).map_err(runtime_err)
}

/// Solve `A X Aᵀ - X + Q = 0` for a Schur-stable `A`.
#[pyfunction]
fn solve_lyapunov(a: Rows, q: Rows) -> PyResult<Rows> {
    let rep = lyapunov::solve_primal(&square(&a)?, &symmetric(&q)?).map_err(runtime_err)?;
    Ok(rep.solution.to_rows())
}

/// Solve `Aᵀ Λ A - Λ + G = 0` for a Schur-stable `A`.
#[pyfunction]
fn solve_adjoint(a: Rows, g: Rows) -> PyResult<Rows> {
    let rep = lyapunov::solve_adjoint(&square(&a)?, &symmetric(&g)?).map_err(runtime_err)?;
    Ok(rep.solution.to_rows())
}

/// Brute-force Kronecker solve; `transpose=True` gives the adjoint form.
#[pyfunction]
#[pyo3(signature = (a, q, transpose = false))]
fn oracle_solve(a: Rows, q: Rows, transpose: bool) -> PyResult<Rows> {
    let x = lyapunov::oracle_solve_vec(&square(&a)?, &symmetric(&q)?, transpose)
        .map_err(runtime_err)?;
    Ok(x.to_rows())
}

/// `(value, gradient)` of `KL(N(0, sigma) ‖ N(0, sigma_ref))`.
#[pyfunction]
fn kl_gaussian(sigma: Rows, sigma_ref: Rows) -> PyResult<(f64, Rows)> {
    let kl =
        objective::kl_gaussian(&symmetric(&sigma)?, &symmetric(&sigma_ref)?).map_err(value_err)?;
    Ok((kl.value, kl.grad_wrt_sigma.to_rows()))
}

/// Entrywise soft-thresholding.
#[pyfunction]
fn soft_threshold(v: Rows, threshold: f64) -> PyResult<Rows> {
    if !(threshold >= 0.0) {
        return Err(PyValueError::new_err("threshold must be nonnegative"));
    }
    Ok(steering::soft_threshold(&square(&v)?, threshold).to_rows())
}

/// Terminal states of `x(k+1) = a_eff x(k) + b w(k)`, one row per trajectory.
#[pyfunction]
#[pyo3(signature = (a_eff, b, horizon = 50, num_trajectories = 1000, seed = 0))]
fn simulate_terminal_states(
    py: Python<'_>,
    a_eff: Rows,
    b: Rows,
    horizon: usize,
    num_trajectories: usize,
    seed: u64,
) -> PyResult<Rows> {
    let a = square(&a_eff)?;
    let b = RectMatrix::from_rows(&b).map_err(value_err)?;
    let cloud = py
        .detach(|| {
            experiment::simulate_terminal_states(
                &a,
                &b,
                horizon,
                num_trajectories,
                seed,
                CloudLabel::WithControl,
            )
        })
        .map_err(runtime_err)?;
    Ok(cloud
        .states
        .row_iter()
        .map(|r| r.iter().copied().collect())
        .collect())
}

/// Outcome of a proximal gradient run.
#[pyclass(module = "covsteer", frozen)]
struct SolveResult {
    #[pyo3(get)]
    u_final: Rows,
    #[pyo3(get)]
    sigma_final: Rows,
    #[pyo3(get)]
    j_final: f64,
    #[pyo3(get)]
    j_initial: f64,
    #[pyo3(get)]
    grad_fro_final: f64,
    #[pyo3(get)]
    status: String,
    #[pyo3(get)]
    budget_satisfied: bool,
    #[pyo3(get)]
    iterations: usize,
    #[pyo3(get)]
    l1_norm: f64,
    /// `(iter, J, grad_fro, step, nnz, l1_norm)` per accepted iteration.
    #[pyo3(get)]
    trace: Vec<(usize, f64, f64, f64, usize, f64)>,
}

impl From<steering::SolveResult> for SolveResult {
    fn from(r: steering::SolveResult) -> Self {
        Self {
            u_final: r.u_final.to_rows(),
            sigma_final: r.sigma_final.to_rows(),
            j_final: r.j_final,
            j_initial: r.j_initial,
            grad_fro_final: r.grad_fro_final,
            status: r.status.as_str().to_string(),
            budget_satisfied: r.budget_satisfied,
            iterations: r.iterations(),
            l1_norm: r.l1_norm(),
            trace: r
                .trace
                .iter()
                .map(|t| (t.iter, t.j, t.grad_fro, t.step, t.nnz, t.l1_norm))
                .collect(),
        }
    }
}

#[pymethods]
impl SolveResult {
    fn __repr__(&self) -> String {
        format!(
            "SolveResult(status='{}', iterations={}, j_final={}, l1_norm={})",
            self.status, self.iterations, self.j_final, self.l1_norm
        )
    }
}

/// A steering problem: dynamics `A`, noise input `B`, target `sigma_ref`,
/// the entries `U` may touch, and an optional L1 budget.
#[pyclass(module = "covsteer", frozen)]
struct Problem {
    inner: SteeringProblem,
}

#[pymethods]
impl Problem {
    /// `support=None` allows every entry; otherwise a list of `(row, col)` pairs.
    #[new]
    #[pyo3(signature = (a, b, sigma_ref, support = None, l1_budget = None))]
    fn new(
        a: Rows,
        b: Rows,
        sigma_ref: Rows,
        support: Option<Vec<(usize, usize)>>,
        l1_budget: Option<f64>,
    ) -> PyResult<Self> {
        let a = square(&a)?;
        let n = a.dim();
        let support = match support {
            None => Support::full(n),
            Some(pairs) => Support::from_pairs(n, &pairs).map_err(value_err)?,
        };
        let inner = SteeringProblem::new(
            a,
            RectMatrix::from_rows(&b).map_err(value_err)?,
            symmetric(&sigma_ref)?,
            support,
            l1_budget,
        )
        .map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    /// Stationary covariance of `A + u`.
    fn covariance(&self, u: Rows) -> PyResult<Rows> {
        let s = self.inner.covariance(&square(&u)?).map_err(runtime_err)?;
        Ok(s.to_rows())
    }

    /// `J(u) = KL(Σ(u) ‖ Σ_ref)`.
    fn objective(&self, u: Rows) -> PyResult<f64> {
        self.inner.objective(&square(&u)?).map_err(runtime_err)
    }

    /// Adjoint gradient of `J` at `u`.
    fn gradient(&self, u: Rows) -> PyResult<Rows> {
        let g = steering::gradient_wrt_u(&self.inner, &square(&u)?).map_err(runtime_err)?;
        Ok(g.grad.to_rows())
    }

    /// Central-difference gradient of `J` at `u`.
    #[pyo3(signature = (u, step = 1e-5))]
    fn finite_difference_gradient(&self, u: Rows, step: f64) -> PyResult<Rows> {
        let g = steering::finite_difference_gradient(&self.inner, &square(&u)?, step)
            .map_err(runtime_err)?;
        Ok(g.to_rows())
    }

    #[pyo3(signature = (
        *,
        eta = 0.1,
        lambda_ = 0.5,
        epsilon = 1e-6,
        max_iter = 100,
        u0 = None,
        stability_margin = 1e-6,
        backtrack_factor = 0.5,
        max_backtracks = 30
    ))]
    #[allow(clippy::too_many_arguments)]
    fn solve(
        &self,
        py: Python<'_>,
        eta: f64,
        lambda_: f64,
        epsilon: f64,
        max_iter: usize,
        u0: Option<Rows>,
        stability_margin: f64,
        backtrack_factor: f64,
        max_backtracks: usize,
    ) -> PyResult<SolveResult> {
        let config = SolverConfig {
            eta,
            lambda: lambda_,
            epsilon,
            max_iter,
            u0: u0.as_ref().map(square).transpose()?,
            stability_margin,
            backtrack_factor,
            max_backtracks,
        };
        config.validate().map_err(value_err)?;
        let result = py
            .detach(|| steering::solve(&self.inner, &config))
            .map_err(runtime_err)?;
        Ok(result.into())
    }

    fn __repr__(&self) -> String {
        format!(
            "Problem(dim={}, support_size={})",
            self.inner.dim(),
            self.inner.support().len()
        )
    }
}

/// Load a TOML experiment config and run its solver settings.
#[pyfunction]
#[pyo3(signature = (path, overrides = None))]
fn solve_config(
    py: Python<'_>,
    path: PathBuf,
    overrides: Option<Vec<String>>,
) -> PyResult<SolveResult> {
    let config =
        ExperimentConfig::load(&path, &overrides.unwrap_or_default()).map_err(value_err)?;
    let result = py
        .detach(|| steering::solve(&config.problem, &config.solver))
        .map_err(runtime_err)?;
    Ok(result.into())
}

#[pymodule(name = "covsteer")]
fn covsteer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Problem>()?;
    m.add_class::<SolveResult>()?;
    m.add_function(wrap_pyfunction!(spectral_radius, m)?)?;
    m.add_function(wrap_pyfunction!(is_schur_stable, m)?)?;
    m.add_function(wrap_pyfunction!(solve_lyapunov, m)?)?;
    m.add_function(wrap_pyfunction!(solve_adjoint, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_solve, m)?)?;
    m.add_function(wrap_pyfunction!(kl_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(soft_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_terminal_states, m)?)?;
    m.add_function(wrap_pyfunction!(solve_config, m)?)?;
    Ok(())
}
