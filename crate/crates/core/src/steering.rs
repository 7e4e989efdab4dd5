//! Sparse structural covariance steering.
//!
//! Given `x(k+1) = (A + U) x(k) + B w(k)` and a target covariance `Σ_ref`,
//! [`solve`] searches for a sparse `U` minimizing
//! `J(U) + λ‖U‖₁` with `J(U) = KL(Σ(U) ‖ Σ_ref)` and `Σ(U)` the stationary
//! covariance. The gradient of `J` comes from one primal and one adjoint
//! Lyapunov solve ([`gradient_wrt_u`]); the L1 term is handled by
//! soft-thresholding ([`prox_step`]).
//!
//! Each iteration backtracks the step until the candidate keeps `A + U`
//! Schur stable (with a margin) and does not increase the composite
//! objective.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::linalg::{
    entrywise_l1_norm, frobenius_norm, is_schur_stable, spectral_radius, LinalgError, RectMatrix,
    SquareMatrix, SymmetricMatrix,
};
use crate::lyapunov::{solve_adjoint, solve_primal, LyapunovError};
use crate::objective::{GaussianReference, ObjectiveError};

/// Slack allowed on the composite objective before a step is rejected.
pub const MONOTONE_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SteeringError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("invalid solver config: {0}")]
    InvalidConfig(String),
    #[error("A + U0 is not Schur stable (spectral radius {spectral_radius})")]
    InfeasibleStart { spectral_radius: f64 },
    #[error("perturbing entry ({row}, {col}) by {step:e} destabilizes A + U")]
    PerturbationUnstable { row: usize, col: usize, step: f64 },
    #[error(transparent)]
    Lyapunov(#[from] LyapunovError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, SteeringError>;

/// Index pairs `(row, col)` of `U` that may be nonzero. Indices are zero-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Support {
    dim: usize,
    mask: Vec<bool>,
}

impl Support {
    pub fn full(dim: usize) -> Self {
        Self {
            dim,
            mask: vec![true; dim * dim],
        }
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            mask: vec![false; dim * dim],
        }
    }

    pub fn from_pairs(dim: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut s = Self::empty(dim);
        for &(r, c) in pairs {
            if r >= dim || c >= dim {
                return Err(SteeringError::InvalidProblem(format!(
                    "support pair ({r}, {c}) out of range for n = {dim}"
                )));
            }
            s.mask[r * dim + c] = true;
        }
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row < self.dim && col < self.dim && self.mask[row * self.dim + col]
    }

    pub fn len(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_full(&self) -> bool {
        self.mask.iter().all(|m| *m)
    }

    /// Row-major list of admissible pairs.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        (0..self.dim)
            .flat_map(|r| (0..self.dim).map(move |c| (r, c)))
            .filter(|&(r, c)| self.contains(r, c))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SteeringProblem {
    a: SquareMatrix,
    b: RectMatrix,
    noise: SymmetricMatrix,
    reference: GaussianReference,
    support: Support,
    l1_budget: Option<f64>,
}

impl SteeringProblem {
    /// `l1_budget = None` means the budget audit always passes.
    pub fn new(
        a: SquareMatrix,
        b: RectMatrix,
        sigma_ref: SymmetricMatrix,
        support: Support,
        l1_budget: Option<f64>,
    ) -> Result<Self> {
        let n = a.dim();
        if b.nrows() != n {
            return Err(SteeringError::InvalidProblem(format!(
                "B has {} rows, A is {n}x{n}",
                b.nrows()
            )));
        }
        if sigma_ref.dim() != n {
            return Err(SteeringError::InvalidProblem(format!(
                "sigma_ref is {0}x{0}, A is {n}x{n}",
                sigma_ref.dim()
            )));
        }
        if support.dim() != n {
            return Err(SteeringError::InvalidProblem(format!(
                "support is for n = {}, A is {n}x{n}",
                support.dim()
            )));
        }
        if let Some(m) = l1_budget {
            if !(m >= 0.0) || !m.is_finite() {
                return Err(SteeringError::InvalidProblem(format!(
                    "l1_budget must be a finite nonnegative number, got {m}"
                )));
            }
        }
        let reference = GaussianReference::new(sigma_ref)?;
        let noise = b.gram();
        Ok(Self {
            a,
            b,
            noise,
            reference,
            support,
            l1_budget,
        })
    }

    pub fn dim(&self) -> usize {
        self.a.dim()
    }

    pub fn a(&self) -> &SquareMatrix {
        &self.a
    }

    pub fn b(&self) -> &RectMatrix {
        &self.b
    }

    /// `B Bᵀ`.
    pub fn noise_covariance(&self) -> &SymmetricMatrix {
        &self.noise
    }

    pub fn sigma_ref(&self) -> &SymmetricMatrix {
        self.reference.sigma_ref()
    }

    pub fn reference(&self) -> &GaussianReference {
        &self.reference
    }

    pub fn support(&self) -> &Support {
        &self.support
    }

    pub fn l1_budget(&self) -> Option<f64> {
        self.l1_budget
    }

    /// `A + u`.
    pub fn closed_loop(&self, u: &SquareMatrix) -> Result<SquareMatrix> {
        Ok(self.a.add(u)?)
    }

    /// Stationary covariance `Σ(u)`.
    pub fn covariance(&self, u: &SquareMatrix) -> Result<SymmetricMatrix> {
        Ok(solve_primal(&self.closed_loop(u)?, &self.noise)?.solution)
    }

    /// `J(u) = KL(Σ(u) ‖ Σ_ref)` without the gradient.
    pub fn objective(&self, u: &SquareMatrix) -> Result<f64> {
        Ok(self.reference.kl_value(&self.covariance(u)?)?)
    }

    pub fn budget_satisfied(&self, u: &SquareMatrix) -> bool {
        self.l1_budget.is_none_or(|m| entrywise_l1_norm(u) <= m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub eta: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub max_iter: usize,
    /// Initial guess; `None` starts from the zero matrix.
    pub u0: Option<SquareMatrix>,
    pub stability_margin: f64,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            eta: 0.1,
            lambda: 0.5,
            epsilon: 1e-6,
            max_iter: 100,
            u0: None,
            stability_margin: 1e-6,
            backtrack_factor: 0.5,
            max_backtracks: 30,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SteeringError::InvalidConfig(msg));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be nonnegative, got {}", self.lambda));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.max_iter == 0 {
            return bad("max_iter must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.stability_margin) {
            return bad(format!(
                "stability_margin must lie in [0, 1), got {}",
                self.stability_margin
            ));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return bad(format!(
                "backtrack_factor must lie in (0, 1), got {}",
                self.backtrack_factor
            ));
        }
        if self.max_backtracks == 0 {
            return bad("max_backtracks must be at least 1".into());
        }
        Ok(())
    }
}

/// Output of [`gradient_wrt_u`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEvaluation {
    /// Dense `dJ/dU = 2 Λ (A + U) Σ`, not restricted to the support.
    pub grad: SquareMatrix,
    pub sigma: SymmetricMatrix,
    /// Adjoint solution `Λ`.
    pub adjoint: SymmetricMatrix,
    pub j: f64,
}

/// `dJ/dU` at `u` from the primal and adjoint Lyapunov solutions.
pub fn gradient_wrt_u(problem: &SteeringProblem, u: &SquareMatrix) -> Result<GradientEvaluation> {
    let a_u = problem.closed_loop(u)?;
    let sigma = solve_primal(&a_u, problem.noise_covariance())?.solution;
    let kl = problem.reference().kl(&sigma)?;
    let adjoint = solve_adjoint(&a_u, &kl.grad_wrt_sigma)?.solution;
    let grad = adjoint.as_matrix() * a_u.as_matrix() * sigma.as_matrix() * 2.0;
    Ok(GradientEvaluation {
        grad: SquareMatrix::new(grad)?,
        sigma,
        adjoint,
        j: kl.value,
    })
}

/// Central differences of `J` over the on-support entries of `u`.
pub fn finite_difference_gradient(
    problem: &SteeringProblem,
    u: &SquareMatrix,
    step: f64,
) -> Result<SquareMatrix> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(SteeringError::InvalidConfig(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let n = problem.dim();
    let mut out = DMatrix::<f64>::zeros(n, n);
    for (r, c) in problem.support().pairs() {
        let j_at = |delta: f64| -> Result<f64> {
            let mut m = u.as_matrix().clone();
            m[(r, c)] += delta;
            let shifted = SquareMatrix::new(m)?;
            if !is_schur_stable(&problem.closed_loop(&shifted)?, 0.0)? {
                return Err(SteeringError::PerturbationUnstable {
                    row: r,
                    col: c,
                    step,
                });
            }
            problem.objective(&shifted)
        };
        let plus = j_at(step)?;
        let minus = j_at(-step)?;
        out[(r, c)] = (plus - minus) / (2.0 * step);
    }
    Ok(SquareMatrix::new(out)?)
}

/// Entrywise shrinkage towards zero; `|v| <= t` maps to exactly zero.
pub fn soft_threshold(v: &SquareMatrix, threshold: f64) -> SquareMatrix {
    debug_assert!(threshold >= 0.0);
    let m = v.as_matrix().map(|x| soft_threshold_scalar(x, threshold));
    SquareMatrix::new(m).expect("shrinkage preserves finiteness")
}

pub fn soft_threshold_scalar(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Zero every entry outside `support`.
pub fn project_support(u: &SquareMatrix, support: &Support) -> SquareMatrix {
    let n = u.dim();
    let m = DMatrix::from_fn(n, n, |r, c| {
        if support.contains(r, c) {
            u.get(r, c)
        } else {
            0.0
        }
    });
    SquareMatrix::new(m).expect("projection preserves finiteness")
}

/// One projected proximal-gradient update: shrink `u - eta * grad` by `eta * lambda`,
/// then restrict to `support`.
pub fn prox_step(
    u: &SquareMatrix,
    grad: &SquareMatrix,
    eta: f64,
    lambda: f64,
    support: &Support,
) -> Result<SquareMatrix> {
    let v = SquareMatrix::new(u.as_matrix() - grad.as_matrix() * eta)?;
    Ok(project_support(&soft_threshold(&v, eta * lambda), support))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    ConvergedGradNorm,
    MaxIterations,
    StalledUnstable,
}

impl SolveStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::ConvergedGradNorm => "converged_grad_norm",
            SolveStatus::MaxIterations => "max_iterations",
            SolveStatus::StalledUnstable => "stalled_unstable",
        }
    }
}

/// State after accepted iteration `iter`.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    /// `J` at the new iterate.
    pub j: f64,
    /// Frobenius norm of the support-restricted gradient at the new iterate.
    pub grad_fro: f64,
    /// Step size that was accepted.
    pub step: f64,
    pub nnz: usize,
    pub l1_norm: f64,
    pub backtracks: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SolveTrace {
    pub records: Vec<IterationRecord>,
}

impl SolveTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, IterationRecord> {
        self.records.iter()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub u_final: SquareMatrix,
    pub sigma_final: SymmetricMatrix,
    pub j_final: f64,
    /// `J` at the initial guess.
    pub j_initial: f64,
    /// Support-restricted gradient norm at `u_final`.
    pub grad_fro_final: f64,
    pub status: SolveStatus,
    pub budget_satisfied: bool,
    pub trace: SolveTrace,
}

impl SolveResult {
    pub fn iterations(&self) -> usize {
        self.trace.len()
    }

    pub fn l1_norm(&self) -> f64 {
        entrywise_l1_norm(&self.u_final)
    }

    pub fn nonzero_count(&self) -> usize {
        self.u_final.nonzero_count()
    }
}

struct Iterate {
    u: SquareMatrix,
    eval: GradientEvaluation,
    grad_on_support: SquareMatrix,
}

impl Iterate {
    fn new(problem: &SteeringProblem, u: SquareMatrix) -> Result<Self> {
        let eval = gradient_wrt_u(problem, &u)?;
        let grad_on_support = project_support(&eval.grad, problem.support());
        Ok(Self {
            u,
            eval,
            grad_on_support,
        })
    }

    fn composite(&self, lambda: f64) -> f64 {
        self.eval.j + lambda * entrywise_l1_norm(&self.u)
    }
}

/// Run the safeguarded proximal gradient iteration.
pub fn solve(problem: &SteeringProblem, config: &SolverConfig) -> Result<SolveResult> {
    config.validate()?;
    let n = problem.dim();
    let u0 = config.u0.clone().unwrap_or_else(|| SquareMatrix::zeros(n));
    if u0.dim() != n {
        return Err(SteeringError::InvalidConfig(format!(
            "u0 is {0}x{0}, problem is {n}x{n}",
            u0.dim()
        )));
    }
    if let Some((r, c)) = (0..n)
        .flat_map(|r| (0..n).map(move |c| (r, c)))
        .find(|&(r, c)| u0.get(r, c) != 0.0 && !problem.support().contains(r, c))
    {
        return Err(SteeringError::InvalidConfig(format!(
            "u0 has a nonzero entry at ({r}, {c}) outside the support"
        )));
    }
    let start = problem.closed_loop(&u0)?;
    if !is_schur_stable(&start, 0.0)? {
        return Err(SteeringError::InfeasibleStart {
            spectral_radius: spectral_radius(&start)?,
        });
    }

    let mut current = Iterate::new(problem, u0)?;
    let j_initial = current.eval.j;
    let mut trace = SolveTrace::default();
    let status = loop {
        if frobenius_norm(&current.grad_on_support) < config.epsilon {
            break SolveStatus::ConvergedGradNorm;
        }
        if trace.len() >= config.max_iter {
            break SolveStatus::MaxIterations;
        }
        match next_iterate(problem, config, &current)? {
            Some((next, step, backtracks)) => {
                current = next;
                trace.records.push(IterationRecord {
                    iter: trace.len() + 1,
                    j: current.eval.j,
                    grad_fro: frobenius_norm(&current.grad_on_support),
                    step,
                    nnz: current.u.nonzero_count(),
                    l1_norm: entrywise_l1_norm(&current.u),
                    backtracks,
                });
            }
            None => break SolveStatus::StalledUnstable,
        }
    };

    let Iterate {
        u,
        eval,
        grad_on_support,
    } = current;
    Ok(SolveResult {
        budget_satisfied: problem.budget_satisfied(&u),
        grad_fro_final: frobenius_norm(&grad_on_support),
        u_final: u,
        sigma_final: eval.sigma,
        j_final: eval.j,
        j_initial,
        status,
        trace,
    })
}

/// Backtracking search for an acceptable candidate. `None` when exhausted.
fn next_iterate(
    problem: &SteeringProblem,
    config: &SolverConfig,
    current: &Iterate,
) -> Result<Option<(Iterate, f64, usize)>> {
    let baseline = current.composite(config.lambda);
    let mut step = config.eta;
    for backtracks in 0..=config.max_backtracks {
        let candidate = prox_step(
            &current.u,
            &current.grad_on_support,
            step,
            config.lambda,
            problem.support(),
        )?;
        if is_schur_stable(&problem.closed_loop(&candidate)?, config.stability_margin)? {
            // A failed primal solve or a non-PD covariance rejects the step
            // like an objective increase would.
            if let Ok(j) = problem.objective(&candidate) {
                if j + config.lambda * entrywise_l1_norm(&candidate) <= baseline + MONOTONE_SLACK {
                    let next = Iterate::new(problem, candidate)?;
                    return Ok(Some((next, step, backtracks)));
                }
            }
        }
        step *= config.backtrack_factor;
    }
    Ok(None)
}
