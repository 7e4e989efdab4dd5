//! End-to-end runs: solve, sample trajectories, project onto principal
//! components, sweep the regularization weight, and audit the gradient.
//! Every run produces an in-memory [`Artifact`] set that is written to disk
//! only once everything succeeded.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde_json::{json, Value};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::config::ExperimentConfig;
use crate::linalg::{is_schur_stable, spectral_radius, RectMatrix, SquareMatrix, SymmetricMatrix};
use crate::output::{fmt17, json_to_string, write_artifacts, Artifact};
use crate::steering::{
    finite_difference_gradient, gradient_wrt_u, solve, SolveResult, SolveStatus, SolverConfig,
    SteeringError,
};

/// Generator identifier written into result metadata.
pub const RNG_ALGORITHM: &str = "ChaCha20Rng (rand_chacha 0.9) seeded via seed_from_u64; \
standard normals via rand_distr 0.5 StandardNormal";

pub const TRACE_HEADER: &str = "iter,J,grad_fro,step,nnz,l1_norm";
pub const SCATTER_HEADER: &str = "pc1,pc2,pc3,label";
pub const SWEEP_HEADER: &str = "lambda,nnz,J,l1_norm,budget_satisfied,status";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Steering(#[from] SteeringError),
    #[error("simulation requires a Schur-stable matrix (spectral radius {0})")]
    UnstableSimulation(f64),
    #[error("invalid sampling request: {0}")]
    InvalidSampling(String),
    #[error("degenerate covariance: {0}")]
    DegenerateCovariance(String),
    #[error("cannot write outputs to {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudLabel {
    WithoutControl,
    WithControl,
}

impl CloudLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            CloudLabel::WithoutControl => "without_control",
            CloudLabel::WithControl => "with_control",
        }
    }
}

/// Terminal states of independent trajectories, one row per trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleCloud {
    pub states: DMatrix<f64>,
    pub empirical_cov: SymmetricMatrix,
    pub label: CloudLabel,
}

impl SampleCloud {
    pub fn new(states: DMatrix<f64>, label: CloudLabel) -> Result<Self> {
        let empirical_cov = empirical_covariance(&states)?;
        Ok(Self {
            states,
            empirical_cov,
            label,
        })
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }
}

/// Second moment `(1/N) Σ x xᵀ` of zero-mean samples stored as rows.
pub fn empirical_covariance(states: &DMatrix<f64>) -> Result<SymmetricMatrix> {
    let n_pts = states.nrows();
    if n_pts == 0 {
        return Err(ExperimentError::InvalidSampling("no samples".into()));
    }
    let m = states.transpose() * states / n_pts as f64;
    SymmetricMatrix::new((&m + m.transpose()) * 0.5)
        .map_err(|e| ExperimentError::InvalidSampling(e.to_string()))
}

/// Run `x(k+1) = A_eff x(k) + B w(k)` from `x(0) = 0` for `horizon` steps.
pub fn simulate_terminal_states(
    a_eff: &SquareMatrix,
    b: &RectMatrix,
    horizon: usize,
    num_trajectories: usize,
    rng_seed: u64,
    label: CloudLabel,
) -> Result<SampleCloud> {
    let n = a_eff.dim();
    if b.nrows() != n {
        return Err(ExperimentError::InvalidSampling(format!(
            "B has {} rows, A_eff is {n}x{n}",
            b.nrows()
        )));
    }
    if horizon == 0 || num_trajectories == 0 {
        return Err(ExperimentError::InvalidSampling(
            "horizon and num_trajectories must be positive".into(),
        ));
    }
    let rho = spectral_radius(a_eff).map_err(SteeringError::from)?;
    if !is_schur_stable(a_eff, 0.0).map_err(SteeringError::from)? {
        return Err(ExperimentError::UnstableSimulation(rho));
    }
    let a = a_eff.as_matrix();
    let bm = b.as_matrix();
    let m = bm.ncols();
    let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
    let mut states = DMatrix::<f64>::zeros(num_trajectories, n);
    let mut w = DVector::<f64>::zeros(m);
    let mut x = DVector::<f64>::zeros(n);
    let mut next = DVector::<f64>::zeros(n);
    for t in 0..num_trajectories {
        x.fill(0.0);
        for _ in 0..horizon {
            for wi in w.iter_mut() {
                *wi = StandardNormal.sample(&mut rng);
            }
            next.gemv(1.0, a, &x, 0.0);
            next.gemv(1.0, bm, &w, 1.0);
            std::mem::swap(&mut x, &mut next);
        }
        states.row_mut(t).copy_from(&x.transpose());
    }
    SampleCloud::new(states, label)
}

/// Confidence ellipsoid `{y : yᵀ P⁻¹ y <= q}` in principal-component space.
#[derive(Debug, Clone, PartialEq)]
pub struct Ellipsoid {
    /// Projected reference covariance `P = Vᵀ Σ_ref V`.
    pub shape: Matrix3<f64>,
    /// Unit principal axes of `P`, as columns.
    pub axes: Matrix3<f64>,
    /// Semi-axis lengths `sqrt(q * eig(P))`.
    pub radii: Vector3<f64>,
    /// Chi-square quantile `q` with 3 degrees of freedom.
    pub chi2_quantile: f64,
    pub coverage: f64,
    shape_inv: Matrix3<f64>,
}

impl Ellipsoid {
    pub fn contains(&self, y: &Vector3<f64>) -> bool {
        (y.transpose() * self.shape_inv * y)[(0, 0)] <= self.chi2_quantile
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    /// `n x 3`, columns are the leading principal directions.
    pub basis: DMatrix<f64>,
    /// Variances of the reference cloud along the basis.
    pub explained_variance: [f64; 3],
    /// One `N x 3` block per projected cloud, in input order.
    pub projected: Vec<(CloudLabel, DMatrix<f64>)>,
    pub ellipsoid: Ellipsoid,
}

impl PcaProjection {
    /// Fraction of a projected cloud's points inside the ellipsoid.
    pub fn fraction_inside(&self, points: &DMatrix<f64>) -> f64 {
        if points.nrows() == 0 {
            return 0.0;
        }
        let inside = (0..points.nrows())
            .filter(|&i| {
                let y = Vector3::new(points[(i, 0)], points[(i, 1)], points[(i, 2)]);
                self.ellipsoid.contains(&y)
            })
            .count();
        inside as f64 / points.nrows() as f64
    }

    pub fn project(&self, states: &DMatrix<f64>) -> DMatrix<f64> {
        states * &self.basis
    }
}

/// Principal components of `reference` and the projected reference ellipsoid.
pub fn pca_project(
    reference: &SampleCloud,
    clouds: &[&SampleCloud],
    sigma_ref: &SymmetricMatrix,
    coverage: f64,
) -> Result<PcaProjection> {
    let n = reference.states.ncols();
    if n < 3 {
        return Err(ExperimentError::DegenerateCovariance(format!(
            "need at least 3 state dimensions, got {n}"
        )));
    }
    if reference.len() < 4 {
        return Err(ExperimentError::DegenerateCovariance(format!(
            "need at least 4 reference points, got {}",
            reference.len()
        )));
    }
    if sigma_ref.dim() != n {
        return Err(ExperimentError::InvalidSampling(
            "sigma_ref dimension differs from the samples".into(),
        ));
    }
    if !(coverage > 0.0 && coverage < 1.0) {
        return Err(ExperimentError::InvalidSampling(format!(
            "coverage must lie in (0, 1), got {coverage}"
        )));
    }
    let eig = SymmetricEigen::new(reference.empirical_cov.as_matrix().clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let top = [order[0], order[1], order[2]];
    let lead = eig.eigenvalues[top[0]];
    if !(eig.eigenvalues[top[2]] > 1e-12 * lead.abs()) || !(lead > 0.0) {
        return Err(ExperimentError::DegenerateCovariance(
            "reference covariance has rank below 3".into(),
        ));
    }
    let mut basis = DMatrix::<f64>::zeros(n, 3);
    for (k, &idx) in top.iter().enumerate() {
        let mut v = eig.eigenvectors.column(idx).into_owned();
        v /= v.norm();
        // Fix the sign so the largest-magnitude component is positive.
        let pivot = v.iamax();
        if v[pivot] < 0.0 {
            v = -v;
        }
        basis.set_column(k, &v);
    }
    let explained_variance = [
        eig.eigenvalues[top[0]],
        eig.eigenvalues[top[1]],
        eig.eigenvalues[top[2]],
    ];

    let p_dyn = basis.transpose() * sigma_ref.as_matrix() * &basis;
    let shape = Matrix3::from_fn(|i, j| 0.5 * (p_dyn[(i, j)] + p_dyn[(j, i)]));
    let shape_inv = shape.try_inverse().ok_or_else(|| {
        ExperimentError::DegenerateCovariance("projected reference covariance is singular".into())
    })?;
    let pe = SymmetricEigen::new(shape);
    let chi2 = ChiSquared::new(3.0).expect("3 degrees of freedom");
    let chi2_quantile = chi2.inverse_cdf(coverage);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&i, &j| pe.eigenvalues[j].total_cmp(&pe.eigenvalues[i]));
    let axes = Matrix3::from_columns(&[
        pe.eigenvectors.column(idx[0]).into_owned(),
        pe.eigenvectors.column(idx[1]).into_owned(),
        pe.eigenvectors.column(idx[2]).into_owned(),
    ]);
    let radii = Vector3::from_fn(|k, _| (chi2_quantile * pe.eigenvalues[idx[k]].max(0.0)).sqrt());

    let projected = clouds
        .iter()
        .map(|c| {
            if c.states.ncols() != n {
                return Err(ExperimentError::InvalidSampling(
                    "cloud dimension differs from the reference".into(),
                ));
            }
            Ok((c.label, &c.states * &basis))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(PcaProjection {
        basis,
        explained_variance,
        projected,
        ellipsoid: Ellipsoid {
            shape,
            axes,
            radii,
            chi2_quantile,
            coverage,
            shape_inv,
        },
    })
}

/// Outcome of a reproduction run.
#[derive(Debug, Clone)]
pub struct Reproduction {
    pub result: SolveResult,
    pub clouds: Option<(SampleCloud, SampleCloud)>,
    pub projection: Option<PcaProjection>,
    pub artifacts: Vec<Artifact>,
}

/// Solve, optionally sample and project, and assemble the artifact set.
///
/// Nothing is written; see [`emit`].
pub fn run_reproduction(config: &ExperimentConfig, with_sampling: bool) -> Result<Reproduction> {
    let problem = &config.problem;
    let result = solve(problem, &config.solver)?;

    let mut artifacts = vec![Artifact::new("trace.csv", trace_csv(&result))];
    let mut doc = result_document(config, &result);

    let (clouds, projection) = if with_sampling {
        let s = &config.sampling;
        let without = simulate_terminal_states(
            problem.a(),
            problem.b(),
            s.horizon,
            s.num_trajectories,
            s.rng_seed,
            CloudLabel::WithoutControl,
        )?;
        let controlled = problem.closed_loop(&result.u_final)?;
        let with = simulate_terminal_states(
            &controlled,
            problem.b(),
            s.horizon,
            s.num_trajectories,
            s.rng_seed,
            CloudLabel::WithControl,
        )?;
        let projection = pca_project(
            &without,
            &[&without, &with],
            problem.sigma_ref(),
            s.coverage,
        )?;
        artifacts.push(Artifact::new("scatter.csv", scatter_csv(&projection)));
        doc["sampling"] = sampling_json(config, &without, &with, &projection);
        (Some((without, with)), Some(projection))
    } else {
        (None, None)
    };
    artifacts.push(Artifact::new("result.json", json_to_string(&doc)));

    Ok(Reproduction {
        result,
        clouds,
        projection,
        artifacts,
    })
}

/// Write an artifact set, all or nothing.
pub fn emit(out_dir: &Path, artifacts: &[Artifact]) -> Result<Vec<PathBuf>> {
    write_artifacts(out_dir, artifacts).map_err(|source| ExperimentError::Io {
        path: out_dir.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    /// `Err` carries the solver error message.
    pub outcome: std::result::Result<SweepOutcome, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub nonzero_count: usize,
    pub final_j: f64,
    pub l1_norm: f64,
    pub budget_satisfied: bool,
    pub status: SolveStatus,
}

/// One independent solve per configured λ, rows ordered by λ.
pub fn run_lambda_sweep(config: &ExperimentConfig, jobs: usize) -> Result<Vec<SweepRow>> {
    let lambdas = &config.sweep.lambda_values;
    if lambdas.len() < 2 {
        return Err(ExperimentError::InvalidSampling(
            "a sweep needs at least two lambda values".into(),
        ));
    }
    let one = |lambda: f64| -> SweepRow {
        let solver = SolverConfig {
            lambda,
            ..config.solver.clone()
        };
        let outcome = solve(&config.problem, &solver)
            .map(|r| SweepOutcome {
                nonzero_count: r.nonzero_count(),
                final_j: r.j_final,
                l1_norm: r.l1_norm(),
                budget_satisfied: r.budget_satisfied,
                status: r.status,
            })
            .map_err(|e| e.to_string());
        SweepRow { lambda, outcome }
    };
    if jobs <= 1 {
        return Ok(lambdas.iter().map(|&l| one(l)).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| ExperimentError::ThreadPool(e.to_string()))?;
    Ok(pool.install(|| lambdas.par_iter().map(|&l| one(l)).collect()))
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for row in rows {
        match &row.outcome {
            Ok(o) => s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                fmt17(row.lambda),
                o.nonzero_count,
                fmt17(o.final_j),
                fmt17(o.l1_norm),
                o.budget_satisfied,
                o.status.as_str()
            )),
            Err(msg) => s.push_str(&format!(
                "{},,,,,error: {}\n",
                fmt17(row.lambda),
                msg.replace([',', '\n'], ";")
            )),
        }
    }
    s
}

/// Analytical vs finite-difference gradient comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_deviation: f64,
    /// Zero-based entry attaining the maximum, if any entry was compared.
    pub worst_entry: Option<(usize, usize)>,
    pub entries_compared: usize,
    pub step: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compare the adjoint gradient with central differences at `u`.
pub fn check_gradient(
    config: &ExperimentConfig,
    u: &SquareMatrix,
) -> std::result::Result<GradCheckReport, SteeringError> {
    let gc = config.check_grad;
    let problem = &config.problem;
    let analytical = gradient_wrt_u(problem, u)?.grad;
    let numerical = finite_difference_gradient(problem, u, gc.step)?;
    let mut worst = 0.0_f64;
    let mut worst_entry = None;
    let mut compared = 0;
    for (r, c) in problem.support().pairs() {
        let g = analytical.get(r, c);
        if g.abs() <= gc.magnitude_floor {
            continue;
        }
        compared += 1;
        let dev = (g - numerical.get(r, c)).abs() / g.abs();
        if dev > worst || worst_entry.is_none() {
            worst = worst.max(dev);
            worst_entry = Some((r, c));
        }
    }
    Ok(GradCheckReport {
        max_relative_deviation: worst,
        worst_entry,
        entries_compared: compared,
        step: gc.step,
        tolerance: gc.tolerance,
        passed: worst < gc.tolerance,
    })
}

pub fn grad_check_json(config: &ExperimentConfig, report: &GradCheckReport) -> String {
    json_to_string(&json!({
        "max_relative_deviation": report.max_relative_deviation,
        "worst_entry": report.worst_entry.map(|(r, c)| vec![r + 1, c + 1]),
        "entries_compared": report.entries_compared,
        "step": report.step,
        "tolerance": report.tolerance,
        "passed": report.passed,
        "config": config_echo(config),
    }))
}

pub fn trace_csv(result: &SolveResult) -> String {
    let mut s = format!("{TRACE_HEADER}\n");
    for r in result.trace.iter() {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iter,
            fmt17(r.j),
            fmt17(r.grad_fro),
            fmt17(r.step),
            r.nnz,
            fmt17(r.l1_norm)
        ));
    }
    s
}

pub fn scatter_csv(projection: &PcaProjection) -> String {
    let mut s = format!("{SCATTER_HEADER}\n");
    for (label, pts) in &projection.projected {
        for i in 0..pts.nrows() {
            s.push_str(&format!(
                "{},{},{},{}\n",
                fmt17(pts[(i, 0)]),
                fmt17(pts[(i, 1)]),
                fmt17(pts[(i, 2)]),
                label.as_str()
            ));
        }
    }
    s
}

fn rows_json<M: AsRef<DMatrix<f64>>>(m: &M) -> Value {
    dmatrix_json(m.as_ref())
}

fn dmatrix_json(m: &DMatrix<f64>) -> Value {
    Value::Array(
        (0..m.nrows())
            .map(|i| json!((0..m.ncols()).map(|j| m[(i, j)]).collect::<Vec<_>>()))
            .collect(),
    )
}

fn config_echo(config: &ExperimentConfig) -> Value {
    serde_json::to_value(&config.raw).expect("config is serializable")
}

fn result_document(config: &ExperimentConfig, result: &SolveResult) -> Value {
    let u = &result.u_final;
    let nonzeros: Vec<Value> = (0..u.dim())
        .flat_map(|r| (0..u.dim()).map(move |c| (r, c)))
        .filter(|&(r, c)| u.get(r, c) != 0.0)
        .map(|(r, c)| json!({"row": r + 1, "col": c + 1, "value": u.get(r, c)}))
        .collect();
    json!({
        "u_final": rows_json(u),
        "u_nonzeros": nonzeros,
        "sigma_final": rows_json(&result.sigma_final),
        "j_final": result.j_final,
        "j_initial": result.j_initial,
        "grad_fro_final": result.grad_fro_final,
        "status": result.status.as_str(),
        "iterations": result.iterations(),
        "l1_norm": result.l1_norm(),
        "l1_budget": config.problem.l1_budget(),
        "budget_satisfied": result.budget_satisfied,
        "config": config_echo(config),
        "rng": {
            "algorithm": RNG_ALGORITHM,
            "seed": config.sampling.rng_seed,
        },
    })
}

fn sampling_json(
    config: &ExperimentConfig,
    without: &SampleCloud,
    with: &SampleCloud,
    projection: &PcaProjection,
) -> Value {
    let e = &projection.ellipsoid;
    let fractions: serde_json::Map<String, Value> = projection
        .projected
        .iter()
        .map(|(label, pts)| {
            (
                label.as_str().to_string(),
                json!(projection.fraction_inside(pts)),
            )
        })
        .collect();
    json!({
        "num_trajectories": config.sampling.num_trajectories,
        "horizon": config.sampling.horizon,
        "empirical_cov_without_control": rows_json(&without.empirical_cov),
        "empirical_cov_with_control": rows_json(&with.empirical_cov),
        "pca_basis": dmatrix_json(&projection.basis),
        "explained_variance": projection.explained_variance.to_vec(),
        "ellipsoid": {
            "coverage": e.coverage,
            "chi2_quantile": e.chi2_quantile,
            "shape": (0..3).map(|i| (0..3).map(|j| e.shape[(i, j)]).collect::<Vec<_>>()).collect::<Vec<_>>(),
            "axes": (0..3).map(|k| (0..3).map(|i| e.axes[(i, k)]).collect::<Vec<_>>()).collect::<Vec<_>>(),
            "radii": e.radii.iter().copied().collect::<Vec<_>>(),
        },
        "fraction_inside_ellipsoid": fractions,
    })
}
