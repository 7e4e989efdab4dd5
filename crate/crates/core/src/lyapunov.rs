//! Discrete Lyapunov solves.
//!
//! The primal equation is `M X Mᵀ - X + Q = 0`; the adjoint equation
//! `Mᵀ Λ M - Λ + G = 0` is the same problem with `M` transposed, so both go
//! through one code path. Two methods share the interface:
//!
//! * [`LyapunovMethod::DirectVec`] assembles the linear operator on the
//!   `n(n+1)/2` upper-triangular unknowns and solves it with partial-pivot LU.
//! * [`LyapunovMethod::SmithIteration`] runs the squared Smith recursion
//!   `X <- M X Mᵀ + X`, `M <- M²`.
//!
//! [`oracle_solve_vec`] is a separate brute-force route (full Kronecker
//! system, full-pivot LU) kept for cross-checking.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::linalg::{
    frobenius_norm, is_schur_stable, spectral_radius, LinalgError, SquareMatrix, SymmetricMatrix,
};

/// Largest dimension solved with the dense direct method when no method is requested.
pub const DIRECT_MAX_DIM: usize = 64;
/// Largest dimension accepted by [`oracle_solve_vec`].
pub const ORACLE_MAX_DIM: usize = 20;
pub const SMITH_MAX_ITER: usize = 200;
pub const SMITH_REL_TOL: f64 = 1e-12;
/// Residual bound relative to `max(1, ‖Q‖_fro)`.
pub const RESIDUAL_REL_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LyapunovError {
    #[error("matrix is not Schur stable (spectral radius {spectral_radius})")]
    UnstableMatrix { spectral_radius: f64 },
    #[error("Lyapunov solve failed: {0}")]
    SolveFailure(String),
    #[error("oracle limited to n <= {max}, got n = {dim}")]
    TooLarge { dim: usize, max: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, LyapunovError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LyapunovMethod {
    DirectVec,
    SmithIteration,
}

impl LyapunovMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            LyapunovMethod::DirectVec => "direct_vec",
            LyapunovMethod::SmithIteration => "smith_iteration",
        }
    }

    fn for_dim(n: usize) -> Self {
        if n <= DIRECT_MAX_DIM {
            LyapunovMethod::DirectVec
        } else {
            LyapunovMethod::SmithIteration
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovSolveReport {
    pub solution: SymmetricMatrix,
    /// Frobenius norm of the plugged-back residual of `solution`.
    pub residual_fro: f64,
    pub method: LyapunovMethod,
    /// Smith iterations used; zero for the direct method.
    pub iterations: usize,
}

/// Solve `A_u X A_uᵀ - X + Q = 0`.
pub fn solve_primal(a_u: &SquareMatrix, q: &SymmetricMatrix) -> Result<LyapunovSolveReport> {
    solve_primal_with(a_u, q, LyapunovMethod::for_dim(a_u.dim()))
}

/// Solve `A_uᵀ Λ A_u - Λ + G = 0`.
pub fn solve_adjoint(a_u: &SquareMatrix, g: &SymmetricMatrix) -> Result<LyapunovSolveReport> {
    solve_adjoint_with(a_u, g, LyapunovMethod::for_dim(a_u.dim()))
}

pub fn solve_adjoint_with(
    a_u: &SquareMatrix,
    g: &SymmetricMatrix,
    method: LyapunovMethod,
) -> Result<LyapunovSolveReport> {
    solve_primal_with(&a_u.transpose(), g, method)
}

pub fn solve_primal_with(
    a_u: &SquareMatrix,
    q: &SymmetricMatrix,
    method: LyapunovMethod,
) -> Result<LyapunovSolveReport> {
    check_dims(a_u, q)?;
    if !is_schur_stable(a_u, 0.0)? {
        return Err(LyapunovError::UnstableMatrix {
            spectral_radius: spectral_radius(a_u)?,
        });
    }
    let m = a_u.as_matrix();
    let (raw, iterations) = match method {
        LyapunovMethod::DirectVec => (direct_symmetric(m, q.as_matrix())?, 0),
        LyapunovMethod::SmithIteration => smith(m, q.as_matrix())?,
    };
    let solution = SymmetricMatrix::new(raw).map_err(|e| match e {
        LinalgError::NonFinite { .. } => {
            LyapunovError::SolveFailure("solution has non-finite entries".into())
        }
        other => LyapunovError::Linalg(other),
    })?;
    let residual_fro = residual(m, solution.as_matrix(), q.as_matrix());
    let tolerance = RESIDUAL_REL_TOL * frobenius_norm(q).max(1.0);
    if !(residual_fro <= tolerance) {
        return Err(LyapunovError::SolveFailure(format!(
            "residual {residual_fro:e} exceeds tolerance {tolerance:e}"
        )));
    }
    Ok(LyapunovSolveReport {
        solution,
        residual_fro,
        method,
        iterations,
    })
}

/// `‖M X Mᵀ - X + Q‖_fro`.
pub fn residual(m: &DMatrix<f64>, x: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    (m * x * m.transpose() - x + q).norm()
}

fn check_dims(a: &SquareMatrix, q: &SymmetricMatrix) -> Result<()> {
    if a.dim() != q.dim() {
        return Err(LinalgError::DimensionMismatch {
            left: (a.dim(), a.dim()),
            right: (q.dim(), q.dim()),
        }
        .into());
    }
    Ok(())
}

/// Position of `(i, j)`, `i <= j`, in the packed upper triangle.
fn packed_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i <= j);
    i * n - i * (i + 1) / 2 + j
}

fn direct_symmetric(m: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let p = n * (n + 1) / 2;
    let mut op = DMatrix::<f64>::zeros(p, p);
    // Column k of `op` is the image of the k-th symmetric basis matrix under
    // X -> M X Mᵀ - X, restricted to the upper triangle.
    for a in 0..n {
        for b in a..n {
            let col = packed_index(n, a, b);
            let ma = m.column(a);
            let mb = m.column(b);
            for i in 0..n {
                for j in i..n {
                    let mut v = ma[i] * mb[j];
                    if a != b {
                        v += mb[i] * ma[j];
                    }
                    op[(packed_index(n, i, j), col)] = v;
                }
            }
            op[(col, col)] -= 1.0;
        }
    }
    let mut rhs = nalgebra::DVector::<f64>::zeros(p);
    for i in 0..n {
        for j in i..n {
            rhs[packed_index(n, i, j)] = -q[(i, j)];
        }
    }
    let sol = op
        .lu()
        .solve(&rhs)
        .ok_or_else(|| LyapunovError::SolveFailure("singular Lyapunov operator".into()))?;
    let mut x = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = sol[packed_index(n, i, j)];
            x[(i, j)] = v;
            x[(j, i)] = v;
        }
    }
    Ok(x)
}

fn smith(m: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<(DMatrix<f64>, usize)> {
    let mut x = q.clone();
    let mut a = m.clone();
    for k in 1..=SMITH_MAX_ITER {
        let next = &a * &x * a.transpose() + &x;
        let delta = (&next - &x).norm();
        let scale = next.norm();
        x = next;
        if delta <= SMITH_REL_TOL * scale {
            return Ok((symmetric_part(x), k));
        }
        a = &a * &a;
    }
    Err(LyapunovError::SolveFailure(format!(
        "Smith iteration did not converge in {SMITH_MAX_ITER} steps"
    )))
}

fn symmetric_part(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Brute-force solve through the `n² x n²` Kronecker system.
///
/// `transpose_form = false` solves `M X Mᵀ - X + Q = 0`; `true` solves
/// `Mᵀ X M - X + Q = 0`. Stability is not required, only nonsingularity.
pub fn oracle_solve_vec(
    a_u: &SquareMatrix,
    q: &SymmetricMatrix,
    transpose_form: bool,
) -> Result<SymmetricMatrix> {
    check_dims(a_u, q)?;
    let n = a_u.dim();
    if n > ORACLE_MAX_DIM {
        return Err(LyapunovError::TooLarge {
            dim: n,
            max: ORACLE_MAX_DIM,
        });
    }
    let m = if transpose_form {
        a_u.as_matrix().transpose()
    } else {
        a_u.as_matrix().clone()
    };
    let nn = n * n;
    // Column-major vec: vec(M X Mᵀ) = (M ⊗ M) vec(X).
    let mut k = DMatrix::<f64>::zeros(nn, nn);
    for i1 in 0..n {
        for j1 in 0..n {
            for i2 in 0..n {
                for j2 in 0..n {
                    k[(i1 * n + i2, j1 * n + j2)] = m[(i1, j1)] * m[(i2, j2)];
                }
            }
        }
    }
    for d in 0..nn {
        k[(d, d)] -= 1.0;
    }
    let rhs = nalgebra::DVector::from_iterator(nn, q.as_matrix().iter().map(|v| -v));
    let lu = k.full_piv_lu();
    if !lu.is_invertible() {
        return Err(LinalgError::Singular.into());
    }
    let vec_x = lu.solve(&rhs).ok_or(LinalgError::Singular)?;
    let x = DMatrix::from_column_slice(n, n, vec_x.as_slice());
    Ok(SymmetricMatrix::from_unsymmetric(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::RectMatrix;

    fn scalar(v: f64) -> SquareMatrix {
        SquareMatrix::from_row_slice(1, &[v]).unwrap()
    }

    fn sym1(v: f64) -> SymmetricMatrix {
        SymmetricMatrix::from_diagonal(&[v]).unwrap()
    }

    #[test]
    fn zero_dynamics_returns_source() {
        let b = RectMatrix::from_rows(&[vec![1.0, 0.5], vec![-0.2, 2.0], vec![0.3, 0.0]]).unwrap();
        let q = b.gram();
        for method in [LyapunovMethod::DirectVec, LyapunovMethod::SmithIteration] {
            let rep = solve_primal_with(&SquareMatrix::zeros(3), &q, method).unwrap();
            assert!((rep.solution.as_matrix() - q.as_matrix()).norm() < 1e-15);
        }
        let g = SymmetricMatrix::from_rows(&[vec![1.0, -2.0], vec![-2.0, -3.0]]).unwrap();
        let rep = solve_adjoint(&SquareMatrix::zeros(2), &g).unwrap();
        assert!((rep.solution.as_matrix() - g.as_matrix()).norm() < 1e-15);
        let oracle = oracle_solve_vec(&SquareMatrix::zeros(2), &g, false).unwrap();
        assert!((oracle.as_matrix() - g.as_matrix()).norm() < 1e-15);
    }

    #[test]
    fn scalar_closed_forms() {
        let rep = solve_primal(&scalar(0.5), &sym1(1.0)).unwrap();
        assert!((rep.solution.get(0, 0) - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(rep.method, LyapunovMethod::DirectVec);
        assert_eq!(rep.iterations, 0);

        let g = -2.7;
        let rep = solve_adjoint(&scalar(0.5), &sym1(g)).unwrap();
        assert!((rep.solution.get(0, 0) - 4.0 * g / 3.0).abs() < 1e-14);

        let oracle = oracle_solve_vec(&scalar(0.5), &sym1(1.0), false).unwrap();
        assert!((oracle.get(0, 0) - 4.0 / 3.0).abs() < 1e-15);

        let smith =
            solve_primal_with(&scalar(0.5), &sym1(1.0), LyapunovMethod::SmithIteration).unwrap();
        assert!((smith.solution.get(0, 0) - 4.0 / 3.0).abs() < 1e-14);
        assert!(smith.iterations > 0);
    }

    #[test]
    fn decoupled_diagonal_case() {
        let a = SquareMatrix::from_rows(&[vec![0.5, 0.0], vec![0.0, 0.2]]).unwrap();
        let rep = solve_primal(&a, &SymmetricMatrix::identity(2)).unwrap();
        let x = rep.solution.as_matrix();
        assert!((x[(0, 0)] - 4.0 / 3.0).abs() < 1e-15);
        assert!((x[(1, 1)] - 25.0 / 24.0).abs() < 1e-15);
        assert_eq!(x[(0, 1)], 0.0);
    }

    #[test]
    fn zero_source_gives_zero_solution() {
        let a = SquareMatrix::from_rows(&[vec![0.3, 0.4], vec![-0.1, 0.6]]).unwrap();
        for method in [LyapunovMethod::DirectVec, LyapunovMethod::SmithIteration] {
            let rep = solve_adjoint_with(&a, &SymmetricMatrix::zeros(2), method).unwrap();
            assert_eq!(frobenius_norm(&rep.solution), 0.0);
        }
    }

    #[test]
    fn unstable_matrix_is_rejected() {
        let err = solve_primal(&scalar(1.0), &sym1(1.0)).unwrap_err();
        assert!(matches!(err, LyapunovError::UnstableMatrix { .. }));
        let err = solve_adjoint(&scalar(-1.5), &sym1(1.0)).unwrap_err();
        assert!(
            matches!(err, LyapunovError::UnstableMatrix { spectral_radius } if (spectral_radius - 1.5).abs() < 1e-12)
        );
    }

    #[test]
    fn oracle_reports_singular_system() {
        // Eigenvalues 2 and 0.5 multiply to one.
        let a = SquareMatrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.5]]).unwrap();
        let err = oracle_solve_vec(&a, &SymmetricMatrix::identity(2), false).unwrap_err();
        assert!(matches!(err, LyapunovError::Linalg(LinalgError::Singular)));
    }

    #[test]
    fn oracle_rejects_large_input() {
        let err = oracle_solve_vec(&SquareMatrix::zeros(21), &SymmetricMatrix::zeros(21), true)
            .unwrap_err();
        assert!(matches!(err, LyapunovError::TooLarge { dim: 21, .. }));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let err = solve_primal(&SquareMatrix::zeros(2), &SymmetricMatrix::identity(3)).unwrap_err();
        assert!(matches!(
            err,
            LyapunovError::Linalg(LinalgError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn direct_and_smith_agree_on_nonnormal_system() {
        let a = SquareMatrix::from_rows(&[
            vec![0.9, 0.8, 0.0],
            vec![0.0, 0.7, -0.5],
            vec![0.1, 0.0, -0.6],
        ])
        .unwrap();
        let q = SymmetricMatrix::from_rows(&[
            vec![1.0, 0.2, 0.0],
            vec![0.2, 0.5, 0.1],
            vec![0.0, 0.1, 2.0],
        ])
        .unwrap();
        let d = solve_primal_with(&a, &q, LyapunovMethod::DirectVec).unwrap();
        let s = solve_primal_with(&a, &q, LyapunovMethod::SmithIteration).unwrap();
        let o = oracle_solve_vec(&a, &q, false).unwrap();
        assert!((d.solution.as_matrix() - s.solution.as_matrix()).amax() < 1e-10);
        assert!((d.solution.as_matrix() - o.as_matrix()).amax() < 1e-10);
        let ot = oracle_solve_vec(&a, &q, true).unwrap();
        let adj = solve_adjoint(&a, &q).unwrap();
        assert!((adj.solution.as_matrix() - ot.as_matrix()).amax() < 1e-10);
    }

    #[test]
    fn packed_index_is_dense() {
        let n = 5;
        let mut seen = vec![false; n * (n + 1) / 2];
        for i in 0..n {
            for j in i..n {
                let k = packed_index(n, i, j);
                assert!(!seen[k]);
                seen[k] = true;
            }
        }
        assert!(seen.into_iter().all(|s| s));
    }
}
