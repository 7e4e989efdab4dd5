//! Dense real-matrix wrappers and the numerical predicates the solver relies on.
//!
//! Three newtypes sit over [`nalgebra::DMatrix`]:
//!
//! * [`SquareMatrix`] for `A`, `U` and intermediate `n x n` products,
//! * [`RectMatrix`] for the disturbance input `B`,
//! * [`SymmetricMatrix`] for covariances and Lyapunov solutions.
//!
//! Every constructor rejects non-finite entries, so downstream code never has
//! to re-check for NaN or infinity.

use nalgebra::{DMatrix, Schur};
use thiserror::Error;

/// Iteration cap handed to the Schur decomposition behind [`spectral_radius`].
const SCHUR_MAX_ITER: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix entry ({row}, {col}) is not finite")]
    NonFinite { row: usize, col: usize },
    #[error("matrix is not symmetric: |M[{row},{col}] - M[{col},{row}]| = {gap:e}")]
    Asymmetric { row: usize, col: usize, gap: f64 },
    #[error("ragged input: row {row} has {len} entries, expected {expected}")]
    Ragged {
        row: usize,
        len: usize,
        expected: usize,
    },
    #[error("matrix must have at least one row and column")]
    Empty,
    #[error("eigenvalue iteration did not converge for a {dim}x{dim} matrix")]
    EigenNoConvergence { dim: usize },
    #[error("linear system is singular")]
    Singular,
}

pub type Result<T> = std::result::Result<T, LinalgError>;

fn check_finite(m: &DMatrix<f64>) -> Result<()> {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if !m[(i, j)].is_finite() {
                return Err(LinalgError::NonFinite { row: i, col: j });
            }
        }
    }
    Ok(())
}

fn check_nonempty(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(LinalgError::Empty);
    }
    Ok(())
}

fn from_nested(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        return Err(LinalgError::Empty);
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != ncols {
            return Err(LinalgError::Ragged {
                row: i,
                len: r.len(),
                expected: ncols,
            });
        }
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn to_nested(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

macro_rules! matrix_common {
    ($t:ty) => {
        impl $t {
            /// Borrow the underlying dense matrix.
            pub fn as_matrix(&self) -> &DMatrix<f64> {
                &self.0
            }

            pub fn into_matrix(self) -> DMatrix<f64> {
                self.0
            }

            pub fn nrows(&self) -> usize {
                self.0.nrows()
            }

            pub fn ncols(&self) -> usize {
                self.0.ncols()
            }

            pub fn get(&self, row: usize, col: usize) -> f64 {
                self.0[(row, col)]
            }

            /// Row-major nested vectors, the layout used by config and result files.
            pub fn to_rows(&self) -> Vec<Vec<f64>> {
                to_nested(&self.0)
            }
        }

        impl AsRef<DMatrix<f64>> for $t {
            fn as_ref(&self) -> &DMatrix<f64> {
                &self.0
            }
        }
    };
}

/// Dense real `n x n` matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix(DMatrix<f64>);

/// Dense real `rows x cols` matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct RectMatrix(DMatrix<f64>);

/// Dense real `n x n` matrix with exactly symmetric, finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix(DMatrix<f64>);

matrix_common!(SquareMatrix);
matrix_common!(RectMatrix);
matrix_common!(SymmetricMatrix);

impl SquareMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        check_nonempty(&m)?;
        if m.nrows() != m.ncols() {
            return Err(LinalgError::NotSquare {
                rows: m.nrows(),
                cols: m.ncols(),
            });
        }
        check_finite(&m)?;
        Ok(Self(m))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(from_nested(rows)?)
    }

    /// Build from `dim * dim` entries in row-major order.
    pub fn from_row_slice(dim: usize, entries: &[f64]) -> Result<Self> {
        if entries.len() != dim * dim {
            return Err(LinalgError::DimensionMismatch {
                left: (dim, dim),
                right: (entries.len(), 1),
            });
        }
        Self::new(DMatrix::from_row_slice(dim, dim, entries))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(DMatrix::zeros(dim, dim))
    }

    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn scale(&self, c: f64) -> Result<Self> {
        Self::new(&self.0 * c)
    }

    /// Entrywise sum; both operands must share a dimension.
    pub fn add(&self, other: &SquareMatrix) -> Result<Self> {
        same_shape(&self.0, &other.0)?;
        Self::new(&self.0 + &other.0)
    }

    /// Number of entries that are not exactly zero.
    pub fn nonzero_count(&self) -> usize {
        self.0.iter().filter(|v| **v != 0.0).count()
    }
}

impl RectMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        check_nonempty(&m)?;
        check_finite(&m)?;
        Ok(Self(m))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(from_nested(rows)?)
    }

    /// `M Mᵀ`, symmetrized so the result is exactly symmetric.
    pub fn gram(&self) -> SymmetricMatrix {
        let g = &self.0 * self.0.transpose();
        SymmetricMatrix::from_unsymmetric(g)
    }
}

impl SymmetricMatrix {
    /// Accepts `m` only if it is exactly symmetric.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        check_nonempty(&m)?;
        if m.nrows() != m.ncols() {
            return Err(LinalgError::NotSquare {
                rows: m.nrows(),
                cols: m.ncols(),
            });
        }
        check_finite(&m)?;
        let n = m.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                if m[(i, j)] != m[(j, i)] {
                    return Err(LinalgError::Asymmetric {
                        row: i,
                        col: j,
                        gap: (m[(i, j)] - m[(j, i)]).abs(),
                    });
                }
            }
        }
        Ok(Self(m))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(from_nested(rows)?)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(DMatrix::zeros(dim, dim))
    }

    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        let n = diag.len();
        Self::new(DMatrix::from_fn(
            n,
            n,
            |i, j| if i == j { diag[i] } else { 0.0 },
        ))
    }

    /// `(M + Mᵀ) / 2` of an arbitrary square matrix. Callers guarantee finiteness.
    pub(crate) fn from_unsymmetric(m: DMatrix<f64>) -> Self {
        debug_assert_eq!(m.nrows(), m.ncols());
        let n = m.nrows();
        let mut out = m;
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (out[(i, j)] + out[(j, i)]);
                out[(i, j)] = avg;
                out[(j, i)] = avg;
            }
        }
        Self(out)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn to_square(&self) -> SquareMatrix {
        SquareMatrix(self.0.clone())
    }
}

fn same_shape(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(LinalgError::DimensionMismatch {
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

/// Largest eigenvalue modulus of `m`.
pub fn spectral_radius(m: &SquareMatrix) -> Result<f64> {
    let n = m.dim();
    let schur = Schur::try_new(m.0.clone(), f64::EPSILON, SCHUR_MAX_ITER)
        .ok_or(LinalgError::EigenNoConvergence { dim: n })?;
    let radius = schur
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0_f64, f64::max);
    if !radius.is_finite() {
        return Err(LinalgError::EigenNoConvergence { dim: n });
    }
    Ok(radius)
}

/// True iff `spectral_radius(m) < 1 - margin`.
pub fn is_schur_stable(m: &SquareMatrix, margin: f64) -> Result<bool> {
    debug_assert!((0.0..1.0).contains(&margin), "margin must lie in [0, 1)");
    Ok(spectral_radius(m)? < 1.0 - margin)
}

/// Relative positive-definiteness floor, `1e-12 * trace(M) / n`.
pub fn default_pd_tolerance(m: &SymmetricMatrix) -> f64 {
    (1e-12 * m.trace() / m.dim() as f64).max(0.0)
}

/// Cholesky-style elimination; true iff every pivot exceeds `tol`.
pub fn is_positive_definite(m: &SymmetricMatrix, tol: f64) -> bool {
    let n = m.dim();
    let a = &m.0;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let pivot = a[(j, j)] - (0..j).map(|k| l[(j, k)] * l[(j, k)]).sum::<f64>();
        if !(pivot > tol) {
            return false;
        }
        let d = pivot.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let s = a[(i, j)] - (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>();
            l[(i, j)] = s / d;
        }
    }
    true
}

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &SquareMatrix) -> SymmetricMatrix {
    SymmetricMatrix::from_unsymmetric(m.0.clone())
}

pub fn frobenius_norm<M: AsRef<DMatrix<f64>>>(m: &M) -> f64 {
    m.as_ref().norm()
}

pub fn entrywise_l1_norm<M: AsRef<DMatrix<f64>>>(m: &M) -> f64 {
    m.as_ref().iter().map(|v| v.abs()).sum()
}

/// `tr(M1ᵀ M2)`.
pub fn frobenius_inner<A, B>(m1: &A, m2: &B) -> Result<f64>
where
    A: AsRef<DMatrix<f64>>,
    B: AsRef<DMatrix<f64>>,
{
    let (a, b) = (m1.as_ref(), m2.as_ref());
    same_shape(a, b)?;
    Ok(a.iter().zip(b.iter()).map(|(x, y)| x * y).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sq(rows: &[&[f64]]) -> SquareMatrix {
        SquareMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn spectral_radius_examples() {
        assert_eq!(spectral_radius(&SquareMatrix::zeros(4)).unwrap(), 0.0);
        assert!((spectral_radius(&SquareMatrix::identity(3)).unwrap() - 1.0).abs() < 1e-14);
        let jordan = sq(&[&[0.5, 1.0], &[0.0, 0.5]]);
        assert!((spectral_radius(&jordan).unwrap() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn spectral_radius_of_rotation_is_modulus() {
        let (c, s) = (0.6 * 0.3_f64.cos(), 0.6 * 0.3_f64.sin());
        let r = sq(&[&[c, -s], &[s, c]]);
        assert!((spectral_radius(&r).unwrap() - 0.6).abs() < 1e-14);
    }

    #[test]
    fn schur_stability_examples() {
        assert!(is_schur_stable(&SquareMatrix::identity(2).scale(0.99).unwrap(), 0.0).unwrap());
        assert!(!is_schur_stable(&SquareMatrix::identity(2), 0.0).unwrap());
        let jordan = sq(&[&[0.5, 1.0], &[0.0, 0.5]]);
        assert!(!is_schur_stable(&jordan, 0.6).unwrap());
        assert!(is_schur_stable(&jordan, 0.4).unwrap());
    }

    #[test]
    fn positive_definite_examples() {
        assert!(is_positive_definite(&SymmetricMatrix::identity(5), 0.0));
        let singular = SymmetricMatrix::from_diagonal(&[1.0, 0.0]).unwrap();
        assert!(!is_positive_definite(&singular, 0.0));
        let m = SymmetricMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        assert!(is_positive_definite(&m, 1e-12));
        let indefinite = SymmetricMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(!is_positive_definite(&indefinite, 0.0));
    }

    #[test]
    fn symmetrize_examples() {
        let s = sq(&[&[0.0, 1.0], &[0.0, 0.0]]);
        assert_eq!(
            symmetrize(&s).to_rows(),
            vec![vec![0.0, 0.5], vec![0.5, 0.0]]
        );
        let s = sq(&[&[1.0, 2.0], &[4.0, 3.0]]);
        assert_eq!(
            symmetrize(&s).to_rows(),
            vec![vec![1.0, 3.0], vec![3.0, 3.0]]
        );
        let already = sq(&[&[1.0, 3.0], &[3.0, 3.0]]);
        assert_eq!(symmetrize(&already).as_matrix(), already.as_matrix());
    }

    #[test]
    fn norms_and_inner_product() {
        let z = SquareMatrix::zeros(3);
        assert_eq!(frobenius_norm(&z), 0.0);
        assert_eq!(entrywise_l1_norm(&z), 0.0);
        let m = sq(&[&[3.0, 4.0], &[0.0, 0.0]]);
        assert_eq!(frobenius_norm(&m), 5.0);
        assert_eq!(entrywise_l1_norm(&m), 7.0);
        let abcd = sq(&[&[1.5, -2.0], &[7.0, 0.25]]);
        assert_eq!(
            frobenius_inner(&SquareMatrix::identity(2), &abcd).unwrap(),
            1.75
        );
    }

    #[test]
    fn inner_product_rejects_mismatched_shapes() {
        let err = frobenius_inner(&SquareMatrix::zeros(2), &SquareMatrix::zeros(3)).unwrap_err();
        assert!(matches!(err, LinalgError::DimensionMismatch { .. }));
    }

    #[test]
    fn constructors_reject_bad_input() {
        assert!(matches!(
            SquareMatrix::from_rows(&[vec![1.0, f64::NAN], vec![0.0, 1.0]]),
            Err(LinalgError::NonFinite { row: 0, col: 1 })
        ));
        assert!(matches!(
            SquareMatrix::from_rows(&[vec![1.0, 2.0]]),
            Err(LinalgError::NotSquare { .. })
        ));
        assert!(matches!(
            SymmetricMatrix::from_rows(&[vec![1.0, 2.0], vec![2.5, 1.0]]),
            Err(LinalgError::Asymmetric { .. })
        ));
        assert!(matches!(
            RectMatrix::from_rows(&[vec![1.0, 2.0], vec![1.0]]),
            Err(LinalgError::Ragged { row: 1, .. })
        ));
        assert!(matches!(
            SquareMatrix::from_rows(&[]),
            Err(LinalgError::Empty)
        ));
    }

    fn small_matrix() -> impl Strategy<Value = SquareMatrix> {
        (1usize..6).prop_flat_map(|n| {
            proptest::collection::vec(-2.0f64..2.0, n * n)
                .prop_map(move |v| SquareMatrix::from_row_slice(n, &v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn symmetrize_is_idempotent(m in small_matrix()) {
            let once = symmetrize(&m);
            let twice = symmetrize(&once.to_square());
            prop_assert_eq!(once.as_matrix(), twice.as_matrix());
        }

        #[test]
        fn spectral_radius_is_homogeneous(m in small_matrix(), c in -3.0f64..3.0) {
            let r = spectral_radius(&m).unwrap();
            let rc = spectral_radius(&m.scale(c).unwrap()).unwrap();
            let expected = c.abs() * r;
            prop_assert!((rc - expected).abs() <= 1e-10 * expected.max(1e-300) || (rc - expected).abs() < 1e-13,
                "rho(cM) = {rc}, |c| rho(M) = {expected}");
        }

        #[test]
        fn pd_implies_positive_diagonal(m in small_matrix()) {
            let gram = SymmetricMatrix::from_unsymmetric(m.as_matrix() * m.as_matrix().transpose());
            let tol = default_pd_tolerance(&gram);
            if is_positive_definite(&gram, tol) {
                for i in 0..gram.dim() {
                    prop_assert!(gram.get(i, i) > tol);
                }
            }
        }

        #[test]
        fn inner_product_matches_norm(m in small_matrix()) {
            let ip = frobenius_inner(&m, &m).unwrap();
            let nrm = frobenius_norm(&m);
            prop_assert!((ip - nrm * nrm).abs() <= 1e-12 * ip.max(1e-300));
        }
    }
}
