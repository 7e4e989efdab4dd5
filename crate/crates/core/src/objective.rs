//! KL divergence between zero-mean Gaussians and its gradient in the first argument.

use std::fmt;

use nalgebra::{Cholesky, DMatrix, Dyn};
use thiserror::Error;

use crate::linalg::{default_pd_tolerance, is_positive_definite, LinalgError, SymmetricMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WhichMatrix {
    Sigma,
    SigmaRef,
}

impl fmt::Display for WhichMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WhichMatrix::Sigma => "sigma",
            WhichMatrix::SigmaRef => "sigma_ref",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("{0} is not positive definite")]
    NotPositiveDefinite(WhichMatrix),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

#[derive(Debug, Clone, PartialEq)]
pub struct KlEvaluation {
    /// `KL(N(0, Σ) ‖ N(0, Σ_ref))` in nats.
    pub value: f64,
    /// `½(Σ_ref⁻¹ − Σ⁻¹)`.
    pub grad_wrt_sigma: SymmetricMatrix,
    pub logdet_ref: f64,
    pub logdet_sigma: f64,
}

/// A reference covariance with its factorization and inverse cached.
#[derive(Debug, Clone)]
pub struct GaussianReference {
    sigma_ref: SymmetricMatrix,
    chol: Cholesky<f64, Dyn>,
    inverse: DMatrix<f64>,
    logdet: f64,
}

impl GaussianReference {
    pub fn new(sigma_ref: SymmetricMatrix) -> Result<Self> {
        let chol = pd_cholesky(&sigma_ref, WhichMatrix::SigmaRef)?;
        let inverse = symmetric_part(chol.inverse());
        let logdet = chol_logdet(&chol);
        Ok(Self {
            sigma_ref,
            chol,
            inverse,
            logdet,
        })
    }

    pub fn sigma_ref(&self) -> &SymmetricMatrix {
        &self.sigma_ref
    }

    pub fn dim(&self) -> usize {
        self.sigma_ref.dim()
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    /// Value and gradient of `KL(Σ ‖ Σ_ref)`.
    pub fn kl(&self, sigma: &SymmetricMatrix) -> Result<KlEvaluation> {
        let n = self.dim();
        if sigma.dim() != n {
            return Err(LinalgError::DimensionMismatch {
                left: (sigma.dim(), sigma.dim()),
                right: (n, n),
            }
            .into());
        }
        let chol = pd_cholesky(sigma, WhichMatrix::Sigma)?;
        let logdet_sigma = chol_logdet(&chol);
        let trace_term = self.chol.solve(sigma.as_matrix()).trace();
        let value = 0.5 * (trace_term - n as f64 + self.logdet - logdet_sigma);

        let sigma_inv = chol.solve(&DMatrix::identity(n, n));
        let grad = symmetric_part((&self.inverse - sigma_inv) * 0.5);
        Ok(KlEvaluation {
            value,
            grad_wrt_sigma: SymmetricMatrix::new(grad)?,
            logdet_ref: self.logdet,
            logdet_sigma,
        })
    }

    /// Value only; skips the gradient.
    pub fn kl_value(&self, sigma: &SymmetricMatrix) -> Result<f64> {
        let n = self.dim();
        if sigma.dim() != n {
            return Err(LinalgError::DimensionMismatch {
                left: (sigma.dim(), sigma.dim()),
                right: (n, n),
            }
            .into());
        }
        let chol = pd_cholesky(sigma, WhichMatrix::Sigma)?;
        let trace_term = self.chol.solve(sigma.as_matrix()).trace();
        Ok(0.5 * (trace_term - n as f64 + self.logdet - chol_logdet(&chol)))
    }
}

/// `KL(N(0, sigma) ‖ N(0, sigma_ref))` with its gradient in `sigma`.
pub fn kl_gaussian(sigma: &SymmetricMatrix, sigma_ref: &SymmetricMatrix) -> Result<KlEvaluation> {
    GaussianReference::new(sigma_ref.clone())?.kl(sigma)
}

fn pd_cholesky(m: &SymmetricMatrix, which: WhichMatrix) -> Result<Cholesky<f64, Dyn>> {
    if !is_positive_definite(m, default_pd_tolerance(m)) {
        return Err(ObjectiveError::NotPositiveDefinite(which));
    }
    Cholesky::new(m.as_matrix().clone()).ok_or(ObjectiveError::NotPositiveDefinite(which))
}

fn chol_logdet(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol
        .l_dirty()
        .diagonal()
        .iter()
        .map(|d| d.ln())
        .sum::<f64>()
}

fn symmetric_part(m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut out = m;
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (out[(i, j)] + out[(j, i)]);
            out[(i, j)] = avg;
            out[(j, i)] = avg;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(v: &[f64]) -> SymmetricMatrix {
        SymmetricMatrix::from_diagonal(v).unwrap()
    }

    #[test]
    fn identical_distributions() {
        let s = SymmetricMatrix::from_rows(&[vec![2.0, 0.3], vec![0.3, 1.0]]).unwrap();
        let kl = kl_gaussian(&s, &s).unwrap();
        assert!(kl.value.abs() < 1e-15);
        assert!(kl.grad_wrt_sigma.as_matrix().amax() < 1e-15);
    }

    #[test]
    fn scalar_value_and_gradient() {
        let kl = kl_gaussian(&diag(&[2.0]), &diag(&[1.0])).unwrap();
        let expected = 0.5 * (2.0 - 1.0 + (0.5f64).ln());
        assert!((kl.value - expected).abs() < 1e-15);
        assert!((kl.value - 0.153_426).abs() < 1e-5);
        assert!((kl.grad_wrt_sigma.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((kl.logdet_sigma - 2f64.ln()).abs() < 1e-15);
        assert_eq!(kl.logdet_ref, 0.0);

        let h = 1e-5;
        let fd = (kl_gaussian(&diag(&[2.0 + h]), &diag(&[1.0])).unwrap().value
            - kl_gaussian(&diag(&[2.0 - h]), &diag(&[1.0])).unwrap().value)
            / (2.0 * h);
        assert!((fd - 0.25).abs() < 1e-9);
    }

    #[test]
    fn non_pd_inputs_are_named() {
        let singular = diag(&[1.0, 0.0]);
        let good = diag(&[1.0, 1.0]);
        assert_eq!(
            kl_gaussian(&singular, &good).unwrap_err(),
            ObjectiveError::NotPositiveDefinite(WhichMatrix::Sigma)
        );
        assert_eq!(
            kl_gaussian(&good, &singular).unwrap_err(),
            ObjectiveError::NotPositiveDefinite(WhichMatrix::SigmaRef)
        );
    }

    #[test]
    fn dimension_mismatch() {
        let r = GaussianReference::new(diag(&[1.0, 1.0])).unwrap();
        assert!(matches!(
            r.kl(&diag(&[1.0])),
            Err(ObjectiveError::Linalg(_))
        ));
    }

    #[test]
    fn value_only_path_agrees() {
        let r = GaussianReference::new(diag(&[0.5, 3.0])).unwrap();
        let s = SymmetricMatrix::from_rows(&[vec![1.0, 0.2], vec![0.2, 2.0]]).unwrap();
        assert_eq!(r.kl(&s).unwrap().value, r.kl_value(&s).unwrap());
    }
}
