#![allow(dead_code)]

use std::path::PathBuf;

use covsteer::linalg::{spectral_radius, RectMatrix, SquareMatrix, SymmetricMatrix};
use covsteer::steering::{SteeringProblem, Support};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

pub fn reference_config() -> PathBuf {
    configs_dir().join("reference_5state.toml")
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Random matrix rescaled to spectral radius `rho`.
pub fn stable_matrix(rng: &mut ChaCha8Rng, n: usize, rho: f64) -> SquareMatrix {
    loop {
        let m = SquareMatrix::new(gaussian(rng, n, n)).unwrap();
        let r = spectral_radius(&m).unwrap();
        if r > 1e-3 {
            return m.scale(rho / r).unwrap();
        }
    }
}

/// `L Lᵀ + floor I` with a Gaussian `L`.
pub fn random_pd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> SymmetricMatrix {
    let l = gaussian(rng, n, n);
    let m = &l * l.transpose() / n as f64 + DMatrix::identity(n, n) * floor;
    SymmetricMatrix::new((&m + m.transpose()) * 0.5).unwrap()
}

/// Symmetric, sign-indefinite.
pub fn random_symmetric(rng: &mut ChaCha8Rng, n: usize) -> SymmetricMatrix {
    let m = gaussian(rng, n, n);
    SymmetricMatrix::new((&m + m.transpose()) * 0.5).unwrap()
}

/// Stable full-support problem with `ρ(A) ∈ [0.2, 0.85]`.
///
/// `B` is a Cholesky factor of a random PD matrix, so `BBᵀ ⪰ 0.2 I` and the
/// steady-state covariance stays well conditioned.
pub fn random_problem(rng: &mut ChaCha8Rng, n: usize) -> SteeringProblem {
    let rho = rng.random_range(0.2..0.85);
    let a = stable_matrix(rng, n, rho);
    let noise = random_pd(rng, n, 0.2).into_matrix();
    let b = RectMatrix::new(noise.cholesky().unwrap().l()).unwrap();
    let sigma_ref = random_pd(rng, n, 0.5);
    SteeringProblem::new(a, b, sigma_ref, Support::full(n), None).unwrap()
}
