//! Seeded random generators and synthetic test problems.

use crate::tensor::{DenseTensor, Matrix};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn random_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn random_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> DenseTensor {
    DenseTensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// `rows × cols` matrix with orthonormal columns (`cols <= rows`), from the QR
/// factorization of a Gaussian matrix.
pub fn random_orthonormal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    assert!(cols <= rows, "cannot have more orthonormal columns than rows");
    let g = random_matrix(rng, rows, cols);
    let q = g.qr().q();
    q.columns(0, cols).into_owned()
}

/// Unit-norm Gaussian vector as an `n × 1` matrix.
pub fn random_unit<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Matrix {
    let v = random_matrix(rng, n, 1);
    let nrm = v.norm();
    v / nrm
}
