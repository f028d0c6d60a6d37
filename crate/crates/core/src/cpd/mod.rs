//! CP (Kruskal) models, their degeneracy diagnostics and ALS fitting.
//!
//! Two measures flag degenerate decompositions:
//!
//! * intensity: `Σ_r ||a_r ∘ b_r ∘ c_r||²`, large when components diverge;
//! * sensitivity: the expected squared change of the reconstruction under
//!   i.i.d. `N(0, σ²)` perturbations of every factor entry, divided by `σ²`, in
//!   the limit `σ → 0`. The closed form is
//!   `K·tr(AᵀA ∗ BᵀB) + I·tr(BᵀB ∗ CᵀC) + J·tr(AᵀA ∗ CᵀC)` with `(I, J, K)`
//!   the mode extents and `∗` the Hadamard product.
//!
//! The closed form carries no `1/R` factor: [`monte_carlo_sensitivity`]
//! normalizes by `σ²` only, and the two agree. Dividing additionally by the
//! rank gives the per-component average.

mod als;

pub use als::{cpd_als, AlsInit, AlsOptions, CpdFit};

use crate::error::{shape_err, Error, Result};
use crate::linalg::column_norms;
use crate::tensor::{reconstruct_cp, DenseTensor, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Unit-norm tolerance for the columns of a normalized model.
const UNIT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct CPModel {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    /// Per-component weights; present when the factor columns are unit norm.
    pub lambda: Option<Vec<f64>>,
}

impl CPModel {
    /// Unnormalized model `[[A, B, C]]`.
    pub fn new(a: Matrix, b: Matrix, c: Matrix) -> Result<Self> {
        let m = Self { a, b, c, lambda: None };
        m.validate()?;
        Ok(m)
    }

    /// Normalized model `Σ λ_r a_r ∘ b_r ∘ c_r` with unit-norm columns.
    pub fn with_lambda(a: Matrix, b: Matrix, c: Matrix, lambda: Vec<f64>) -> Result<Self> {
        let m = Self { a, b, c, lambda: Some(lambda) };
        m.validate()?;
        Ok(m)
    }

    pub fn zeros(dims: (usize, usize, usize), rank: usize) -> Self {
        Self {
            a: Matrix::zeros(dims.0, rank),
            b: Matrix::zeros(dims.1, rank),
            c: Matrix::zeros(dims.2, rank),
            lambda: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.a.ncols();
        if self.b.ncols() != r || self.c.ncols() != r {
            return shape_err(format!(
                "factor column counts differ: {}, {}, {}",
                self.a.ncols(),
                self.b.ncols(),
                self.c.ncols()
            ));
        }
        if let Some(lambda) = &self.lambda {
            if lambda.len() != r {
                return shape_err(format!("lambda has {} entries for rank {r}", lambda.len()));
            }
            if lambda.iter().any(|&l| !(l >= 0.0)) {
                return Err(Error::InvalidArgument("lambda must be non-negative".into()));
            }
            for f in [&self.a, &self.b, &self.c] {
                for (q, n) in column_norms(f).into_iter().enumerate() {
                    if (n - 1.0).abs() > UNIT_TOL {
                        return Err(Error::InvalidArgument(format!(
                            "column {q} has norm {n}, expected unit norm with lambda present"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.a.ncols()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.a.nrows(), self.b.nrows(), self.c.nrows())
    }

    /// Factor `A` with the weights folded into its columns.
    pub fn weighted_a(&self) -> Matrix {
        match &self.lambda {
            None => self.a.clone(),
            Some(l) => {
                let mut a = self.a.clone();
                for (q, &w) in l.iter().enumerate() {
                    a.column_mut(q).scale_mut(w);
                }
                a
            }
        }
    }

    /// Same model without the weight vector (weights folded into `A`).
    pub fn absorbed(&self) -> CPModel {
        CPModel {
            a: self.weighted_a(),
            b: self.b.clone(),
            c: self.c.clone(),
            lambda: None,
        }
    }

    pub fn reconstruct(&self) -> DenseTensor {
        reconstruct_cp(&self.weighted_a(), &self.b, &self.c).expect("validated model")
    }

    /// Number of stored scalars in Kruskal form, `R(I + J + K)`.
    pub fn param_count(&self) -> usize {
        let (i, j, k) = self.dims();
        self.rank() * (i + j + k)
    }

    /// Squared column norms of the (weighted) factors.
    fn squared_norms(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let sq = |m: &Matrix| column_norms(m).into_iter().map(|n| n * n).collect::<Vec<_>>();
        (sq(&self.weighted_a()), sq(&self.b), sq(&self.c))
    }

    /// Intensity: `Σ_r λ_r² ||a_r||² ||b_r||² ||c_r||²`.
    pub fn intensity(&self) -> f64 {
        let (a, b, c) = self.squared_norms();
        (0..self.rank()).map(|r| a[r] * b[r] * c[r]).sum()
    }

    /// Closed-form sensitivity (see module docs).
    pub fn sensitivity(&self) -> f64 {
        let (ni, nj, nk) = self.dims();
        let (a, b, c) = self.squared_norms();
        // tr(XᵀX ∗ YᵀY) only sees the diagonals, i.e. squared column norms.
        let tr = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
        nk as f64 * tr(&a, &b) + ni as f64 * tr(&b, &c) + nj as f64 * tr(&a, &c)
    }

    /// Unit-norm columns with magnitudes collected into `lambda`, sorted by
    /// descending weight. Zero columns get `λ = 0` and are replaced by `e₁`.
    pub fn normalize(&self) -> CPModel {
        let r = self.rank();
        let base = self.lambda.clone().unwrap_or_else(|| vec![1.0; r]);
        let (na, nb, nc) = (column_norms(&self.a), column_norms(&self.b), column_norms(&self.c));
        let mut a = self.a.clone();
        let mut b = self.b.clone();
        let mut c = self.c.clone();
        let mut lambda = vec![0.0; r];
        for q in 0..r {
            let w = base[q] * na[q] * nb[q] * nc[q];
            if w == 0.0 || na[q] == 0.0 || nb[q] == 0.0 || nc[q] == 0.0 {
                for f in [&mut a, &mut b, &mut c] {
                    f.column_mut(q).fill(0.0);
                    f[(0, q)] = 1.0;
                }
                lambda[q] = 0.0;
            } else {
                a.column_mut(q).unscale_mut(na[q]);
                b.column_mut(q).unscale_mut(nb[q]);
                c.column_mut(q).unscale_mut(nc[q]);
                lambda[q] = w;
            }
        }
        let mut order: Vec<usize> = (0..r).collect();
        order.sort_by(|&x, &y| lambda[y].total_cmp(&lambda[x]));
        let pick = |m: &Matrix| Matrix::from_fn(m.nrows(), r, |i, q| m[(i, order[q])]);
        CPModel {
            a: pick(&a),
            b: pick(&b),
            c: pick(&c),
            lambda: Some(order.iter().map(|&q| lambda[q]).collect()),
        }
    }

    /// Rescales each component across its three factors to minimize the
    /// sensitivity while leaving every rank-1 term unchanged. Components with
    /// a zero factor column are zeroed entirely. The result is unnormalized.
    pub fn balance(&self) -> CPModel {
        let (ni, nj, nk) = self.dims();
        let (fi, fj, fk) = (ni as f64, nj as f64, nk as f64);
        let mut m = self.absorbed();
        let (na, nb, nc) = (column_norms(&m.a), column_norms(&m.b), column_norms(&m.c));
        for q in 0..m.rank() {
            if na[q] == 0.0 || nb[q] == 0.0 || nc[q] == 0.0 {
                m.a.column_mut(q).fill(0.0);
                m.b.column_mut(q).fill(0.0);
                m.c.column_mut(q).fill(0.0);
                continue;
            }
            // With α = ||a||², β = ||b||², γ = ||c||² and αβγ = P fixed,
            // K·αβ + I·βγ + J·αγ is minimal when all three terms are equal.
            let p = (na[q] * nb[q] * nc[q]).powi(2);
            let level = (fi * fj * fk * p * p).cbrt();
            let (ab, bc, ac) = (level / fk, level / fi, level / fj);
            let alpha = (ab * ac / bc).sqrt();
            let beta = (ab * bc / ac).sqrt();
            let gamma = (bc * ac / ab).sqrt();
            m.a.column_mut(q).scale_mut(alpha.sqrt() / na[q]);
            m.b.column_mut(q).scale_mut(beta.sqrt() / nb[q]);
            m.c.column_mut(q).scale_mut(gamma.sqrt() / nc[q]);
        }
        m
    }
}

/// Monte-Carlo estimate of `E{||T − [[A+δA, B+δB, C+δC]]||²} / σ²` with
/// `T = [[A, B, C]]` and i.i.d. `N(0, σ²)` perturbations, averaged over `n`
/// draws. Ground-truth check for [`CPModel::sensitivity`].
pub fn monte_carlo_sensitivity(m: &CPModel, sigma: f64, n: usize, seed: u64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument("sigma must be positive".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let base = m.absorbed();
    let t = base.reconstruct();
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perturb = |x: &Matrix, rng: &mut ChaCha8Rng| x.map(|v| v + normal.sample(rng));
    let mut acc = 0.0;
    for _ in 0..n {
        let pa = perturb(&base.a, &mut rng);
        let pb = perturb(&base.b, &mut rng);
        let pc = perturb(&base.c, &mut rng);
        let tp = reconstruct_cp(&pa, &pb, &pc)?;
        let d = t.distance(&tp)?;
        acc += d * d;
    }
    Ok(acc / (n as f64 * sigma * sigma))
}

/// Draws `rank` Gaussian components for a `dims`-shaped model.
pub fn random_model<R: Rng + ?Sized>(rng: &mut R, dims: (usize, usize, usize), rank: usize) -> CPModel {
    use crate::synth::random_matrix;
    CPModel {
        a: random_matrix(rng, dims.0, rank),
        b: random_matrix(rng, dims.1, rank),
        c: random_matrix(rng, dims.2, rank),
        lambda: None,
    }
}
