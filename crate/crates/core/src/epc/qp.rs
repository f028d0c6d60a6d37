//! Minimum-norm least squares over a residual ball.
//!
//! Solves `min ||X||²  s.t.  ||Y − X·Ztᵀ||² ≤ δ²`. Stationary points of the
//! Lagrangian are `X(μ) = μ·Y·Zt·(I + μ·ZtᵀZt)⁻¹`, `μ ≥ 0`. In the eigenbasis
//! `ZtᵀZt = Q·diag(λ)·Qᵀ`, with `p_i = Y·Zt·q_i`,
//!
//! ```text
//! residual(μ) = r_ls + Σ_i (||p_i||² / λ_i) / (1 + μ·λ_i)²
//! ```
//!
//! where `r_ls` is the ordinary least-squares residual. The function is
//! decreasing and convex in `μ`, so Newton iterations started left of the
//! root approach it monotonically; bisection guards the bracket.

use crate::error::{Error, Result};
use crate::linalg::sym_eig_desc;
use crate::tensor::Matrix;

/// Eigenvalues below this fraction of the largest are treated as zero.
const EIG_CUTOFF: f64 = 1e-12;
const MAX_ROOT_ITERS: usize = 200;

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: Matrix,
    /// Lagrange multiplier; `0` when the origin is feasible, `+∞` when the
    /// bound coincides with the least-squares residual.
    pub mu: f64,
    /// `||Y − X·Ztᵀ||²` of the returned `x`.
    pub residual: f64,
}

/// Residual as a function of the multiplier, in the eigenbasis of `ZtᵀZt`.
#[derive(Debug, Clone)]
pub struct SecularFunction {
    pub r_ls: f64,
    /// `(λ_i, ||p_i||² / λ_i)` for the retained eigenpairs.
    pub terms: Vec<(f64, f64)>,
}

impl SecularFunction {
    pub fn value(&self, mu: f64) -> f64 {
        if mu.is_infinite() {
            return self.r_ls;
        }
        self.r_ls
            + self
                .terms
                .iter()
                .map(|&(l, g)| g / ((1.0 + mu * l) * (1.0 + mu * l)))
                .sum::<f64>()
    }

    pub fn derivative(&self, mu: f64) -> f64 {
        -2.0 * self
            .terms
            .iter()
            .map(|&(l, g)| g * l / (1.0 + mu * l).powi(3))
            .sum::<f64>()
    }
}

struct Eigenbasis {
    /// Retained eigenvectors of `ZtᵀZt` (columns) and eigenvalues.
    q: Matrix,
    lambda: Vec<f64>,
    /// `Y·Zt·Q`, one column per retained eigenpair.
    p: Matrix,
}

fn eigenbasis(y: &Matrix, zt: &Matrix) -> Eigenbasis {
    let gram = zt.transpose() * zt;
    let (vals, vecs) = sym_eig_desc(&gram);
    let lmax = vals.first().copied().unwrap_or(0.0);
    let keep: Vec<usize> = (0..vals.len())
        .filter(|&i| lmax > 0.0 && vals[i] > EIG_CUTOFF * lmax)
        .collect();
    let q = Matrix::from_fn(vecs.nrows(), keep.len(), |r, c| vecs[(r, keep[c])]);
    let lambda: Vec<f64> = keep.iter().map(|&i| vals[i]).collect();
    let p = y * zt * &q;
    Eigenbasis { q, lambda, p }
}

fn x_of_mu(basis: &Eigenbasis, mu: f64) -> Matrix {
    let mut scaled = basis.p.clone();
    for (c, &l) in basis.lambda.iter().enumerate() {
        let f = if mu.is_infinite() { 1.0 / l } else { mu / (1.0 + mu * l) };
        scaled.column_mut(c).scale_mut(f);
    }
    scaled * basis.q.transpose()
}

fn residual(y: &Matrix, x: &Matrix, zt: &Matrix) -> f64 {
    (y - x * zt.transpose()).norm_squared()
}

/// Solves the ball-constrained minimum-norm problem described in the module
/// docs. `qp_tol` is relative to `δ²` for the active-constraint condition and
/// to `||Y||²` for the feasibility test.
pub fn spherical_qp(y: &Matrix, zt: &Matrix, delta: f64, qp_tol: f64) -> Result<QpSolution> {
    if y.ncols() != zt.nrows() {
        return Err(Error::Shape(format!(
            "Y has {} columns but Zt has {} rows",
            y.ncols(),
            zt.nrows()
        )));
    }
    if !(delta >= 0.0) || !(qp_tol > 0.0) {
        return Err(Error::InvalidArgument("need delta >= 0 and qp_tol > 0".into()));
    }
    let d2 = delta * delta;
    let y2 = y.norm_squared();
    if d2 >= y2 {
        return Ok(QpSolution { x: Matrix::zeros(y.nrows(), zt.ncols()), mu: 0.0, residual: y2 });
    }

    let basis = eigenbasis(y, zt);
    let x_ls = x_of_mu(&basis, f64::INFINITY);
    let r_ls = residual(y, &x_ls, zt);
    if r_ls > d2 * (1.0 + qp_tol) + qp_tol * y2 {
        return Err(Error::Infeasible {
            context: "least-squares residual exceeds the bound".into(),
            min_residual: r_ls.sqrt(),
            bound: delta,
        });
    }
    let secular = SecularFunction {
        r_ls,
        terms: basis
            .lambda
            .iter()
            .enumerate()
            .map(|(c, &l)| (l, basis.p.column(c).norm_squared() / l))
            .collect(),
    };
    let tol_abs = qp_tol * d2;
    if r_ls >= d2 - tol_abs {
        return Ok(QpSolution { x: x_ls, mu: f64::INFINITY, residual: r_ls });
    }

    if basis.lambda.is_empty() {
        return Ok(QpSolution { x: x_ls, mu: f64::INFINITY, residual: r_ls });
    }
    let phi = |mu: f64| secular.value(mu) - d2;
    let lmax = basis.lambda[0];
    let (mut lo, mut hi) = (0.0, 1.0 / lmax);
    let mut doublings = 0;
    while phi(hi) > 0.0 {
        lo = hi;
        hi *= 2.0;
        doublings += 1;
        if doublings > 4000 {
            return Ok(QpSolution { x: x_ls, mu: f64::INFINITY, residual: r_ls });
        }
    }

    for _ in 0..MAX_ROOT_ITERS {
        let f_hi = phi(hi);
        if f_hi >= -tol_abs {
            return Ok(finish(y, zt, &basis, hi));
        }
        let f_lo = phi(lo);
        let mut cand = lo - f_lo / secular.derivative(lo);
        if !(cand > lo && cand < hi) {
            cand = 0.5 * (lo + hi);
        }
        let f = phi(cand);
        if f > 0.0 {
            lo = cand;
            if f <= tol_abs {
                // Newton from the left lands just short of the root; step
                // past it by the same amount to reach the feasible side.
                let over = lo - 2.0 * f / secular.derivative(lo);
                if over > lo && over < hi && phi(over) <= 0.0 {
                    hi = over;
                }
            }
        } else {
            hi = cand;
        }
        if hi - lo <= 4.0 * f64::EPSILON * hi {
            return Ok(finish(y, zt, &basis, hi));
        }
    }
    Err(Error::NoConvergence { iters: MAX_ROOT_ITERS, lo, hi })
}

fn finish(y: &Matrix, zt: &Matrix, basis: &Eigenbasis, mu: f64) -> QpSolution {
    let x = x_of_mu(basis, mu);
    let residual = residual(y, &x, zt);
    QpSolution { x, mu, residual }
}

/// Secular function of a problem instance, exposed for diagnostics and tests.
pub fn secular_function(y: &Matrix, zt: &Matrix) -> SecularFunction {
    let basis = eigenbasis(y, zt);
    let x_ls = x_of_mu(&basis, f64::INFINITY);
    SecularFunction {
        r_ls: residual(y, &x_ls, zt),
        terms: basis
            .lambda
            .iter()
            .enumerate()
            .map(|(c, &l)| (l, basis.p.column(c).norm_squared() / l))
            .collect(),
    }
}
