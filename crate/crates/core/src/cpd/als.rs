use super::CPModel;
use crate::error::{Error, Result};
use crate::linalg::{column_norms, pinv_sym, sym_eig_desc};
use crate::synth::random_matrix;
use crate::tensor::{khatri_rao, unfold, DenseTensor, Matrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Relative eigenvalue cutoff for the `R×R` Gram pseudo-inverse.
const GRAM_CUTOFF: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlsInit {
    /// Seeded Gaussian factors.
    Random,
    /// Leading left singular vectors of each unfolding, padded with Gaussian
    /// columns when the rank exceeds the mode extent.
    SvdLeading,
}

#[derive(Debug, Clone)]
pub struct AlsOptions {
    pub max_iters: usize,
    /// Stop once the relative error changes by less than this between sweeps.
    pub tol: f64,
    pub init: AlsInit,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for AlsOptions {
    fn default() -> Self {
        Self {
            max_iters: 1000,
            tol: 1e-8,
            init: AlsInit::Random,
            restarts: 1,
            seed: 0,
        }
    }
}

impl AlsOptions {
    fn validate(&self) -> Result<()> {
        if self.max_iters < 1 || !(self.tol > 0.0) || self.restarts < 1 {
            return Err(Error::InvalidArgument(
                "ALS needs max_iters >= 1, tol > 0 and restarts >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CpdFit {
    /// Normalized model: unit columns, weights sorted descending.
    pub model: CPModel,
    /// `||t − [[A, B, C]]|| / ||t||`.
    pub rel_error: f64,
    /// Relative error after every sweep of the returned restart.
    pub history: Vec<f64>,
    /// Restart index that produced the returned model.
    pub restart: usize,
}

/// CP decomposition of an order-3 tensor by alternating least squares.
///
/// Each sweep solves `A ← T₍₀₎ (C ⊙ B) (CᵀC ∗ BᵀB)⁺` and cyclically for `B`,
/// `C`. The best of `opts.restarts` runs (lowest error, ties broken by lower
/// sensitivity) is returned.
pub fn cpd_als(t: &DenseTensor, rank: usize, opts: &AlsOptions) -> Result<CpdFit> {
    opts.validate()?;
    let dims = t.dims3()?;
    if rank < 1 {
        return Err(Error::InvalidArgument("CP rank must be at least 1".into()));
    }
    if !t.is_finite() {
        return Err(Error::NonFinite);
    }
    let norm = t.norm();
    if norm == 0.0 {
        let mut model = CPModel::zeros(dims, rank).normalize();
        model.lambda = Some(vec![0.0; rank]);
        return Ok(CpdFit { model, rel_error: 0.0, history: vec![0.0], restart: 0 });
    }

    let unfoldings = [unfold(t, 0)?, unfold(t, 1)?, unfold(t, 2)?];
    let mut best: Option<CpdFit> = None;
    for restart in 0..opts.restarts {
        let seed = opts.seed.wrapping_add(restart as u64);
        let fit = als_run(t, &unfoldings, norm, rank, opts, seed, restart)?;
        let better = match &best {
            None => true,
            Some(b) => {
                fit.rel_error < b.rel_error
                    || (fit.rel_error == b.rel_error
                        && fit.model.sensitivity() < b.model.sensitivity())
            }
        };
        if better {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn initial_factors(
    unfoldings: &[Matrix; 3],
    rank: usize,
    init: AlsInit,
    seed: u64,
) -> [Matrix; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |unf: &Matrix| -> Matrix {
        let n = unf.nrows();
        match init {
            AlsInit::Random => random_matrix(&mut rng, n, rank),
            AlsInit::SvdLeading => {
                let (_, vecs) = sym_eig_desc(&(unf * unf.transpose()));
                let mut m = random_matrix(&mut rng, n, rank);
                for q in 0..rank.min(n) {
                    m.set_column(q, &vecs.column(q));
                }
                m
            }
        }
    };
    [make(&unfoldings[0]), make(&unfoldings[1]), make(&unfoldings[2])]
}

fn als_run(
    t: &DenseTensor,
    unfoldings: &[Matrix; 3],
    norm: f64,
    rank: usize,
    opts: &AlsOptions,
    seed: u64,
    restart: usize,
) -> Result<CpdFit> {
    let [mut a, mut b, mut c] = initial_factors(unfoldings, rank, opts.init, seed);
    let mut lambda = vec![1.0; rank];
    let mut history = Vec::new();
    let mut prev = f64::INFINITY;

    for _ in 0..opts.max_iters {
        a = ls_update(&unfoldings[0], &c, &b);
        lambda = normalize_columns(&mut a);
        b = ls_update(&unfoldings[1], &c, &scaled(&a, &lambda));
        lambda = normalize_columns(&mut b);
        c = ls_update(&unfoldings[2], &scaled(&b, &lambda), &a);
        lambda = normalize_columns(&mut c);

        let model = CPModel { a: a.clone(), b: b.clone(), c: scaled(&c, &lambda), lambda: None };
        let err = model.reconstruct().distance(t)? / norm;
        history.push(err);
        if (prev - err).abs() < opts.tol || err < 1e-15 {
            break;
        }
        prev = err;
    }

    let model = CPModel { a, b, c: scaled(&c, &lambda), lambda: None }.normalize();
    let rel_error = model.reconstruct().distance(t)? / norm;
    Ok(CpdFit { model, rel_error, history, restart })
}

/// Least-squares update of the factor whose unfolding is `unf`, with the other
/// two factors combined as `outer ⊙ inner`.
fn ls_update(unf: &Matrix, outer: &Matrix, inner: &Matrix) -> Matrix {
    let z = khatri_rao(outer, inner).expect("consistent ranks");
    let gram = (outer.transpose() * outer).component_mul(&(inner.transpose() * inner));
    unf * z * pinv_sym(&gram, GRAM_CUTOFF)
}

fn normalize_columns(m: &mut Matrix) -> Vec<f64> {
    let norms = column_norms(m);
    for (q, &n) in norms.iter().enumerate() {
        if n > 0.0 {
            m.column_mut(q).unscale_mut(n);
        }
    }
    norms
}

fn scaled(m: &Matrix, w: &[f64]) -> Matrix {
    let mut out = m.clone();
    for (q, &s) in w.iter().enumerate() {
        out.column_mut(q).scale_mut(s);
    }
    out
}
