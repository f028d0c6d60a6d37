//! Tucker-2 decomposition `t ≈ G ×₁ U ×₂ V` (modes 1 and 2 of a `D²×S×T`
//! kernel; the filter mode is left alone) with the smallest multilinear ranks
//! meeting a Frobenius error bound.
//!
//! For orthonormal `U`, `V` the optimal core is `G = t ×₁ Uᵀ ×₂ Vᵀ` and
//! `||t − G ×₁ U ×₂ V||² = ||t||² − ||G||²`. Given `V`, `||G||² = tr(Uᵀ Q₁ U)`
//! with `Q₁` the Gram matrix of the mode-1 slices projected onto `V`, so the
//! best `U` of rank `R₁` is the top-`R₁` eigenvectors of `Q₁` and the minimal
//! rank is the shortest eigenvalue prefix whose sum reaches `||t||² − δ²`.
//! `U` and `V` are updated in turn until the ranks and subspaces settle.

use crate::error::{Error, Result};
use crate::linalg::{orthonormality_deviation, sym_eig_desc};
use crate::tensor::{mode_product, unfold, DenseTensor, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct Tucker2Model {
    /// Core, `D²×R₁×R₂`.
    pub g: DenseTensor,
    /// `S×R₁`, orthonormal columns.
    pub u: Matrix,
    /// `T×R₂`, orthonormal columns.
    pub v: Matrix,
}

impl Tucker2Model {
    pub fn ranks(&self) -> (usize, usize) {
        (self.u.ncols(), self.v.ncols())
    }

    pub fn reconstruct(&self) -> DenseTensor {
        let t = mode_product(&self.g, &self.u, 1).expect("consistent model");
        mode_product(&t, &self.v, 2).expect("consistent model")
    }

    /// `R₁S + R₂T + R₁R₂D²`, the number of stored scalars.
    pub fn cost(&self) -> usize {
        let (r1, r2) = self.ranks();
        r1 * self.u.nrows() + r2 * self.v.nrows() + r1 * r2 * self.g.shape()[0]
    }
}

#[derive(Debug, Clone)]
pub struct Tucker2Options {
    /// Fixed `R₁`; chosen from the bound when `None`.
    pub rank1: Option<usize>,
    /// Fixed `R₂`; chosen from the bound when `None`.
    pub rank2: Option<usize>,
    /// Upper limit on full `U`/`V` alternations.
    pub max_alternations: usize,
    /// Projector change below which a factor counts as settled.
    pub subspace_tol: f64,
}

impl Default for Tucker2Options {
    fn default() -> Self {
        Self { rank1: None, rank2: None, max_alternations: 10, subspace_tol: 1e-6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tucker2Step {
    /// 1 for a `U` update, 2 for a `V` update.
    pub mode: usize,
    pub ranks: (usize, usize),
    pub error: f64,
    pub cost: usize,
}

#[derive(Debug, Clone)]
pub struct Tucker2Fit {
    pub model: Tucker2Model,
    /// Absolute reconstruction error.
    pub error: f64,
    pub trace: Vec<Tucker2Step>,
}

/// `Q₁(i, j) = Σ_r Σ_d (K(d, i, :)·v_r)(K(d, j, :)·v_r)`: `S×S`, PSD.
pub fn build_q1(t: &DenseTensor, v: &Matrix) -> Result<Matrix> {
    let (_, _, nt) = t.dims3()?;
    if v.nrows() != nt {
        return Err(Error::Shape(format!("V has {} rows, tensor mode 2 has {nt}", v.nrows())));
    }
    let proj = mode_product(t, &v.transpose(), 2)?;
    let m = unfold(&proj, 1)?;
    let q = &m * m.transpose();
    Ok((&q + q.transpose()) * 0.5)
}

/// `Q₂(i, j) = Σ_r Σ_d (K(d, :, i)·u_r)(K(d, :, j)·u_r)`: `T×T`, PSD.
pub fn build_q2(t: &DenseTensor, u: &Matrix) -> Result<Matrix> {
    let (_, ns, _) = t.dims3()?;
    if u.nrows() != ns {
        return Err(Error::Shape(format!("U has {} rows, tensor mode 1 has {ns}", u.nrows())));
    }
    let proj = mode_product(t, &u.transpose(), 1)?;
    let m = unfold(&proj, 2)?;
    let q = &m * m.transpose();
    Ok((&q + q.transpose()) * 0.5)
}

/// Smallest `R` whose top-`R` eigenvalues of `q` sum to at least
/// `energy_bound`, with the corresponding eigenvectors. An eigenvalue tied
/// with the last kept one is kept as well.
pub fn minimal_rank_eigvecs(q: &Matrix, energy_bound: f64) -> Result<(Matrix, usize)> {
    let n = q.nrows();
    if q.ncols() != n {
        return Err(Error::Shape("energy matrix must be square".into()));
    }
    let (vals, vecs) = sym_eig_desc(q);
    let vals: Vec<f64> = vals.into_iter().map(|l| l.max(0.0)).collect();
    let trace: f64 = vals.iter().sum();
    if energy_bound > trace * (1.0 + 1e-10) {
        return Err(Error::Infeasible {
            context: "energy bound exceeds the total energy".into(),
            min_residual: energy_bound - trace,
            bound: 0.0,
        });
    }
    if energy_bound <= 0.0 {
        return Ok((Matrix::zeros(n, 0), 0));
    }
    let slack = 1e-12 * trace;
    let mut rank = n;
    let mut acc = 0.0;
    for (r, &l) in vals.iter().enumerate() {
        acc += l;
        if acc >= energy_bound - slack {
            rank = r + 1;
            break;
        }
    }
    let lmax = vals[0];
    while rank < n
        && vals[rank - 1] > 1e-12 * lmax
        && vals[rank - 1] - vals[rank] <= 1e-10 * lmax
    {
        rank += 1;
    }
    Ok((vecs.columns(0, rank).into_owned(), rank))
}

fn top_eigvecs(q: &Matrix, rank: usize) -> Result<Matrix> {
    if rank == 0 || rank > q.nrows() {
        return Err(Error::InvalidArgument(format!(
            "fixed rank {rank} outside 1..={}",
            q.nrows()
        )));
    }
    let (_, vecs) = sym_eig_desc(q);
    Ok(vecs.columns(0, rank).into_owned())
}

/// Optimal core `t ×₁ Uᵀ ×₂ Vᵀ` for orthonormal `U`, `V`.
pub fn core_closed_form(t: &DenseTensor, u: &Matrix, v: &Matrix) -> Result<DenseTensor> {
    for (name, f) in [("U", u), ("V", v)] {
        let dev = orthonormality_deviation(f);
        if dev > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "{name} is not orthonormal (deviation {dev:.3e})"
            )));
        }
    }
    let g = mode_product(t, &u.transpose(), 1)?;
    mode_product(&g, &v.transpose(), 2)
}

fn projector_change(old: &Matrix, new: &Matrix) -> f64 {
    if old.ncols() != new.ncols() {
        return f64::INFINITY;
    }
    (old * old.transpose() - new * new.transpose()).norm()
}

/// Bound-constrained Tucker-2 (see module docs). Ranks are at least 1, so a
/// vacuous bound yields a rank-(1, 1) model.
pub fn tucker2_bounded(t: &DenseTensor, delta: f64, opts: &Tucker2Options) -> Result<Tucker2Fit> {
    let (_, ns, nt) = t.dims3()?;
    if !(delta >= 0.0) {
        return Err(Error::InvalidArgument("delta must be non-negative".into()));
    }
    if !t.is_finite() {
        return Err(Error::NonFinite);
    }
    let energy = t.norm_sq();
    let bound = energy - delta * delta;
    let choose = |q: &Matrix, fixed: Option<usize>| -> Result<Matrix> {
        match fixed {
            Some(r) => top_eigvecs(q, r),
            None => {
                let (vecs, r) = minimal_rank_eigvecs(q, bound.min(q.trace()))?;
                if r == 0 {
                    top_eigvecs(q, 1)
                } else {
                    Ok(vecs)
                }
            }
        }
    };
    let error_of = |u: &Matrix, v: &Matrix| -> Result<(Tucker2Model, f64)> {
        let g = core_closed_form(t, u, v)?;
        let model = Tucker2Model { g, u: u.clone(), v: v.clone() };
        let err = model.reconstruct().distance(t)?;
        Ok((model, err))
    };

    let mut u = Matrix::identity(ns, ns);
    let mut v = Matrix::identity(nt, nt);
    let mut trace = Vec::new();
    let mut settled = 0;
    let mut last = None;
    for step in 0..2 * opts.max_alternations.max(1) {
        let mode = if step % 2 == 0 { 1 } else { 2 };
        let changed = if mode == 1 {
            let new_u = choose(&build_q1(t, &v)?, opts.rank1)?;
            let moved = projector_change(&u, &new_u) > opts.subspace_tol;
            u = new_u;
            moved
        } else {
            let new_v = choose(&build_q2(t, &u)?, opts.rank2)?;
            let moved = projector_change(&v, &new_v) > opts.subspace_tol;
            v = new_v;
            moved
        };
        let (model, err) = error_of(&u, &v)?;
        trace.push(Tucker2Step { mode, ranks: model.ranks(), error: err, cost: model.cost() });
        last = Some((model, err));
        settled = if changed { 0 } else { settled + 1 };
        if settled >= 2 {
            break;
        }
    }
    let (model, error) = last.expect("at least one step");
    Ok(Tucker2Fit { model, error, trace })
}
