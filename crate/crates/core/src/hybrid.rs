//! TKD-CPD: Tucker-2 compression of a kernel followed by a corrected CP model
//! of the Tucker core.
//!
//! With `U`, `V` orthonormal and `G` the optimal core, the residual
//! `t − G ×₁ U ×₂ V` is orthogonal to anything of the form `H ×₁ U ×₂ V`, so
//! `err_total² = err_tkd² + err_core²` where `err_core` is measured on the
//! core alone. The total budget is split in the energy domain:
//! `δ_tkd² = θ·δ²` for the Tucker stage and `δ_core² = δ² − err_tkd²` for the
//! core.

use crate::cpd::{cpd_als, AlsInit, AlsOptions, CPModel};
use crate::epc::{epc_correct, EpcOptions, EpcTrace};
use crate::error::{Error, Result};
use crate::tensor::{mode_product, DenseTensor, Matrix};
use crate::tucker2::{tucker2_bounded, Tucker2Fit, Tucker2Options};

#[derive(Debug, Clone, PartialEq)]
pub struct HybridModel {
    /// `S×R₁`, orthonormal columns.
    pub u: Matrix,
    /// `T×R₂`, orthonormal columns.
    pub v: Matrix,
    /// CP model of the `D²×R₁×R₂` core.
    pub core_cp: CPModel,
}

impl HybridModel {
    pub fn new(u: Matrix, v: Matrix, core_cp: CPModel) -> Result<Self> {
        core_cp.validate()?;
        let (_, r1, r2) = core_cp.dims();
        if u.ncols() != r1 || v.ncols() != r2 {
            return Err(Error::Shape(format!(
                "core dims ({r1}, {r2}) do not match U ({}) and V ({}) columns",
                u.ncols(),
                v.ncols()
            )));
        }
        Ok(Self { u, v, core_cp })
    }

    /// `(R₁, R₂, R)`.
    pub fn ranks(&self) -> (usize, usize, usize) {
        (self.u.ncols(), self.v.ncols(), self.core_cp.rank())
    }

    /// `(D², S, T)` of the represented kernel.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.core_cp.dims().0, self.u.nrows(), self.v.nrows())
    }

    pub fn reconstruct(&self) -> DenseTensor {
        let g = self.core_cp.reconstruct();
        let t = mode_product(&g, &self.u, 1).expect("consistent model");
        mode_product(&t, &self.v, 2).expect("consistent model")
    }

    /// `R₁S + R₂T + R(D² + R₁ + R₂)`; lambda is folded into the core.
    pub fn param_count(&self) -> usize {
        let (d2, s, t) = self.dims();
        let (r1, r2, r) = self.ranks();
        r1 * s + r2 * t + r * (d2 + r1 + r2)
    }

    /// Plain CP model of the full kernel: `A` unchanged, `B' = U·B`, `C' = V·C`.
    pub fn to_equivalent_cp(&self) -> CPModel {
        CPModel {
            a: self.core_cp.a.clone(),
            b: &self.u * &self.core_cp.b,
            c: &self.v * &self.core_cp.c,
            lambda: self.core_cp.lambda.clone(),
        }
    }
}

/// Whether the two middle 1×1 layers of a TKD-CPD block should be folded into
/// the outer ones, turning it into a CPD block.
pub fn should_merge(ranks: (usize, usize, usize)) -> bool {
    let (r1, r2, r) = ranks;
    r < r1 && r < r2
}

#[derive(Debug, Clone)]
pub struct HybridOptions {
    /// Share of the squared error budget given to the Tucker stage, in `[0, 1]`.
    pub theta: f64,
    pub tucker: Tucker2Options,
    pub als: AlsOptions,
    /// `delta` is overwritten with the core budget.
    pub epc: EpcOptions,
}

impl Default for HybridOptions {
    fn default() -> Self {
        Self {
            theta: 0.5,
            tucker: Tucker2Options::default(),
            als: AlsOptions {
                max_iters: 2000,
                tol: 1e-12,
                restarts: 3,
                init: AlsInit::Random,
                seed: 0,
            },
            epc: EpcOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct HybridFit {
    pub model: HybridModel,
    pub tucker: Tucker2Fit,
    pub epc_trace: EpcTrace,
    pub delta_core: f64,
    /// Absolute errors of the Tucker stage, the core CP model on the core, and
    /// the whole model.
    pub err_tkd: f64,
    pub err_core: f64,
    pub err_total: f64,
    /// Core CP model straight out of ALS, before correction.
    pub core_before: CPModel,
}

/// Tucker-2 with budget `√θ·δ`, then CP of rank `rank` on the core, corrected
/// by EPC within the remaining budget.
pub fn tkd_cpd_epc(
    t: &DenseTensor,
    delta_total: f64,
    rank: usize,
    opts: &HybridOptions,
) -> Result<HybridFit> {
    check(t, rank, opts)?;
    if !(delta_total >= 0.0) {
        return Err(Error::InvalidArgument("delta must be non-negative".into()));
    }
    let tk = tucker2_bounded(t, opts.theta.sqrt() * delta_total, &opts.tucker)?;
    let slack = 1e-9 * t.norm();
    if tk.error > delta_total + slack {
        return Err(Error::Infeasible {
            context: "Tucker-2 stage alone exceeds the total bound; raise theta or use rank mode"
                .into(),
            min_residual: tk.error,
            bound: delta_total,
        });
    }
    let delta_core = (delta_total * delta_total - tk.error * tk.error).max(0.0).sqrt();
    finish(t, tk, rank, Some(delta_core), opts)
}

/// Fixed-rank variant: `opts.tucker` must fix both multilinear ranks, and the
/// core correction keeps the ALS error of the core instead of a given budget.
pub fn tkd_cpd_epc_preserving(t: &DenseTensor, rank: usize, opts: &HybridOptions) -> Result<HybridFit> {
    check(t, rank, opts)?;
    if opts.tucker.rank1.is_none() || opts.tucker.rank2.is_none() {
        return Err(Error::InvalidArgument(
            "fixed multilinear ranks are required without an error bound".into(),
        ));
    }
    let tk = tucker2_bounded(t, 0.0, &opts.tucker)?;
    finish(t, tk, rank, None, opts)
}

fn check(t: &DenseTensor, rank: usize, opts: &HybridOptions) -> Result<()> {
    t.dims3()?;
    if rank < 1 {
        return Err(Error::InvalidArgument("CP rank must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&opts.theta) {
        return Err(Error::InvalidArgument("theta must lie in [0, 1]".into()));
    }
    Ok(())
}

/// Exact CP model of a `D²×R₁×R₂` core with one component per `(i, j)` slice,
/// padded with zero components up to `rank ≥ R₁R₂`.
fn slice_cp(g: &DenseTensor, rank: usize) -> CPModel {
    let (d2, r1, r2) = g.dims3().expect("order-3 core");
    let mut m = CPModel::zeros((d2, r1, r2), rank);
    for j in 0..r2 {
        for i in 0..r1 {
            let q = i + j * r1;
            for d in 0..d2 {
                m.a[(d, q)] = g.at3(d, i, j);
            }
            m.b[(i, q)] = 1.0;
            m.c[(j, q)] = 1.0;
        }
    }
    m
}

fn finish(
    t: &DenseTensor,
    tk: Tucker2Fit,
    rank: usize,
    delta_core: Option<f64>,
    opts: &HybridOptions,
) -> Result<HybridFit> {
    let g = &tk.model.g;
    let (_, r1, r2) = g.dims3()?;
    let slack = 1e-9 * t.norm();
    let fit = cpd_als(g, rank, &opts.als)?;
    let mut start = fit.model;
    let mut start_err = fit.rel_error * g.norm();
    if let Some(dc) = delta_core {
        if start_err > dc + slack && rank >= r1 * r2 {
            start = slice_cp(g, rank);
            start_err = start.reconstruct().distance(g)?;
        }
        if start_err > dc + slack {
            return Err(Error::Infeasible {
                context: format!("CP rank {rank} cannot fit the Tucker core within the remaining budget"),
                min_residual: start_err,
                bound: dc,
            });
        }
    }
    let delta_core = delta_core.unwrap_or(start_err).max(start_err);
    let epc_opts = EpcOptions { delta: Some(delta_core), ..opts.epc.clone() };
    let (core_cp, epc_trace) = epc_correct(g, &start, &epc_opts)?;
    let model = HybridModel::new(tk.model.u.clone(), tk.model.v.clone(), core_cp)?;
    let err_core = model.core_cp.reconstruct().distance(g)?;
    let err_total = model.reconstruct().distance(t)?;
    Ok(HybridFit {
        err_tkd: tk.error,
        err_core,
        err_total,
        delta_core,
        model,
        tucker: tk,
        epc_trace,
        core_before: start,
    })
}
