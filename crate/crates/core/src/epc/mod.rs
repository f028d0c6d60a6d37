//! Error-preserving correction (EPC) of CP models.
//!
//! Minimizes the sensitivity of `[[A, B, C]]` subject to
//! `||t − [[A, B, C]]||_F ≤ δ` by alternating over the factors. With the other
//! two factors fixed, the sensitivity is `Σ_r w_r² ||a_r||² + const`, so each
//! step is a weighted minimum-norm regression over a residual ball; the
//! substitution `Ã = A·diag(w)`, `Z̃ = Z·diag(w)⁻¹` turns it into
//! [`spherical_qp`].

mod qp;

pub use qp::{secular_function, spherical_qp, QpSolution, SecularFunction};

use crate::cpd::CPModel;
use crate::error::{Error, Result};
use crate::linalg::column_norms;
use crate::tensor::{khatri_rao, unfold, DenseTensor, Matrix};

/// How the per-component weights of each factor subproblem are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightMode {
    /// Weights that make the subproblem objective equal to the sensitivity,
    /// e.g. `w_r² = K·||b_r||² + J·||c_r||²` for the `A` update.
    #[default]
    Exact,
    /// Dimension-free weights `w_r² = ||b_r||² + ||c_r||²` (diagonal of
    /// `BᵀB + CᵀC`). Sensitivity is then not guaranteed to decrease.
    Unweighted,
}

#[derive(Debug, Clone)]
pub struct EpcOptions {
    /// Absolute Frobenius error bound; `None` keeps the input model's error.
    pub delta: Option<f64>,
    pub max_sweeps: usize,
    /// Relative sensitivity change below which the sweeps stop.
    pub ss_tol: f64,
    /// Tolerance of the spherical QP root find.
    pub qp_tol: f64,
    pub weights: WeightMode,
    /// Redistribute norms within each component before and after every sweep.
    pub balance: bool,
}

impl Default for EpcOptions {
    fn default() -> Self {
        Self {
            delta: None,
            max_sweeps: 100,
            ss_tol: 1e-6,
            qp_tol: 1e-10,
            weights: WeightMode::Exact,
            balance: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpcPoint {
    pub error: f64,
    pub sensitivity: f64,
}

#[derive(Debug, Clone)]
pub struct EpcTrace {
    /// Absolute bound actually enforced.
    pub delta: f64,
    pub initial: EpcPoint,
    /// State after each sweep.
    pub sweeps: Vec<EpcPoint>,
    /// Factor updates discarded because they would have raised the sensitivity.
    pub rejected_updates: usize,
}

impl EpcTrace {
    pub fn last(&self) -> EpcPoint {
        self.sweeps.last().copied().unwrap_or(self.initial)
    }
}

/// Minimum-weighted-norm factor update
/// `min ||A·diag(w)||²  s.t.  ||K₁ − A·Zᵀ||² ≤ δ²`.
pub fn factor_update_bounded(
    k1: &Matrix,
    z: &Matrix,
    w: &[f64],
    delta: f64,
    qp_tol: f64,
) -> Result<Matrix> {
    Ok(factor_update_full(k1, z, w, delta, qp_tol)?.0)
}

fn factor_update_full(
    k1: &Matrix,
    z: &Matrix,
    w: &[f64],
    delta: f64,
    qp_tol: f64,
) -> Result<(Matrix, QpSolution)> {
    if w.len() != z.ncols() {
        return Err(Error::Shape(format!("{} weights for {} columns", w.len(), z.ncols())));
    }
    if w.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidArgument("factor weights must be strictly positive".into()));
    }
    let mut zt = z.clone();
    for (q, &wq) in w.iter().enumerate() {
        zt.column_mut(q).unscale_mut(wq);
    }
    let sol = spherical_qp(k1, &zt, delta, qp_tol)?;
    let mut a = sol.x.clone();
    for (q, &wq) in w.iter().enumerate() {
        a.column_mut(q).unscale_mut(wq);
    }
    Ok((a, sol))
}

/// Per-component weights for updating factor `mode` of `m`.
pub fn factor_weights(m: &CPModel, mode: usize, weights: WeightMode) -> Vec<f64> {
    let (ni, nj, nk) = m.dims();
    let sq = |f: &Matrix| column_norms(f).into_iter().map(|n| n * n).collect::<Vec<_>>();
    let (a, b, c) = (sq(&m.a), sq(&m.b), sq(&m.c));
    let (p, q, cp, cq) = match mode {
        0 => (&b, &c, nk as f64, nj as f64),
        1 => (&a, &c, nk as f64, ni as f64),
        _ => (&b, &a, ni as f64, nj as f64),
    };
    let (cp, cq) = match weights {
        WeightMode::Exact => (cp, cq),
        WeightMode::Unweighted => (1.0, 1.0),
    };
    p.iter().zip(q).map(|(x, y)| (cp * x + cq * y).sqrt()).collect()
}

fn factor_name(mode: usize) -> &'static str {
    ["A", "B", "C"][mode]
}

/// Runs the alternating correction. The returned model is unnormalized
/// (normalizing would redistribute norms and change its sensitivity).
pub fn epc_correct(t: &DenseTensor, m: &CPModel, opts: &EpcOptions) -> Result<(CPModel, EpcTrace)> {
    m.validate()?;
    let dims = t.dims3()?;
    if m.dims() != dims {
        return Err(Error::Shape(format!(
            "model dims {:?} do not match tensor {:?}",
            m.dims(),
            dims
        )));
    }
    if !(opts.ss_tol > 0.0) || !(opts.qp_tol > 0.0) {
        return Err(Error::InvalidArgument("tolerances must be positive".into()));
    }
    let tnorm = t.norm();
    let mut cur = m.absorbed();
    let err_of = |m: &CPModel| -> Result<f64> { m.reconstruct().distance(t) };
    let initial = EpcPoint { error: err_of(&cur)?, sensitivity: cur.sensitivity() };
    let delta = opts.delta.unwrap_or(initial.error);
    if !(delta >= 0.0) {
        return Err(Error::InvalidArgument("delta must be non-negative".into()));
    }
    // numerical slack on the bound for accepting a rebalanced model
    let slack = 1e-9 * tnorm;
    let unfoldings = [unfold(t, 0)?, unfold(t, 1)?, unfold(t, 2)?];
    let mut trace = EpcTrace { delta, initial, sweeps: Vec::new(), rejected_updates: 0 };

    let mut cur_err = initial.error;
    let mut cur_ss = initial.sensitivity;
    if opts.balance {
        try_balance(&mut cur, &mut cur_err, &mut cur_ss, t, delta + slack)?;
    }

    for _ in 0..opts.max_sweeps {
        let ss_start = cur_ss;
        for mode in 0..3 {
            let w = factor_weights(&cur, mode, opts.weights);
            let active: Vec<usize> = (0..cur.rank()).filter(|&q| w[q] > 0.0).collect();
            let z_full = match mode {
                0 => khatri_rao(&cur.c, &cur.b)?,
                1 => khatri_rao(&cur.c, &cur.a)?,
                _ => khatri_rao(&cur.b, &cur.a)?,
            };
            let z = Matrix::from_fn(z_full.nrows(), active.len(), |r, c| z_full[(r, active[c])]);
            let wa: Vec<f64> = active.iter().map(|&q| w[q]).collect();
            let (upd, _) = factor_update_full(&unfoldings[mode], &z, &wa, delta, opts.qp_tol)
                .map_err(|e| match e {
                    Error::Infeasible { min_residual, bound, .. } => Error::Infeasible {
                        context: format!("EPC update of factor {}", factor_name(mode)),
                        min_residual,
                        bound,
                    },
                    other => other,
                })?;

            let mut cand = cur.clone();
            let f = match mode {
                0 => &mut cand.a,
                1 => &mut cand.b,
                _ => &mut cand.c,
            };
            f.fill(0.0);
            for (c, &q) in active.iter().enumerate() {
                f.set_column(q, &upd.column(c));
            }
            let err = err_of(&cand)?;
            let ss = cand.sensitivity();
            let feasible_now = cur_err <= delta + slack;
            let accept = if feasible_now {
                err <= delta + slack
                    && (opts.weights == WeightMode::Unweighted || ss <= cur_ss)
            } else {
                err < cur_err
            };
            if accept {
                cur = cand;
                cur_err = err;
                cur_ss = ss;
            } else {
                trace.rejected_updates += 1;
            }
        }
        if opts.balance {
            try_balance(&mut cur, &mut cur_err, &mut cur_ss, t, delta + slack)?;
        }
        trace.sweeps.push(EpcPoint { error: cur_err, sensitivity: cur_ss });
        let change = (ss_start - cur_ss).abs() / ss_start.max(f64::MIN_POSITIVE);
        if change < opts.ss_tol || cur_ss == 0.0 {
            break;
        }
    }
    Ok((cur, trace))
}

fn try_balance(
    cur: &mut CPModel,
    err: &mut f64,
    ss: &mut f64,
    t: &DenseTensor,
    bound: f64,
) -> Result<()> {
    let bal = cur.balance();
    let bal_ss = bal.sensitivity();
    if bal_ss <= *ss {
        let bal_err = bal.reconstruct().distance(t)?;
        if bal_err <= bound.max(*err) {
            *cur = bal;
            *err = bal_err;
            *ss = bal_ss;
        }
    }
    Ok(())
}
