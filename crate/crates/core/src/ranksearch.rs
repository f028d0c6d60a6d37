//! Binary search for the smallest rank whose quality score is within a
//! threshold.
//!
//! Scores are assumed non-increasing in the rank. The search still runs when
//! they are not, but then the result is only heuristic and flagged as such.

use crate::cpd::{cpd_als, AlsOptions};
use crate::epc::{epc_correct, EpcOptions};
use crate::error::{Error, Result};
use crate::hybrid::{tkd_cpd_epc_preserving, HybridOptions};
use crate::io::{save_block, write_tensor, Dtype};
use crate::pipeline::{decompose_kernel, kernel_extent, DecomposeOptions, Method};
use crate::tensor::{reshape_kernel, DenseTensor};
use crate::tucker2::Tucker2Options;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

#[derive(Debug, Clone, PartialEq)]
pub enum Evaluator {
    /// Relative reconstruction error of the decomposition.
    ApproxError,
    /// Shell command run as `command <block.json> <kernel.kten>`, printing one
    /// number.
    ExternalCommand(String),
}

#[derive(Debug, Clone, Serialize)]
pub struct SearchResult {
    pub rank: usize,
    pub score: f64,
    /// False when even the largest rank misses the threshold.
    pub met: bool,
    /// True when the visited scores were not monotone in the rank.
    pub heuristic: bool,
    /// `(rank, score)` in evaluation order.
    pub evaluations: Vec<(usize, f64)>,
}

/// Smallest `R` in `r_min..=r_max` with `score(R) ≤ eps`, using at most
/// `⌈log₂(r_max − r_min + 1)⌉ + 1` calls to `score`.
pub fn search_with(
    r_min: usize,
    r_max: usize,
    eps: f64,
    mut score: impl FnMut(usize) -> Result<f64>,
) -> Result<SearchResult> {
    if r_min < 1 || r_min > r_max {
        return Err(Error::InvalidArgument(format!("bad rank range {r_min}..={r_max}")));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("threshold must be positive".into()));
    }
    let mut seen = BTreeMap::new();
    let mut order = Vec::new();
    let mut eval = |r: usize, seen: &mut BTreeMap<usize, f64>| -> Result<f64> {
        if let Some(&s) = seen.get(&r) {
            return Ok(s);
        }
        let s = score(r)?;
        if !s.is_finite() {
            return Err(Error::Evaluator(format!("non-finite score at rank {r}")));
        }
        seen.insert(r, s);
        order.push((r, s));
        Ok(s)
    };
    let (mut lo, mut hi) = (r_min, r_max);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if eval(mid, &mut seen)? <= eps {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let score = eval(lo, &mut seen)?;
    let scores: Vec<f64> = seen.values().copied().collect();
    let heuristic = scores.windows(2).any(|w| w[1] > w[0] * (1.0 + 1e-9) + 1e-15);
    Ok(SearchResult { rank: lo, score, met: score <= eps, heuristic, evaluations: order })
}

/// Relative reconstruction error of `method` at `rank`, with fixed seed and
/// options. `t` is an order-3 tensor or a `D×D×S×T` kernel.
pub fn approx_error_proxy(t: &DenseTensor, method: Method, rank: usize) -> Result<f64> {
    if rank < 1 {
        return Err(Error::InvalidArgument("rank must be at least 1".into()));
    }
    let t3 = if t.order() == 4 { reshape_kernel(t)? } else { t.clone() };
    let (_, s, tt) = t3.dims3()?;
    let norm = t3.norm();
    if norm == 0.0 {
        return Ok(0.0);
    }
    let als = AlsOptions { max_iters: 3000, tol: 1e-13, restarts: 3, seed: 0, ..Default::default() };
    let err = match method {
        Method::Cpd => return Ok(cpd_als(&t3, rank, &als)?.rel_error),
        Method::CpdEpc => {
            let fit = cpd_als(&t3, rank, &als)?;
            let (m, _) = epc_correct(&t3, &fit.model, &EpcOptions::default())?;
            m.reconstruct().distance(&t3)?
        }
        Method::TkdCpdEpc => {
            let tucker = Tucker2Options {
                rank1: Some(rank.min(s)),
                rank2: Some(rank.min(tt)),
                ..Default::default()
            };
            let opts = HybridOptions { tucker, als, ..Default::default() };
            tkd_cpd_epc_preserving(&t3, rank, &opts)?.err_total
        }
        Method::Svd => {
            return Err(Error::InvalidArgument("the error proxy covers CP-based methods".into()))
        }
    };
    Ok(err / norm)
}

#[derive(Debug, Clone)]
pub struct SearchOptions {
    pub eps: f64,
    pub r_min: usize,
    pub r_max: usize,
    pub seed: u64,
}

/// Runs an external evaluator once. Failures carry the captured output.
pub fn run_evaluator(command: &str, block_json: &Path, kernel: &Path) -> Result<f64> {
    let out = Command::new("sh")
        .arg("-c")
        .arg(format!("{command} \"$1\" \"$2\""))
        .arg("sh")
        .arg(block_json)
        .arg(kernel)
        .output()?;
    let stdout = String::from_utf8_lossy(&out.stdout);
    let stderr = String::from_utf8_lossy(&out.stderr);
    if !out.status.success() {
        return Err(Error::Evaluator(format!(
            "`{command}` exited with {}; stdout: {:?}; stderr: {:?}",
            out.status,
            stdout.trim(),
            stderr.trim()
        )));
    }
    stdout.trim().parse::<f64>().map_err(|_| {
        Error::Evaluator(format!(
            "`{command}` printed {:?} instead of a single number; stderr: {:?}",
            stdout.trim(),
            stderr.trim()
        ))
    })
}

/// Rank search over `t` (order 3, or a `D×D×S×T` kernel; the external
/// evaluator needs the kernel form).
pub fn binary_search_rank(
    t: &DenseTensor,
    method: Method,
    ev: &Evaluator,
    opts: &SearchOptions,
) -> Result<SearchResult> {
    match ev {
        Evaluator::ApproxError => {
            search_with(opts.r_min, opts.r_max, opts.eps, |r| approx_error_proxy(t, method, r))
        }
        Evaluator::ExternalCommand(cmd) => {
            kernel_extent(t)?;
            let dir = tempfile::tempdir()?;
            let kpath = dir.path().join("kernel.kten");
            write_tensor(&kpath, t, Dtype::F64)?;
            search_with(opts.r_min, opts.r_max, opts.eps, |r| {
                let mut d = DecomposeOptions::new(method, r);
                d.seed = opts.seed;
                let dec = decompose_kernel(t, &d)?;
                let json = save_block(&dir.path().join(format!("rank{r}")), &dec.block)?;
                run_evaluator(cmd, &json, &kpath)
            })
        }
    }
}
