//! Kernel in, factorized block out: the steps behind the command-line tool.

use crate::conv::{
    compose_kernel, conv2d_reference, count_params_flops, emit_cpd_block, emit_svd_block,
    emit_tkd_cpd_block, forward, svd_desc, ConvSpec, LayerDescriptor,
};
use crate::cpd::{cpd_als, AlsOptions, CPModel};
use crate::epc::{epc_correct, EpcOptions};
use crate::error::{Error, Result};
use crate::hybrid::{should_merge, tkd_cpd_epc, tkd_cpd_epc_preserving, HybridOptions};
use crate::io::{Block, BlockKind, Metrics};
use crate::synth::random_tensor;
use crate::tensor::{reshape_kernel, DenseTensor, Matrix};
use crate::tucker2::Tucker2Options;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Cpd,
    CpdEpc,
    TkdCpdEpc,
    Svd,
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cpd" => Ok(Method::Cpd),
            "cpd-epc" => Ok(Method::CpdEpc),
            "tkd-cpd-epc" => Ok(Method::TkdCpdEpc),
            "svd" => Ok(Method::Svd),
            _ => Err(Error::InvalidArgument(format!("unknown method {s:?}"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Cpd => "cpd",
            Method::CpdEpc => "cpd-epc",
            Method::TkdCpdEpc => "tkd-cpd-epc",
            Method::Svd => "svd",
        })
    }
}

#[derive(Debug, Clone)]
pub struct DecomposeOptions {
    pub method: Method,
    pub rank: usize,
    /// Fixed multilinear ranks for `tkd-cpd-epc`.
    pub ranks: Option<(usize, usize)>,
    /// Error bound as a fraction of `||K||`.
    pub delta_rel: Option<f64>,
    pub theta: f64,
    pub seed: u64,
    pub stride: usize,
    /// Defaults to `(D − 1)/2`.
    pub pad: Option<usize>,
    /// Input size used for the FLOP count.
    pub input_hw: (usize, usize),
}

impl DecomposeOptions {
    pub fn new(method: Method, rank: usize) -> Self {
        Self {
            method,
            rank,
            ranks: None,
            delta_rel: None,
            theta: 0.5,
            seed: 0,
            stride: 1,
            pad: None,
            input_hw: (16, 16),
        }
    }

    fn als(&self) -> AlsOptions {
        AlsOptions { max_iters: 2000, tol: 1e-12, restarts: 3, seed: self.seed, ..Default::default() }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub method: Method,
    pub block: BlockKind,
    pub rank: usize,
    pub ranks: Option<(usize, usize)>,
    /// Absolute bound actually enforced.
    pub delta: Option<f64>,
    pub rel_error: f64,
    pub ss_before: Option<f64>,
    pub ss_after: Option<f64>,
    pub sn_before: Option<f64>,
    pub sn_after: Option<f64>,
    pub err_tkd: Option<f64>,
    pub err_core: Option<f64>,
    pub params: usize,
    pub flops: usize,
}

#[derive(Debug, Clone)]
pub struct Decomposition {
    pub block: Block,
    pub report: Report,
}

/// Checks a `D×D×S×T` kernel and returns `D`.
pub fn kernel_extent(k4: &DenseTensor) -> Result<usize> {
    let s = k4.shape();
    if s.len() != 4 || s[0] != s[1] {
        return Err(Error::Shape(format!("expected a D×D×S×T kernel, got shape {s:?}")));
    }
    if !k4.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(s[0])
}

struct Fitted {
    kind: BlockKind,
    layers: Vec<LayerDescriptor>,
    report: Report,
}

pub fn decompose_kernel(k4: &DenseTensor, opts: &DecomposeOptions) -> Result<Decomposition> {
    let d = kernel_extent(k4)?;
    let (s, t) = (k4.shape()[2], k4.shape()[3]);
    let spec = ConvSpec::new(s, t, d, opts.stride, opts.pad.unwrap_or((d - 1) / 2))?;
    if opts.rank < 1 {
        return Err(Error::InvalidArgument("rank must be at least 1".into()));
    }
    if let Some(dr) = opts.delta_rel {
        if !(dr >= 0.0) {
            return Err(Error::InvalidArgument("delta must be non-negative".into()));
        }
    }
    let norm = k4.norm();
    let delta = opts.delta_rel.map(|r| r * norm);
    let rel = |e: f64| if norm > 0.0 { e / norm } else { e };
    let base = Report {
        method: opts.method,
        block: BlockKind::Cpd,
        rank: opts.rank,
        ranks: None,
        delta,
        rel_error: 0.0,
        ss_before: None,
        ss_after: None,
        sn_before: None,
        sn_after: None,
        err_tkd: None,
        err_core: None,
        params: 0,
        flops: 0,
    };
    // sensitivity depends on how each component's scale is split among the
    // factors; report it for the best split
    let cp_report = |before: &CPModel, after: &CPModel, err: f64| Report {
        rel_error: rel(err),
        ss_before: Some(before.balance().sensitivity()),
        ss_after: Some(after.balance().sensitivity()),
        sn_before: Some(before.intensity()),
        sn_after: Some(after.intensity()),
        ..base.clone()
    };
    let too_big = |err: f64, bound: f64, what: &str| Error::Infeasible {
        context: format!("{what} at rank {} misses the error bound", opts.rank),
        min_residual: err,
        bound,
    };

    let fitted = match opts.method {
        Method::Svd => {
            if d != 1 {
                return Err(Error::InvalidArgument("svd requires 1×1 kernel".into()));
            }
            let m = Matrix::from_fn(t, s, |r, c| k4.get(&[0, 0, c, r]));
            let rank = opts.rank.min(s.min(t));
            let layers = emit_svd_block(&m, rank, &spec)?;
            let (sv, _, _) = svd_desc(&m);
            let err = sv[rank..].iter().map(|x| x * x).sum::<f64>().sqrt();
            if let Some(b) = delta {
                if err > b {
                    return Err(too_big(err, b, "truncated SVD"));
                }
            }
            Fitted { kind: BlockKind::Svd, layers, report: Report { rel_error: rel(err), rank, ..base } }
        }
        Method::Cpd | Method::CpdEpc => {
            let k3 = reshape_kernel(k4)?;
            let fit = cpd_als(&k3, opts.rank, &opts.als())?;
            let err = fit.rel_error * norm;
            if let Some(b) = delta {
                if err > b {
                    return Err(too_big(err, b, "ALS"));
                }
            }
            let (model, err) = if opts.method == Method::CpdEpc {
                let eo = EpcOptions { delta: Some(delta.unwrap_or(err)), ..Default::default() };
                let (m, _) = epc_correct(&k3, &fit.model, &eo)?;
                let e = m.reconstruct().distance(&k3)?;
                (m, e)
            } else {
                (fit.model.clone(), err)
            };
            let report = cp_report(&fit.model, &model, err);
            Fitted { kind: BlockKind::Cpd, layers: emit_cpd_block(&model, &spec)?, report }
        }
        Method::TkdCpdEpc => {
            let k3 = reshape_kernel(k4)?;
            let (r1, r2) = opts.ranks.unwrap_or((opts.rank.min(s), opts.rank.min(t)));
            let mut ho = HybridOptions { theta: opts.theta, als: opts.als(), ..Default::default() };
            let fixed = Tucker2Options { rank1: Some(r1), rank2: Some(r2), ..Default::default() };
            let fit = match delta {
                Some(b) => {
                    if opts.ranks.is_some() {
                        ho.tucker = fixed;
                    }
                    tkd_cpd_epc(&k3, b, opts.rank, &ho)?
                }
                None => {
                    ho.tucker = fixed;
                    tkd_cpd_epc_preserving(&k3, opts.rank, &ho)?
                }
            };
            let (r1, r2, r) = fit.model.ranks();
            let mut report = cp_report(&fit.core_before, &fit.model.core_cp, fit.err_total);
            report.ranks = Some((r1, r2));
            report.err_tkd = Some(fit.err_tkd);
            report.err_core = Some(fit.err_core);
            if should_merge((r1, r2, r)) {
                let cp = fit.model.to_equivalent_cp();
                Fitted { kind: BlockKind::Cpd, layers: emit_cpd_block(&cp, &spec)?, report }
            } else {
                let layers = emit_tkd_cpd_block(&fit.model, &spec)?;
                Fitted { kind: BlockKind::TkdCpd, layers, report }
            }
        }
    };

    let (params, flops) = count_params_flops(&fitted.layers, opts.input_hw)?;
    let report = Report { block: fitted.kind, params, flops, ..fitted.report };
    let metrics = Metrics {
        rel_error: report.rel_error,
        sensitivity: report.ss_after,
        intensity: report.sn_after,
        params,
        flops,
        input_hw: [opts.input_hw.0, opts.input_hw.1],
    };
    let block = Block { kind: fitted.kind, spec, layers: fitted.layers, metrics };
    Ok(Decomposition { block, report })
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub trials: usize,
    /// Largest `||block(x) − conv(x, composed kernel)||` over the trials.
    pub max_deviation: f64,
    /// Largest `||block(x) − conv(x, K)||` against the original kernel.
    pub max_deviation_original: f64,
    pub kernel_rel_error: f64,
    pub reported_rel_error: f64,
    pub counts_match: bool,
    pub ok: bool,
}

/// Runs the block on `trials` random inputs against the convolution with the
/// kernel its layers compose to, and checks the stored metrics.
pub fn verify_block(block: &Block, k4: &DenseTensor, trials: usize, seed: u64) -> Result<VerifyReport> {
    let d = kernel_extent(k4)?;
    let (kc, cspec) = compose_kernel(&block.layers)?;
    let spec = &block.spec;
    if (cspec.in_channels, cspec.out_channels, cspec.kernel, cspec.stride, cspec.pad)
        != (spec.in_channels, spec.out_channels, spec.kernel, spec.stride, spec.pad)
    {
        return Err(Error::Shape("layers do not compose to the block's convolution".into()));
    }
    if kc.shape() != k4.shape() || d != spec.kernel {
        return Err(Error::Shape(format!(
            "block kernel {:?} does not match input kernel {:?}",
            kc.shape(),
            k4.shape()
        )));
    }
    let norm = k4.norm();
    let diff = kc.distance(k4)?;
    let kernel_rel_error = if norm > 0.0 { diff / norm } else { diff };
    let reported = block.metrics.rel_error;
    let hw = (block.metrics.input_hw[0], block.metrics.input_hw[1]);
    let counts_match = count_params_flops(&block.layers, hw)? == (block.metrics.params, block.metrics.flops);
    let mut ok = counts_match && (kernel_rel_error - reported).abs() <= 1e-8 + 1e-6 * reported;

    let composed_spec = ConvSpec { bias: cspec.bias.clone(), ..spec.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut max_dev, mut max_orig) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let x = random_tensor(&mut rng, &[hw.0, hw.1, spec.in_channels]);
        let xn = x.norm();
        let y = forward(&x, &block.layers)?;
        let dev = y.distance(&conv2d_reference(&x, &composed_spec, &kc)?)?;
        let orig = y.distance(&conv2d_reference(&x, spec, k4)?)?;
        ok &= dev <= 1e-8 * (1.0 + xn);
        // each input entry feeds at most D² outputs per channel
        ok &= orig <= diff * d as f64 * xn + 1e-8 * (1.0 + xn);
        max_dev = max_dev.max(dev);
        max_orig = max_orig.max(orig);
    }
    Ok(VerifyReport {
        trials,
        max_deviation: max_dev,
        max_deviation_original: max_orig,
        kernel_rel_error,
        reported_rel_error: reported,
        counts_match,
        ok,
    })
}
