//! Acceptance checks, one line per criterion. Exits nonzero if any fails.

use kernel_decomp::conv::{
    conv2d_reference, count_params_flops, emit_cpd_block, emit_svd_block, emit_tkd_cpd_block, forward,
    ConvSpec,
};
use kernel_decomp::cpd::{cpd_als, monte_carlo_sensitivity, random_model, AlsOptions, CPModel};
use kernel_decomp::epc::{epc_correct, spherical_qp, EpcOptions, EpcTrace};
use kernel_decomp::hybrid::{tkd_cpd_epc, HybridModel, HybridOptions};
use kernel_decomp::linalg::sym_eig_desc;
use kernel_decomp::pipeline::Method;
use kernel_decomp::ranksearch::{binary_search_rank, Evaluator, SearchOptions};
use kernel_decomp::synth::{random_matrix, random_orthonormal, random_tensor, random_unit};
use kernel_decomp::tensor::{reconstruct_cp, unreshape_kernel, DenseTensor, Matrix};
use kernel_decomp::tucker2::{build_q1, build_q2, tucker2_bounded, Tucker2Model, Tucker2Options};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

struct Check {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Check {
    Check { pass, detail }
}

/// EPC runs collected for the error-preservation criterion: trace and the
/// norm of the tensor it was fitted to.
type Runs = Vec<(EpcTrace, f64)>;

fn sensitivity_closed_form() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut worst = 0.0f64;
    for n in 0..12 {
        let dims = (rng.random_range(4..=8), rng.random_range(4..=8), rng.random_range(4..=8));
        let r = rng.random_range(2..=5);
        let m = random_model(&mut rng, dims, r);
        let mc = monte_carlo_sensitivity(&m, 1e-4, 2000, 5000 + n).unwrap();
        worst = worst.max((mc - m.sensitivity()).abs() / m.sensitivity());
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst <= 0.02 && secs < 10.0, format!("12 models, worst relative gap {:.3}%, {secs:.2}s", worst * 100.0))
}

/// A weak rank-1 signal fitted by a rank-2 model whose two components are
/// `s` times larger and almost cancel.
fn canceling_start(rng: &mut ChaCha8Rng, dims: (usize, usize, usize), s: f64) -> (DenseTensor, CPModel) {
    let (a, b, c) = (random_unit(rng, dims.0), random_unit(rng, dims.1), random_unit(rng, dims.2));
    let noise = random_tensor(rng, &[dims.0, dims.1, dims.2]);
    let t = reconstruct_cp(&a, &b, &c).unwrap().add(&noise.scale(0.01 / noise.norm())).unwrap();
    let u = random_unit(rng, dims.0);
    let mut fa = Matrix::zeros(dims.0, 2);
    fa.set_column(0, &(&u * s + &a).column(0));
    fa.set_column(1, &(&u * -s).column(0));
    let fb = Matrix::from_fn(dims.1, 2, |i, _| b[(i, 0)]);
    let fc = Matrix::from_fn(dims.2, 2, |i, _| c[(i, 0)]);
    (t, CPModel::new(fa, fb, fc).unwrap())
}

fn degeneracy_correction(runs: &mut Runs) -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    let mut worst_ratio = f64::INFINITY;
    let mut bound_ok = true;
    let mut norms_ok = true;
    for dims in [(4, 5, 6), (5, 5, 5), (9, 6, 7), (6, 8, 4), (9, 10, 10), (3, 4, 5)] {
        let (t, m) = canceling_start(&mut rng, dims, 150.0);
        let comp = (m.a.column(1).norm() * m.b.column(1).norm() * m.c.column(1).norm()).min(
            m.a.column(0).norm() * m.b.column(0).norm() * m.c.column(0).norm(),
        );
        norms_ok &= comp >= 100.0 * t.norm();
        let delta = m.reconstruct().distance(&t).unwrap();
        let (out, trace) = epc_correct(&t, &m, &EpcOptions { delta: Some(delta), ..Default::default() }).unwrap();
        worst_ratio = worst_ratio.min(m.sensitivity() / out.sensitivity());
        bound_ok &= out.reconstruct().distance(&t).unwrap() <= delta + 1e-8 * t.norm();
        runs.push((trace, t.norm()));
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        norms_ok && bound_ok && worst_ratio >= 10.0 && secs < 30.0,
        format!("6 tensors, smallest sensitivity reduction {worst_ratio:.1}x, bound kept: {bound_ok}, {secs:.2}s"),
    )
}

fn extra_epc_runs(runs: &mut Runs) {
    let mut rng = ChaCha8Rng::seed_from_u64(1003);
    for n in 0..8 {
        let t = random_tensor(&mut rng, &[5, 6, 7]);
        let fit = cpd_als(&t, 3, &AlsOptions { seed: n, ..Default::default() }).unwrap();
        let err = fit.rel_error * t.norm();
        let delta = if n % 2 == 0 { err } else { err * 1.1 };
        let (_, trace) = epc_correct(&t, &fit.model, &EpcOptions { delta: Some(delta), ..Default::default() }).unwrap();
        runs.push((trace, t.norm()));
    }
}

fn error_preservation(runs: &Runs) -> Check {
    let mut sweeps = 0;
    let mut ok = true;
    for (trace, norm) in runs {
        let slack = 1e-8 * norm;
        sweeps += trace.sweeps.len();
        ok &= trace.sweeps.iter().all(|p| p.error <= trace.delta + slack);
        ok &= trace.sweeps.windows(2).all(|w| w[1].sensitivity <= w[0].sensitivity * (1.0 + 1e-10));
        if trace.initial.error <= trace.delta + slack {
            if let Some(first) = trace.sweeps.first() {
                ok &= first.sensitivity <= trace.initial.sensitivity * (1.0 + 1e-10);
            }
        }
    }
    check(ok, format!("{} runs, {sweeps} sweeps checked", runs.len()))
}

fn qp_kkt() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1004);
    let (mut worst_stat, mut worst_comp) = (0.0f64, 0.0f64);
    let mut zero_mu = 0;
    for n in 0..120 {
        let (m, k, r) = (rng.random_range(1..=6), rng.random_range(3..=20), rng.random_range(1..=5));
        let y = random_matrix(&mut rng, m, k);
        let zt = random_matrix(&mut rng, k, r);
        let ls = {
            let x = &y * &zt * (zt.transpose() * &zt).try_inverse().unwrap_or_else(|| Matrix::zeros(r, r));
            (&y - x * zt.transpose()).norm_squared()
        };
        let total = y.norm_squared();
        let delta = if n % 10 == 0 {
            total.sqrt() * 1.05
        } else {
            (ls + rng.random_range(0.05..0.95) * (total - ls)).sqrt()
        };
        let sol = spherical_qp(&y, &zt, delta, 1e-12).unwrap();
        let scale = sol.x.norm().max(1e-300);
        if sol.mu == 0.0 {
            zero_mu += 1;
            worst_stat = worst_stat.max(sol.x.norm());
            continue;
        }
        let inner = Matrix::identity(r, r) + zt.transpose() * &zt * sol.mu;
        let want = (&y * &zt * sol.mu) * inner.try_inverse().unwrap();
        worst_stat = worst_stat.max((&sol.x - want).norm() / scale);
        let resid = (&y - &sol.x * zt.transpose()).norm_squared();
        worst_comp = worst_comp.max((resid - delta * delta).abs() / (delta * delta));
    }
    check(
        worst_stat <= 1e-8 && worst_comp <= 1e-8,
        format!("120 instances ({zero_mu} with mu = 0), stationarity {worst_stat:.1e}, complementarity {worst_comp:.1e}"),
    )
}

fn tucker_minimality() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1005);
    let mut ok = true;
    let mut runs = 0;
    let mut notes = Vec::new();
    for shape in [[9, 16, 16], [16, 32, 32], [4, 10, 12]] {
        let raw = random_tensor(&mut rng, &shape);
        // give the spectrum some decay so the ranks are not all full
        let low = Tucker2Model {
            g: random_tensor(&mut rng, &[shape[0], 3, 4]),
            u: random_orthonormal(&mut rng, shape[1], 3),
            v: random_orthonormal(&mut rng, shape[2], 4),
        }
        .reconstruct();
        for t in [raw.clone(), low.add(&raw.scale(0.2 * low.norm() / raw.norm())).unwrap()] {
            for frac in [0.05, 0.1, 0.2] {
                let delta = frac * t.norm();
                let fit = tucker2_bounded(&t, delta, &Tucker2Options::default()).unwrap();
                let bound = t.norm_sq() - delta * delta;
                let (r1, r2) = fit.model.ranks();
                let (l1, _) = sym_eig_desc(&build_q1(&t, &fit.model.v).unwrap());
                let (l2, _) = sym_eig_desc(&build_q2(&t, &fit.model.u).unwrap());
                let minimal = l1[..r1 - 1].iter().sum::<f64>() < bound && l2[..r2 - 1].iter().sum::<f64>() < bound;
                let within = fit.error <= delta + 1e-8 * t.norm();
                ok &= minimal && within;
                runs += 1;
                if !(minimal && within) {
                    notes.push(format!("{shape:?} frac {frac}: ranks ({r1}, {r2}) minimal {minimal} within {within}"));
                }
            }
        }
    }
    let mut worst_exact = 0.0f64;
    for (r1, r2) in [(2, 3), (4, 4), (1, 5)] {
        let t = Tucker2Model {
            g: random_tensor(&mut rng, &[9, r1, r2]),
            u: random_orthonormal(&mut rng, 12, r1),
            v: random_orthonormal(&mut rng, 14, r2),
        }
        .reconstruct();
        let t = t.scale(1.0 / t.norm());
        let fit = tucker2_bounded(&t, 0.0, &Tucker2Options::default()).unwrap();
        ok &= fit.model.ranks() == (r1, r2);
        worst_exact = worst_exact.max(fit.error);
    }
    ok &= worst_exact <= 1e-10;
    let mut detail = format!("{runs} bounded runs, exact recovery error {worst_exact:.1e}");
    if !notes.is_empty() {
        detail.push_str(&format!("; failures: {}", notes.join(", ")));
    }
    check(ok, detail)
}

fn hybrid_pythagorean(runs: &mut Runs) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1006);
    let mut worst = 0.0f64;
    let mut bound_ok = true;
    let mut count = 0;
    for n in 0..12 {
        let t = if n % 2 == 0 {
            random_tensor(&mut rng, &[9, 6, 7])
        } else {
            let clean = random_model(&mut rng, (9, 8, 8), 4).reconstruct();
            let noise = random_tensor(&mut rng, &[9, 8, 8]);
            clean.add(&noise.scale(0.02 * clean.norm() / noise.norm())).unwrap()
        };
        let delta = [0.3, 0.45, 0.6][n % 3] * t.norm();
        let opts = HybridOptions { theta: [0.3, 0.5, 0.8][n % 3], ..Default::default() };
        let (r1, r2) = tucker2_bounded(&t, opts.theta.sqrt() * delta, &opts.tucker).unwrap().model.ranks();
        let rank = if n % 2 == 0 { r1 * r2 } else { 4 };
        let fit = match tkd_cpd_epc(&t, delta, rank, &opts) {
            Ok(f) => f,
            Err(_) => tkd_cpd_epc(&t, delta, r1 * r2, &opts).unwrap(),
        };
        let gap = (fit.err_total.powi(2) - fit.err_tkd.powi(2) - fit.err_core.powi(2)).abs() / t.norm_sq();
        worst = worst.max(gap);
        bound_ok &= fit.err_total <= delta + 1e-8 * t.norm();
        runs.push((fit.epc_trace.clone(), fit.tucker.model.g.norm()));
        count += 1;
    }
    check(worst <= 1e-8 && bound_ok, format!("{count} runs, worst |gap|/||t||² {worst:.1e}, bound kept: {bound_ok}"))
}

fn block_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1007);
    let (mut worst_exact, mut worst_inexact) = (0.0f64, 0.0f64);
    let mut blocks = 0;
    let inputs = |rng: &mut ChaCha8Rng, c: usize| -> Vec<DenseTensor> {
        (0..5).map(|_| random_tensor(rng, &[7, 8, c])).collect()
    };
    let mut run = |layers: &[kernel_decomp::conv::LayerDescriptor], spec: &ConvSpec, k: &DenseTensor, xs: &[DenseTensor], exact: bool| {
        for x in xs {
            let dev = forward(x, layers).unwrap().distance(&conv2d_reference(x, spec, k).unwrap()).unwrap();
            if exact {
                worst_exact = worst_exact.max(dev);
            } else {
                worst_inexact = worst_inexact.max(dev / (1.0 + x.norm()));
            }
        }
        blocks += 1;
    };

    // exact: the kernel is built from the model that is emitted
    for (d, s, t, r, stride, pad) in [(3, 4, 5, 3, 1, 1), (5, 3, 6, 4, 2, 2), (3, 6, 6, 2, 2, 0)] {
        let m = random_model(&mut rng, (d * d, s, t), r).normalize();
        let k = unreshape_kernel(&m.reconstruct(), d).unwrap();
        let spec = ConvSpec::new(s, t, d, stride, pad).unwrap().with_bias(random_unit(&mut rng, t).as_slice().to_vec()).unwrap();
        let xs = inputs(&mut rng, s);
        run(&emit_cpd_block(&m, &spec).unwrap(), &spec, &k, &xs, true);

        let core = random_model(&mut rng, (d * d, 2, 3), 4);
        let h = HybridModel::new(random_orthonormal(&mut rng, s, 2), random_orthonormal(&mut rng, t, 3), core).unwrap();
        let k = unreshape_kernel(&h.reconstruct(), d).unwrap();
        run(&emit_tkd_cpd_block(&h, &spec).unwrap(), &spec, &k, &xs, true);

        let mat = random_matrix(&mut rng, t, s);
        let spec1 = ConvSpec::new(s, t, 1, stride, pad.min(1)).unwrap();
        let k1 = DenseTensor::from_fn(&[1, 1, s, t], |ix| mat[(ix[3], ix[2])]);
        run(&emit_svd_block(&mat, s.min(t), &spec1).unwrap(), &spec1, &k1, &xs, true);
    }

    // inexact: compare with the kernel the model reconstructs
    for (d, s, t) in [(3, 5, 6), (3, 6, 4)] {
        let k = random_tensor(&mut rng, &[d, d, s, t]);
        let k3 = kernel_decomp::tensor::reshape_kernel(&k).unwrap();
        let spec = ConvSpec::new(s, t, d, 1, 1).unwrap();
        let xs = inputs(&mut rng, s);
        let fit = cpd_als(&k3, 3, &AlsOptions::default()).unwrap();
        let kr = unreshape_kernel(&fit.model.reconstruct(), d).unwrap();
        run(&emit_cpd_block(&fit.model, &spec).unwrap(), &spec, &kr, &xs, false);

        let opts = HybridOptions::default();
        let delta = 0.6 * k3.norm();
        let (r1, r2) = tucker2_bounded(&k3, opts.theta.sqrt() * delta, &opts.tucker).unwrap().model.ranks();
        let h = tkd_cpd_epc(&k3, delta, r1.max(r2), &opts)
            .or_else(|_| tkd_cpd_epc(&k3, delta, r1 * r2, &opts))
            .unwrap()
            .model;
        let kr = unreshape_kernel(&h.reconstruct(), d).unwrap();
        run(&emit_tkd_cpd_block(&h, &spec).unwrap(), &spec, &kr, &xs, false);

        let mat = random_matrix(&mut rng, t, s);
        let spec1 = ConvSpec::new(s, t, 1, 1, 0).unwrap();
        let layers = emit_svd_block(&mat, 2, &spec1).unwrap();
        let (sv, u, vt) = kernel_decomp::conv::svd_desc(&mat);
        let approx = Matrix::from_fn(t, s, |i, j| (0..2).map(|q| u[(i, q)] * sv[q] * vt[(q, j)]).sum());
        let kr = DenseTensor::from_fn(&[1, 1, s, t], |ix| approx[(ix[3], ix[2])]);
        run(&layers, &spec1, &kr, &xs, false);
    }
    check(
        worst_exact <= 1e-8 && worst_inexact <= 1e-8,
        format!("{blocks} blocks x 5 inputs, exact deviation {worst_exact:.1e}, inexact deviation/(1+||x||) {worst_inexact:.1e}"),
    )
}

fn parameter_formulas() -> Check {
    let mut cases = 0;
    let mut ok = true;
    for d in [1, 3, 5] {
        for (s, t) in [(4, 4), (16, 8), (64, 64)] {
            let spec = ConvSpec::new(s, t, d, 1, d / 2).unwrap();
            for r in [1, 8, 32] {
                let layers = emit_cpd_block(&CPModel::zeros((d * d, s, t), r), &spec).unwrap();
                let weights: usize = layers.iter().map(|l| l.weights.len()).sum();
                ok &= weights == r * (d * d + s + t);
                ok &= count_params_flops(&layers, (8, 8)).unwrap().0 == weights;
                cases += 1;
                for (r1, r2) in [(2, 2), (4, 8), (8, 4)] {
                    if r1 > s || r2 > t || (r < r1 && r < r2) {
                        continue;
                    }
                    let h = HybridModel::new(
                        Matrix::identity(s, r1),
                        Matrix::identity(t, r2),
                        CPModel::zeros((d * d, r1, r2), r),
                    )
                    .unwrap();
                    let layers = emit_tkd_cpd_block(&h, &spec).unwrap();
                    let outer = layers[0].weights.len() + layers[4].weights.len();
                    let inner: usize = layers[1..4].iter().map(|l| l.weights.len()).sum();
                    ok &= outer == r1 * s + r2 * t;
                    ok &= inner == r * (d * d + r1 + r2);
                    let tucker = Tucker2Model {
                        g: DenseTensor::zeros(&[d * d, r1, r2]),
                        u: Matrix::identity(s, r1),
                        v: Matrix::identity(t, r2),
                    };
                    ok &= tucker.cost() == r1 * s + r2 * t + r1 * r2 * d * d;
                    cases += 1;
                }
            }
        }
    }
    check(ok, format!("{cases} (D, S, T, R, R1, R2) combinations"))
}

fn rank_search() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1009);
    let mut ok = true;
    let mut notes = Vec::new();
    for (dims, rank) in [((9, 10, 12), 2), ((16, 16, 16), 8), ((8, 12, 16), 5), ((6, 7, 8), 3), ((12, 9, 16), 7)] {
        let t = random_model(&mut rng, dims, rank).reconstruct();
        let opts = SearchOptions { eps: 1e-6, r_min: 1, r_max: 16, seed: 0 };
        let res = binary_search_rank(&t, Method::Cpd, &Evaluator::ApproxError, &opts).unwrap();
        let bound = (16f64).log2().ceil() as usize + 1;
        let good = res.rank == rank && res.evaluations.len() <= bound;
        ok &= good;
        notes.push(format!("{rank}->{} in {}", res.rank, res.evaluations.len()));
    }
    check(ok, format!("true->found in evaluations: {}", notes.join(", ")))
}

fn als_sanity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut ok = true;
    let (mut worst_err, mut worst_secs) = (0.0f64, 0.0f64);
    for (dims, rank) in [((4, 5, 6), 1), ((5, 5, 5), 2), ((6, 7, 8), 3), ((8, 8, 8), 4), ((9, 8, 10), 5), ((5, 6, 7), 5)] {
        let t = random_model(&mut rng, dims, rank).reconstruct();
        let start = Instant::now();
        let opts = AlsOptions { restarts: 5, tol: 1e-14, max_iters: 3000, ..Default::default() };
        let fit = cpd_als(&t, rank, &opts).unwrap();
        let secs = start.elapsed().as_secs_f64();
        ok &= fit.rel_error <= 1e-6 && secs < 5.0;
        ok &= fit.history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-15);
        worst_err = worst_err.max(fit.rel_error);
        worst_secs = worst_secs.max(secs);
    }
    check(ok, format!("6 tensors, worst rel_error {worst_err:.1e}, slowest {worst_secs:.2}s"))
}

fn main() {
    let mut runs = Runs::new();
    let mut results = vec![
        (1, "sensitivity closed form vs Monte Carlo", sensitivity_closed_form()),
        (2, "degeneracy correction", degeneracy_correction(&mut runs)),
    ];
    let c4 = qp_kkt();
    let c5 = tucker_minimality();
    let c6 = hybrid_pythagorean(&mut runs);
    extra_epc_runs(&mut runs);
    results.push((3, "EPC error preservation", error_preservation(&runs)));
    results.push((4, "spherical QP KKT conditions", c4));
    results.push((5, "Tucker-2 minimality and bound", c5));
    results.push((6, "hybrid Pythagorean identity", c6));
    results.push((7, "block equivalence", block_equivalence()));
    results.push((8, "parameter formulas", parameter_formulas()));
    results.push((9, "rank search", rank_search()));
    results.push((10, "ALS sanity", als_sanity()));

    let mut failed = 0;
    for (id, name, c) in &results {
        println!("[{}] {id:>2} {name}: {}", if c.pass { "PASS" } else { "FAIL" }, c.detail);
        failed += usize::from(!c.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
