use clap::{Parser, Subcommand};
use kernel_decomp::io::{load_block, read_tensor, save_block, write_atomic};
use kernel_decomp::pipeline::{decompose_kernel, kernel_extent, verify_block, DecomposeOptions, Method};
use kernel_decomp::ranksearch::{binary_search_rank, Evaluator, SearchOptions};
use kernel_decomp::Error;
use std::path::PathBuf;
use std::process::ExitCode;

/// Decompose convolution kernels into factorized blocks.
#[derive(Parser)]
#[command(name = "kdecomp", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Factorize a D×D×S×T kernel and write the block descriptor.
    Decompose {
        #[arg(long)]
        input: PathBuf,
        /// cpd, cpd-epc, tkd-cpd-epc or svd
        #[arg(long)]
        method: Method,
        #[arg(long)]
        rank: usize,
        /// Fixed multilinear ranks for tkd-cpd-epc, as R1,R2.
        #[arg(long, value_parser = parse_pair)]
        ranks: Option<(usize, usize)>,
        /// Error bound relative to the kernel norm.
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long, default_value_t = 0.5)]
        theta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        /// Defaults to (D-1)/2.
        #[arg(long)]
        pad: Option<usize>,
        /// Input size for the FLOP count, as H,W.
        #[arg(long, value_parser = parse_pair, default_value = "16,16")]
        hw: (usize, usize),
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Find the smallest rank whose score is within EPS.
    RankSearch {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        method: Method,
        #[arg(long)]
        eps: f64,
        /// Shell command called as `CMD block.json kernel.kten`; defaults to
        /// the relative reconstruction error.
        #[arg(long)]
        evaluator: Option<String>,
        #[arg(long, default_value_t = 1)]
        rmin: usize,
        #[arg(long)]
        rmax: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Check a block against the kernel it was built from.
    Verify {
        #[arg(long)]
        block: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 3)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected two comma-separated numbers")?;
    let p = |x: &str| x.trim().parse::<usize>().map_err(|e| e.to_string());
    Ok((p(a)?, p(b)?))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Infeasible { .. } | Error::InvalidArgument(_) | Error::NoConvergence { .. } => 1,
        Error::Evaluator(_) => 3,
        _ => 2,
    }
}

fn opt(x: Option<f64>) -> String {
    x.map_or("-".into(), |v| format!("{v:.6e}"))
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Cmd::Decompose { input, method, rank, ranks, delta, theta, seed, stride, pad, hw, out, json } => {
            let (k, _) = read_tensor(&input)?;
            let opts = DecomposeOptions {
                ranks,
                delta_rel: delta,
                theta,
                seed,
                stride,
                pad,
                input_hw: hw,
                ..DecomposeOptions::new(method, rank)
            };
            let dec = decompose_kernel(&k, &opts)?;
            let path = save_block(&out, &dec.block)?;
            let report = serde_json::to_string_pretty(&dec.report)?;
            write_atomic(&out.join("report.json"), format!("{report}\n").as_bytes())?;
            if json {
                println!("{report}");
            } else {
                let r = &dec.report;
                println!("block      {}", path.display());
                println!("rel_error  {:.6e}", r.rel_error);
                println!("ss         {} -> {}", opt(r.ss_before), opt(r.ss_after));
                println!("sn         {} -> {}", opt(r.sn_before), opt(r.sn_after));
                println!("params     {}", r.params);
                println!("flops      {}", r.flops);
            }
            Ok(0)
        }
        Cmd::RankSearch { input, method, eps, evaluator, rmin, rmax, seed, json } => {
            let (k, _) = read_tensor(&input)?;
            let d = kernel_extent(&k)?;
            let (s, t) = (k.shape()[2], k.shape()[3]);
            let opts = SearchOptions { eps, r_min: rmin, r_max: rmax.unwrap_or((d * d).max(s).max(t)), seed };
            let ev = evaluator.map_or(Evaluator::ApproxError, Evaluator::ExternalCommand);
            let res = binary_search_rank(&k, method, &ev, &opts)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&res)?);
            } else {
                println!("rank         {}", res.rank);
                println!("score        {:.6e}", res.score);
                println!("evaluations  {}", res.evaluations.len());
                if !res.met {
                    println!("threshold not met at the largest rank");
                }
                if res.heuristic {
                    println!("scores were not monotone in the rank; result is heuristic");
                }
            }
            Ok(0)
        }
        Cmd::Verify { block, input, trials, seed, json } => {
            let b = load_block(&block)?;
            let (k, _) = read_tensor(&input)?;
            let rep = verify_block(&b, &k, trials, seed)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&rep)?);
            } else {
                println!("trials            {}", rep.trials);
                println!("max deviation     {:.6e}", rep.max_deviation);
                println!("vs input kernel   {:.6e}", rep.max_deviation_original);
                println!("kernel rel_error  {:.6e} (reported {:.6e})", rep.kernel_rel_error, rep.reported_rel_error);
                println!("{}", if rep.ok { "ok" } else { "MISMATCH" });
            }
            Ok(if rep.ok { 0 } else { 1 })
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
