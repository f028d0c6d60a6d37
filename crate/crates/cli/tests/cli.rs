use kernel_decomp::io::{write_tensor, Dtype};
use kernel_decomp::DenseTensor;
use serde_json::Value;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn kdecomp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kdecomp")).args(args).output().expect("binary runs")
}

/// Deterministic, generic-looking entries in [-0.5, 0.5).
fn vecf(n: usize, seed: f64) -> Vec<f64> {
    (0..n).map(|i| (((i as f64 + 1.0) * (seed + 1.7) * 12.9898).sin() * 43758.5453).fract().abs() - 0.5).collect()
}

/// `Σ_q a_q ∘ b_q ∘ c_q` laid out as a `D×D×S×T` kernel.
fn cp_kernel(d: usize, s: usize, t: usize, rank: usize) -> DenseTensor {
    let comps: Vec<_> = (0..rank)
        .map(|q| (vecf(d * d, q as f64 * 0.7), vecf(s, 1.0 + q as f64 * 1.9), vecf(t, 2.0 + q as f64 * 2.3)))
        .collect();
    DenseTensor::from_fn(&[d, d, s, t], |ix| {
        let row = ix[0] + ix[1] * d;
        comps.iter().map(|(a, b, c)| a[row] * b[ix[2]] * c[ix[3]]).sum()
    })
}

/// `a∘a∘b + a∘b∘a + b∘a∘a`: rank 3, but approximable arbitrarily well at rank
/// 2 only by diverging components.
fn degenerate_kernel() -> DenseTensor {
    let a = [1.0, 0.5, -0.3, 0.2];
    let b = [0.1, -0.7, 0.4, 0.6];
    DenseTensor::from_fn(&[2, 2, 4, 4], |ix| {
        let (i, j, k) = (ix[0] + 2 * ix[1], ix[2], ix[3]);
        a[i] * a[j] * b[k] + a[i] * b[j] * a[k] + b[i] * a[j] * a[k]
    })
}

fn save(dir: &Path, name: &str, t: &DenseTensor) -> String {
    let p = dir.join(name);
    write_tensor(&p, t, Dtype::F64).unwrap();
    p.to_str().unwrap().to_owned()
}

fn report(dir: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(dir.join("report.json")).unwrap()).unwrap()
}

fn s(p: &PathBuf) -> &str {
    p.to_str().unwrap()
}

#[test]
fn cpd_rank_one_is_exact_and_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let k = save(dir.path(), "k.kten", &cp_kernel(3, 4, 5, 1));
    let out = dir.path().join("out");
    let o = kdecomp(&["decompose", "--input", &k, "--method", "cpd", "--rank", "1", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(report(&out)["rel_error"].as_f64().unwrap() <= 1e-8);

    let block = out.join("block.json");
    let o = kdecomp(&["verify", "--block", s(&block), "--input", &k, "--json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["max_deviation"].as_f64().unwrap() <= 1e-8);
    assert!(v["max_deviation_original"].as_f64().unwrap() <= 1e-8);

    let o = kdecomp(&["verify", "--block", s(&block), "--input", &k, "--trials", "0", "--json"]);
    assert!(o.status.success());
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["trials"], 0);
}

#[test]
fn tampered_weights_fail_verification() {
    let dir = tempfile::tempdir().unwrap();
    let k = save(dir.path(), "k.kten", &cp_kernel(3, 3, 3, 2));
    let out = dir.path().join("out");
    let o = kdecomp(&["decompose", "--input", &k, "--method", "cpd", "--rank", "2", "--out", s(&out)]);
    assert!(o.status.success());
    let w = out.join("layer1_weights.kten");
    let mut bytes = std::fs::read(&w).unwrap();
    let n = bytes.len();
    bytes[n - 2] ^= 0x40;
    std::fs::write(&w, bytes).unwrap();
    let o = kdecomp(&["verify", "--block", s(&out.join("block.json")), "--input", &k]);
    assert!(!o.status.success());
}

#[test]
fn broken_chain_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let k = save(dir.path(), "k.kten", &cp_kernel(3, 3, 3, 2));
    let out = dir.path().join("out");
    assert!(kdecomp(&["decompose", "--input", &k, "--method", "cpd", "--rank", "2", "--out", s(&out)]).status.success());
    let path = out.join("block.json");
    let mut doc: Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    doc["layers"][2]["in"] = Value::from(3);
    std::fs::write(&path, serde_json::to_vec(&doc).unwrap()).unwrap();
    let o = kdecomp(&["verify", "--block", s(&path), "--input", &k]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn svd_on_spatial_kernel_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let k = save(dir.path(), "k.kten", &cp_kernel(3, 2, 2, 1));
    let o = kdecomp(&["decompose", "--input", &k, "--method", "svd", "--rank", "1", "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("svd requires 1×1 kernel"));
}

#[test]
fn svd_on_pointwise_kernel() {
    let dir = tempfile::tempdir().unwrap();
    let k = save(dir.path(), "k.kten", &cp_kernel(1, 6, 5, 2));
    let out = dir.path().join("out");
    let o = kdecomp(&["decompose", "--input", &k, "--method", "svd", "--rank", "2", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(report(&out)["rel_error"].as_f64().unwrap() <= 1e-10);
    assert!(kdecomp(&["verify", "--block", s(&out.join("block.json")), "--input", &k]).status.success());
}

#[test]
fn malformed_input_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.kten");
    std::fs::write(&p, b"KTEN1\n{\"dtype\":\"f64\",\"shape\":[3,3,2,2],\"order\":\"C\"}\n\x00\x01").unwrap();
    let o = kdecomp(&["decompose", "--input", s(&p), "--method", "cpd", "--rank", "1", "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn infeasible_bound_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let k = save(dir.path(), "k.kten", &cp_kernel(3, 4, 4, 4));
    let o = kdecomp(&[
        "decompose", "--input", &k, "--method", "cpd-epc", "--rank", "1", "--delta", "1e-6", "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn epc_reduces_sensitivity_of_degenerate_fit() {
    let dir = tempfile::tempdir().unwrap();
    let k = save(dir.path(), "k.kten", &degenerate_kernel());
    let out = dir.path().join("out");
    let o = kdecomp(&[
        "decompose", "--input", &k, "--method", "cpd-epc", "--rank", "2", "--delta", "0.05", "--seed", "3", "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&out);
    assert!(r["rel_error"].as_f64().unwrap() <= 0.05 + 1e-8);
    assert!(r["ss_after"].as_f64().unwrap() < r["ss_before"].as_f64().unwrap());
    assert!(kdecomp(&["verify", "--block", s(&out.join("block.json")), "--input", &k]).status.success());
}

#[test]
fn tkd_cpd_epc_block() {
    let dir = tempfile::tempdir().unwrap();
    let k = save(dir.path(), "k.kten", &cp_kernel(3, 6, 6, 3));
    let out = dir.path().join("out");
    let o = kdecomp(&[
        "decompose", "--input", &k, "--method", "tkd-cpd-epc", "--rank", "4", "--ranks", "3,3", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&out);
    assert_eq!(r["block"], "tkd-cpd");
    assert!(r["rel_error"].as_f64().unwrap() <= 1e-6);
    assert!(kdecomp(&["verify", "--block", s(&out.join("block.json")), "--input", &k]).status.success());
}

#[test]
fn reports_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let k = save(dir.path(), "k.kten", &cp_kernel(3, 4, 4, 3));
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = kdecomp(&["decompose", "--input", &k, "--method", "cpd-epc", "--rank", "2", "--seed", "5", "--out", s(&out)]);
        assert!(o.status.success());
        std::fs::read(out.join("report.json")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn rank_search_with_proxy() {
    let dir = tempfile::tempdir().unwrap();
    let k = save(dir.path(), "k.kten", &cp_kernel(3, 8, 8, 5));
    let o = kdecomp(&[
        "rank-search", "--input", &k, "--method", "cpd", "--eps", "1e-8", "--rmin", "1", "--rmax", "16", "--json",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["rank"], 5);
    assert!(v["evaluations"].as_array().unwrap().len() <= 5);

    let o = kdecomp(&["rank-search", "--input", &k, "--method", "cpd", "--eps", "10", "--rmin", "2", "--rmax", "9"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("rank         2"));
}

#[test]
fn rank_search_with_external_evaluator() {
    let dir = tempfile::tempdir().unwrap();
    let k = save(dir.path(), "k.kten", &cp_kernel(3, 4, 4, 2));
    let script = dir.path().join("eval.sh");
    // score 0 once the depthwise layer has at least 3 channels
    std::fs::write(&script, "test -f \"$2\" || exit 9\nif grep -q '\"groups\": [3-9]' \"$1\"; then echo 0; else echo 1; fi\n").unwrap();
    let cmd = format!("sh {}", script.display());
    let o = kdecomp(&[
        "rank-search", "--input", &k, "--method", "cpd", "--eps", "0.5", "--rmax", "6", "--evaluator", &cmd, "--json",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["rank"], 3);

    let o = kdecomp(&["rank-search", "--input", &k, "--method", "cpd", "--eps", "0.5", "--evaluator", "echo broken >&2; false"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("broken"));
}
