//! Exit codes, determinism, and golden-output checks for the binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_attrition"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

#[test]
fn help_documents_config_keys_and_defaults() {
    let out = run(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for key in [
        "panel",
        "refreshment",
        "link",
        "grid",
        "seed",
        "bootstrap",
        "levels",
        "tol",
        "max-iter",
        "threads",
        "target-attrition",
        "lattice-cells",
        "default: logit",
        "default: paper-tuples",
        "default: 1e-8",
        "EXIT CODES",
    ] {
        assert!(text.contains(key), "--help missing '{key}'");
    }
}

#[test]
fn missing_refreshment_file_exits_one_naming_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("est.toml");
    std::fs::copy(fixture("discrete-panel.csv"), dir.path().join("p.csv")).unwrap();
    std::fs::write(
        &cfg,
        "panel = \"p.csv\"\nrefreshment = \"nope.csv\"\n[model]\nname = \"mean\"\n",
    )
    .unwrap();
    let out = run(&[
        "estimate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("nope.csv"), "stderr: {err}");
}

#[test]
fn unknown_design_exits_one_listing_designs() {
    let out = run(&["replicate", "table9-m99"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("table1-m5") && err.contains("table2-nu20"), "{err}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("est.toml");
    std::fs::write(
        &cfg,
        "panel = \"p.csv\"\nrefreshment = \"r.csv\"\nbanana = 7\n[model]\nname = \"mean\"\n",
    )
    .unwrap();
    let out = run(&["estimate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains("banana"));
}

#[test]
fn golden_estimate_matches_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "estimate",
        "--config",
        fixture("discrete-estimate.toml").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let got = read(&dir.path().join("estimate.json"));
    let want = read(&fixture("discrete-golden.json"));
    assert_eq!(got, want, "estimate.json deviates from the golden output");
}

#[test]
fn all_stayers_corrected_equals_naive() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "estimate",
        "--config",
        fixture("all-stayers.toml").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value =
        serde_json::from_slice(&read(&dir.path().join("estimate.json"))).unwrap();
    let corrected = json["corrected"]["theta_hat"].as_array().unwrap();
    let naive = json["naive"]["theta_hat"].as_array().unwrap();
    for (c, n) in corrected.iter().zip(naive) {
        let (c, n) = (c.as_f64().unwrap(), n.as_f64().unwrap());
        assert!((c - n).abs() < 1e-10, "corrected {c} vs naive {n}");
    }
}

#[test]
fn simulate_is_byte_identical_across_runs() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let cfg = dir_a.path().join("sim.toml");
    std::fs::write(
        &cfg,
        "n1 = 60\nnr = 40\nseed = 9\n[dgp]\nkind = \"discrete\"\nm = 3\n\
         transition = [[0.5, 0.25, 0.25], [0.25, 0.5, 0.25], [0.25, 0.25, 0.5]]\n\
         c1 = 0.1\nc2 = 0.1\nintercept = 0.5\nlink = \"logit\"\n",
    )
    .unwrap();
    for dir in [&dir_a, &dir_b] {
        let out = run(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["panel.csv", "refreshment.csv", "study.json"] {
        assert_eq!(
            read(&dir_a.path().join(name)),
            read(&dir_b.path().join(name)),
            "{name} differs between identical runs"
        );
    }
}

#[test]
fn estimate_with_bootstrap_identical_across_thread_counts() {
    let run_with = |threads: &str| {
        let dir = tempfile::tempdir().unwrap();
        let out = run(&[
            "estimate",
            "--config",
            fixture("discrete-estimate.toml").to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
            "--bootstrap",
            "120",
            "--threads",
            threads,
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        read(&dir.path().join("estimate.json"))
    };
    assert_eq!(run_with("1"), run_with("8"));
}
