//! End-to-end checks of the `iforge` binary.

use std::fs;
use std::process::{Command, Output};

fn iforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iforge")).args(args).env_remove("IFORGE_WORKERS").output().unwrap()
}

#[test]
fn verify_instanton_suite_succeeds() {
    let out = iforge(&["verify", "instanton"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{text}");
    assert!(text.lines().any(|l| l.starts_with("PASS")));
    assert!(!text.contains("FAIL"));
}

#[test]
fn sabotaged_normalization_is_caught() {
    let out = iforge(&["verify", "instanton", "--sabotage-normalization"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(1));
    assert!(text.contains("FAIL instanton/energy_16pi2"), "{text}");
}

#[test]
fn bad_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    fs::write(&path, "resolution = many\n").unwrap();
    let out = iforge(&["verify", "algebra", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let out = iforge(&["flow", "--extent", "1,4,4,4"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flow_outputs_are_reproducible() {
    let run = |workers: &str| {
        let dir = tempfile::tempdir().unwrap();
        let out = iforge(&[
            "flow", "--extent", "2,2,2,2", "--max-iters", "40", "--seed", "9", "--workers", workers, "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        ["flow_trace.csv", "flow_checkpoint.bin"].map(|f| fs::read(dir.path().join(f)).unwrap())
    };
    let a = run("1");
    assert_eq!(a, run("1"));
    assert_eq!(a, run("2"));
    let trace = String::from_utf8(a[0].clone()).unwrap();
    assert!(trace.lines().any(|l| l == "iter,energy,grad_norm,step"));
}
