use std::path::Path;
use std::process::Command;

fn uc2() -> Command {
    Command::new(env!("CARGO_BIN_EXE_uc2"))
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = uc2().args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_owned()
}

#[test]
fn pipeline_build_quantize_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = p(dir.path(), "d.uc2e");
    let cb = p(dir.path(), "cb.uc2c");
    let t = p(dir.path(), "t.uc2t");
    let rep = p(dir.path(), "rep.kv");

    let (code, _, _) = run(&[
        "gen-synth", "--n", "600", "--dim", "5", "--components", "8", "--seed", "3", "--labeled",
        "--out", &d,
    ]);
    assert_eq!(code, 0);

    let (code, out, _) =
        run(&["build", "--in", &d, "--k", "32", "--k1", "4", "--seed", "1", "--out", &cb]);
    assert_eq!(code, 0);
    assert!(out.contains("k_final=32"), "{out}");

    let (code, _, _) = run(&[
        "quantize", "--in", &d, "--codebook", &cb, "--mode", "hier", "--out", &t, "--report", &rep,
    ]);
    assert_eq!(code, 0);
    let report = std::fs::read_to_string(&rep).unwrap();
    for key in ["k=", "utilization=", "entropy_nats=", "distortion="] {
        assert!(report.contains(key), "missing {key} in {report}");
    }

    let labels = format!("{d}.labels");
    let (code, out, _) = run(&["metrics", "--tokens", &t, "--embeddings", &d, "--codebook", &cb,
        "--labels", &labels]);
    assert_eq!(code, 0);
    assert!(out.contains("mi_nats="), "{out}");
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = p(dir.path(), "d.uc2e");
    let (code, _, _) =
        run(&["gen-synth", "--n", "8", "--dim", "2", "--components", "2", "--out", &d]);
    assert_eq!(code, 0);
    // k larger than the corpus
    let (code, _, err) =
        run(&["build", "--in", &d, "--k", "100", "--k1", "2", "--out", &p(dir.path(), "x")]);
    assert_eq!(code, 1, "{err}");
    assert!(err.starts_with("error code=1"), "{err}");
    // unknown flag
    let (code, _, _) = run(&["build", "--definitely-not-a-flag"]);
    assert_eq!(code, 1);
}

#[test]
fn io_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = p(dir.path(), "missing.uc2e");
    let (code, _, err) = run(&[
        "build", "--in", &missing, "--k", "4", "--k1", "2", "--out", &p(dir.path(), "x"),
    ]);
    assert_eq!(code, 2, "{err}");
    assert!(err.starts_with("error code=2"), "{err}");

    let garbage = p(dir.path(), "garbage.uc2e");
    std::fs::write(&garbage, b"ZZZZnot a real file").unwrap();
    let (code, _, err) = run(&[
        "build", "--in", &garbage, "--k", "2", "--k1", "1", "--out", &p(dir.path(), "x"),
    ]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("bad magic"), "{err}");
}

#[test]
fn env_vars_fill_defaults_but_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let a = p(dir.path(), "a.uc2e");
    let b = p(dir.path(), "b.uc2e");
    let c = p(dir.path(), "c.uc2e");

    let base = ["gen-synth", "--n", "40", "--dim", "3", "--components", "2"];
    // UC2_SEED picked up from the environment
    let out = uc2().args(base).args(["--out", &a]).env("UC2_SEED", "42").output().unwrap();
    assert!(out.status.success());
    // same seed via flag gives the same file; flag beats a conflicting env var
    let out = uc2()
        .args(base)
        .args(["--seed", "42", "--out", &b])
        .env("UC2_SEED", "7")
        .output()
        .unwrap();
    assert!(out.status.success());
    // different env seed gives a different file
    let out = uc2().args(base).args(["--out", &c]).env("UC2_SEED", "7").output().unwrap();
    assert!(out.status.success());

    let (fa, fb, fc) =
        (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap(), std::fs::read(&c).unwrap());
    assert_eq!(fa, fb);
    assert_ne!(fa, fc);
}

#[test]
fn quantize_full_probe_matches_exact_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let d = p(dir.path(), "d.uc2e");
    let cb = p(dir.path(), "cb.uc2c");
    let te = p(dir.path(), "e.uc2t");
    let th = p(dir.path(), "h.uc2t");

    run(&["gen-synth", "--n", "500", "--dim", "4", "--components", "6", "--seed", "9", "--out", &d]);
    run(&["build", "--in", &d, "--k", "24", "--k1", "4", "--out", &cb]);
    let (code, _, _) = run(&["quantize", "--in", &d, "--codebook", &cb, "--mode", "exact",
        "--out", &te]);
    assert_eq!(code, 0);
    let (code, _, _) = run(&["quantize", "--in", &d, "--codebook", &cb, "--mode", "hier",
        "--nprobe", "4", "--out", &th]);
    assert_eq!(code, 0);
    assert_eq!(std::fs::read(&te).unwrap(), std::fs::read(&th).unwrap());
}
