use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
seed = 2
[data]
num_samples = 800
[model]
k = 5
max_epochs = 4
[sweep]
lambdas = [0.01, 0.1, 1.0]
thresholds = [0.5, 0.9]
bootstrap_splits = 5
";

fn quee(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quee"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = quee(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn stage_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("exp.toml"), SMALL).unwrap();
    let c = ["--config", "exp.toml"];
    ok(d, &[&["gen"][..], &c, &["--out", "out"]].concat());
    assert!(d.join("out/records.ndjson").exists());
    ok(d, &[&["cluster"][..], &c, &["--data", "out/records.ndjson", "--out", "out"]].concat());
    ok(
        d,
        &[&["train"][..], &c, &["--data", "out/records.ndjson", "--model", "out/clusters.json", "--out", "out"]].concat(),
    );
    let stdout = ok(
        d,
        &[&["route"][..], &c, &["--model", "out/model.json", "--lambda", "0.1", "--out", "out"]].concat(),
    );
    assert!(stdout.contains("quee 0.1"), "{stdout}");
    let traces = fs::read_to_string(d.join("out/traces.ndjson")).unwrap();
    let first: serde_json::Value = serde_json::from_str(traces.lines().next().unwrap()).unwrap();
    assert!(first["decisions"].as_array().is_some_and(|d| !d.is_empty()));

    ok(d, &[&["sweep"][..], &c, &["--model", "out/model.json", "--out", "out"]].concat());
    let curves = fs::read_to_string(d.join("out/curves.csv")).unwrap();
    assert!(curves.starts_with("mode,label,parameter,accuracy"));
    for mode in ["quee", "oracle", "threshold-exit", "fixed-path"] {
        assert!(curves.lines().any(|l| l.starts_with(&format!("{mode},"))), "{mode} missing");
    }

    ok(d, &[&["eval"][..], &c, &["--mode", "fixed-path", "--path", "8-4", "--out", "out/fixed.csv"]].concat());
    let fixed = fs::read_to_string(d.join("out/fixed.csv")).unwrap();
    assert_eq!(fixed.lines().count(), 2);
    assert!(fixed.lines().nth(1).unwrap().starts_with("fixed-path,8-4,0.5,"));
}

#[test]
fn studies_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("exp.toml"), SMALL).unwrap();
    ok(d, &["ece-study", "--config", "exp.toml", "--k", "1,5", "--out", "o"]);
    let ece = fs::read_to_string(d.join("o/ece.csv")).unwrap();
    assert!(ece.lines().any(|l| l.starts_with("1,overall,")));
    assert!(ece.lines().any(|l| l.starts_with("5,overall,")));
    ok(d, &["degrade", "--config", "exp.toml", "--noise", "0,0.2", "--out", "o"]);
    let rmse = fs::read_to_string(d.join("o/degradation_rmse.csv")).unwrap();
    assert!(rmse.lines().any(|l| l.starts_with("0.2,0,")));
    assert!(d.join("o/degradation_curves.csv").exists());
}

#[test]
fn failures_name_stage_and_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = quee(d, &["route", "--model", "missing.json", "--lambda", "1"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage `model` failed"), "{err}");

    fs::write(d.join("bad.toml"), "[model]\nk = 0\n").unwrap();
    let out = quee(d, &["gen", "--config", "bad.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage `config` failed"));

    fs::write(d.join("broken.ndjson"), "{\"format\":\"other\"}\n").unwrap();
    let out = quee(d, &["gen", "--data", "broken.ndjson"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage `load` failed"));

    let out = quee(d, &["route", "--mode", "oracle"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--lambda"));
}

#[test]
fn run_is_bit_identical_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("exp.toml"), SMALL).unwrap();
    ok(d, &["run", "--config", "exp.toml", "--out", "a"]);
    ok(d, &["run", "--config", "exp.toml", "--out", "b"]);
    for f in ["records.ndjson", "model.json", "curves.csv", "curves.gp"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f} differs");
    }
    ok(d, &["run", "--config", "exp.toml", "--seed", "3", "--out", "c"]);
    assert_ne!(fs::read(d.join("a/model.json")).unwrap(), fs::read(d.join("c/model.json")).unwrap());
}
