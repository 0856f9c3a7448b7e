use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn dxgate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dxgate"))
        .args(args)
        .env_remove("CI")
        .output()
        .unwrap()
}

fn dxgate_stdin(args: &[&str], input: &[u8]) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_dxgate"))
        .args(args)
        .env_remove("CI")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input).unwrap();
    child.wait_with_output().unwrap()
}

fn write_glove(dir: &Path) -> String {
    let mut s = String::new();
    for i in 0..60 {
        let v: Vec<String> = (0..6)
            .map(|j| format!("{:.3}", ((i * 31 + j * 17) % 23) as f64 / 23.0 - 0.5))
            .collect();
        s.push_str(&format!("w{i} {}\n", v.join(" ")));
    }
    let txt = dir.join("g.txt");
    std::fs::write(&txt, s).unwrap();
    let bin = dir.join("m.bin");
    let o = dxgate(&["convert", "--in", txt.to_str().unwrap(), "--out", bin.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    bin.to_string_lossy().into_owned()
}

#[test]
fn help_exits_zero_and_unknown_subcommand_exits_one() {
    assert_eq!(dxgate(&["--help"]).status.code(), Some(0));
    assert_eq!(dxgate(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn non_positive_epsilon_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_glove(dir.path());
    for eps in ["0", "-2"] {
        let o = dxgate(&["sanitize", "--model", &m, "--epsilon", eps, "--seed", "1"]);
        assert_eq!(o.status.code(), Some(1), "{eps}");
        assert!(o.stdout.is_empty());
    }
}

#[test]
fn ci_requires_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_glove(dir.path());
    let o = Command::new(env!("CARGO_BIN_EXE_dxgate"))
        .args(["sanitize", "--model", &m, "--epsilon", "3"])
        .env("CI", "true")
        .stdin(Stdio::null())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--seed"));
}

#[test]
fn missing_input_is_a_runtime_error() {
    let o = dxgate(&["nn", "--model", "/nonexistent/model.bin", "--token", "x"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn stdout_carries_only_the_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_glove(dir.path());
    let o = dxgate_stdin(
        &["sanitize", "--model", &m, "--epsilon", "20", "--seed", "4"],
        b"w1 w2 w3",
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["original_token_ids"], serde_json::json!([1, 2, 3]));
    assert!(v["sanitized_text"].is_string());
    assert!(!o.stderr.is_empty(), "logs belong on stderr");

    let o = dxgate(&["nn", "--model", &m, "--token", "w5", "-k", "3"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["neighbors"][0]["token"], "w5");
    assert_eq!(v["neighbors"].as_array().unwrap().len(), 3);
}

#[test]
fn oov_word_fails_unless_passthrough() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_glove(dir.path());
    let o = dxgate_stdin(
        &["sanitize", "--model", &m, "--epsilon", "20", "--seed", "4"],
        b"w1 zzz",
    );
    assert_eq!(o.status.code(), Some(2));
    let o = dxgate_stdin(
        &[
            "sanitize",
            "--model",
            &m,
            "--epsilon",
            "20",
            "--seed",
            "4",
            "--oov",
            "passthrough",
        ],
        b"w1 zzz",
    );
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["oov_flags"], serde_json::json!([false, true]));
}

#[test]
fn train_report_feeds_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("f.csv");
    let mut s = String::from("id,epsilon,sim_b,sim_c,sim_d,target_e\n");
    for i in 0..200 {
        let d = (i % 50) as f64 / 50.0;
        s.push_str(&format!(
            "r{i},{},{},{},{d},{}\n",
            1 + i % 7,
            0.5 + d / 3.0,
            0.8,
            0.1 + 0.8 * d
        ));
    }
    std::fs::write(&csv, s).unwrap();
    let model = dir.path().join("m.gbdt");
    let (csv, model) = (csv.to_str().unwrap(), model.to_str().unwrap());
    let o = dxgate(&[
        "train",
        "--features",
        csv,
        "--seed",
        "3",
        "--out",
        model,
        "--report",
        "-",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["test_rows"], 40);
    let e = dxgate_stdin(
        &["evaluate", "--model", model, "--features", csv, "--baseline", "-"],
        &o.stdout,
    );
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    let v: serde_json::Value = serde_json::from_slice(&e.stdout).unwrap();
    assert_eq!(v["report"]["n"], 200);
    assert_eq!(v["baseline"], report["report"]);
    assert!(v["delta"]["rmse"].is_number());
}

#[test]
fn too_few_rows_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("f.csv");
    std::fs::write(&csv, "id,epsilon,sim_b,sim_c,sim_d,target_e\na,1,0.5,0.5,0.5,0.5\n").unwrap();
    let out = dir.path().join("m.gbdt");
    let o = dxgate(&[
        "train",
        "--features",
        csv.to_str().unwrap(),
        "--seed",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}
