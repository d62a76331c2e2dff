use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ksda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ksda")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn metrics_command_writes_both_reports() {
    let dir = tempfile::tempdir().unwrap();
    let hyp = dir.path().join("hyp.jsonl");
    let refs = dir.path().join("ref.jsonl");
    fs::write(&hyp, "{\"id\":\"a\",\"text\":\"the cat sat\"}\n{\"id\":\"b\",\"text\":\"hello wrld\"}\n").unwrap();
    fs::write(&refs, "{\"id\":\"b\",\"text\":\"hello world\"}\n{\"id\":\"a\",\"text\":\"the cat sat\"}\n").unwrap();
    let lex = dir.path().join("lex.txt");
    fs::write(&lex, "hello 3\nworld 2\nthe\ncat\nsat\n").unwrap();
    let out = dir.path().join("report.json");
    let text = ok(&ksda(&["metrics", "--hyp", path(&hyp), "--ref", path(&refs), "--lexicon", path(&lex), "--out", path(&out)]));
    assert!(text.contains("TER") && text.contains("dictionary-corrected"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert!((report["raw"]["ter"].as_f64().unwrap() - 0.25).abs() < 1e-12);
    assert_eq!(report["corrected"]["ter"].as_f64().unwrap(), 0.0);
    assert!(dir.path().join("report.txt").exists());

    fs::write(&refs, "{\"id\":\"a\",\"text\":\"the cat sat\"}\n").unwrap();
    let bad = ksda(&["metrics", "--hyp", path(&hyp), "--ref", path(&refs), "--out", path(&out)]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains('b'));
}

#[test]
fn invalid_configuration_is_reported_with_its_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[data]\nval_fraction = 2.0\n").unwrap();
    let out = ksda(&["--config", path(&cfg), "report"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.val_fraction"));
    let out = ksda(&["--preset", "enormous", "report"]);
    assert!(!out.status.success());
}

#[test]
fn standalone_generation_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("videos");
    ok(&ksda(&["--preset", "smoke", "generate", "--style", "pseudo_real", "--count", "3", "--out", path(&out)]));
    let manifest = fs::read_to_string(out.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 3);
    assert!(manifest.contains("pseudo_real"));
    // Refuses to overwrite an existing dataset.
    assert!(!ksda(&["--preset", "smoke", "generate", "--style", "synthetic", "--count", "3", "--out", path(&out)]).status.success());
}

#[test]
fn smoke_pipeline_and_single_runs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("exp");
    let base = ["--preset", "smoke", "--dir", path(&root)];
    let with = |extra: &[&str]| -> Vec<String> { base.iter().chain(extra).map(|s| s.to_string()).collect() };
    let run = |extra: &[&str]| {
        let args = with(extra);
        ok(&ksda(&args.iter().map(String::as_str).collect::<Vec<_>>()))
    };
    run(&["pipeline"]);
    let report = run(&["report"]);
    assert!(report.contains("VI (Full)") && report.contains("median of 1"));
    assert!(!report.contains("Missing runs"));

    let weights = dir.path().join("w.toml");
    fs::write(&weights, "lambda2 = 0.5\n").unwrap();
    let text = run(&["train", "--variant", "VI", "--weights", path(&weights), "--target-train-count", "10", "--run-seed", "3"]);
    assert!(text.contains("VI-n10-s3"));
    assert!(root.join("eval/VI-n10-s3/metrics.json").exists());

    let text = run(&["probe", "--run", "VI-n10-s3"]);
    assert!(text.contains("style"));
    let text = run(&["evaluate", "--run", "pretrain"]);
    assert!(text.contains("pretrain"));
    let bad = ksda(&with(&["evaluate", "--run", "VII-n1-s0"]).iter().map(String::as_str).collect::<Vec<_>>());
    assert!(!bad.status.success());
}
