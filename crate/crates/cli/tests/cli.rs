use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_layout-mcl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn unknown_flag_prints_usage() {
    let out = cli(&["train", "--bogus"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn synth_then_alignment_only_eval() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    let report = dir.path().join("r.json");
    ok(&["synth", "--count", "30", "--seed", "3", "--out", p(&corpus)]);
    assert_eq!(std::fs::read_to_string(&corpus).unwrap().lines().count(), 30);
    ok(&["eval", "--generated", p(&corpus), "--report", p(&report)]);
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert!(r["alignment"].as_f64().unwrap() >= 0.0);
    assert!(r["fid"].is_null());
    assert!(r["fake_positive"].is_null());
}

#[test]
fn toy_writes_csv_and_inspect_reads_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("toy");
    let stdout = ok(&["toy", "--m", "4", "--steps", "100", "--seeds", "5", "--out", p(&out)]);
    assert!(stdout.starts_with("mcl:"), "{stdout}");
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.lines().count() >= 2);
    assert!(out.join("toy.json").exists());
    let shown = ok(&["inspect", p(&out)]);
    assert_eq!(shown.lines().filter(|l| l.contains("P=")).count(), 5);
}

#[test]
fn too_few_toy_seeds_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!cli(&["toy", "--seeds", "2", "--out", p(dir.path())]).status.success());
}

#[test]
fn train_inspect_generate() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("ckpt");
    ok(&["train", "--synth", "12", "--epochs", "1", "--out", p(&ckpt)]);
    let shown = ok(&["inspect", p(&ckpt)]);
    assert!(shown.contains("P="), "{shown}");
    assert!(shown.contains("categories text,title,figure,table,list"));

    let out = ok(&[
        "generate",
        "--checkpoint",
        p(&ckpt),
        "--hard",
        "title:0.05,0.04,0.9,0.06",
        "--soft",
        "figure",
        "--count",
        "3",
        "--seed",
        "4",
    ]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    let candidates = v["candidates"].as_array().unwrap();
    assert_eq!(candidates.len(), 3);
    for c in candidates {
        let objects = c["layout"]["objects"].as_array().unwrap();
        assert_eq!(objects[0]["category"], "title");
        assert_eq!(objects[0]["bbox"], serde_json::json!([0.05, 0.04, 0.9, 0.06]));
        assert_eq!(objects[1]["category"], "figure");
    }
    assert_eq!(out, ok(&["generate", "--checkpoint", p(&ckpt), "--hard", "title:0.05,0.04,0.9,0.06", "--soft", "figure", "--count", "3", "--seed", "4"]));

    let svg = ok(&["generate", "--checkpoint", p(&ckpt), "--format", "svg", "--count", "2"]);
    assert_eq!(svg.matches("<svg").count(), 2);

    let saved = dir.path().join("gen.json");
    let report = dir.path().join("r.json");
    std::fs::write(&saved, &out).unwrap();
    ok(&["eval", "--generated", p(&saved), "--report", p(&report)]);
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert!(r["alignment"].as_f64().unwrap() >= 0.0);

    let bad = cli(&["generate", "--checkpoint", p(&ckpt), "--hard", "poster:0,0,1,1"]);
    assert!(!bad.status.success());
}
