use std::path::Path;
use std::process::{Command, Output};

fn fspad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fspad"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn micro_config() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/micro.json")
        .to_string_lossy()
        .into_owned()
}

#[test]
fn selftest_passes() {
    let out = fspad(&["selftest"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.matches("[PASS]").count(), 4);
}

#[test]
fn exit_codes_follow_error_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"model": {"vocab_size": 512, "typo": 1}}"#).unwrap();
    assert_eq!(fspad(&["--config", bad.to_str().unwrap(), "train-target"]).status.code(), Some(2));
    assert_eq!(fspad(&["--budget", "0", "bench"]).status.code(), Some(2));
    assert_eq!(fspad(&["--config", "/no/such/file.json", "bench"]).status.code(), Some(3));
    let out = dir.path().join("empty");
    assert_eq!(fspad(&["--out", out.to_str().unwrap(), "bench"]).status.code(), Some(3));
    assert_eq!(fspad(&["train-draft", "--variant", "bogus"]).status.code(), Some(2));
}

#[test]
fn micro_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap().to_string();
    let cfg = micro_config();
    let base = ["--config", cfg.as_str(), "--out", out.as_str(), "--seed", "3"];
    let run = |extra: &[&str]| {
        let mut args: Vec<&str> = base.to_vec();
        args.extend(extra);
        let o = fspad(&args);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{extra:?}: {}{}",
            String::from_utf8_lossy(&o.stdout),
            String::from_utf8_lossy(&o.stderr)
        );
        String::from_utf8(o.stdout).unwrap()
    };
    run(&["train-target"]);
    assert!(dir.path().join("target.ckpt").exists());
    assert!(dir.path().join("tokenizer.json").exists());
    for v in ["fspad", "no_fs", "no_pad", "neither"] {
        run(&["train-draft", "--variant", v]);
        assert!(dir.path().join(format!("draft_{v}.ckpt")).exists());
        let log = std::fs::read_to_string(dir.path().join(format!("draft_{v}_train.ndjson"))).unwrap();
        assert_eq!(log.lines().count(), 20);
    }
    let text = run(&["generate", "--prompt", "once upon a time ", "--max-new", "10"]);
    assert!(text.starts_with("once upon a time "));
    run(&["bench", "--variant", "fspad,no_pad", "--depth", "2", "--topk", "2", "--budget", "4"]);
    let reports: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("bench.json")).unwrap()).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 3 * 2);
    assert!(dir.path().join("bench.csv").exists());
    assert!(dir.path().join("bench.steps.ndjson").exists());
    let ablate = run(&["ablate"]);
    assert!(ablate.contains("ablation ordering") || ablate.contains("ABLATION ORDERING REGRESSION"));
    let plot = std::fs::read_to_string(dir.path().join("ablation_plot.csv")).unwrap();
    assert_eq!(plot.lines().count(), 1 + 3 * 4);
}
