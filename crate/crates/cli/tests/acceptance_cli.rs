//! End-to-end smoke criterion: dataset generation, one small training run,
//! and report aggregation must finish quickly with exit code 0 and produce a
//! well-formed report.

use std::process::Command;
use std::time::Instant;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_slotkit"))
}

#[test]
fn criterion_9_cli_end_to_end_smoke() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let runs = tmp.path().join("runs");
    let report = tmp.path().join("report");

    let out = bin()
        .args(["gen-data", "--num", "200", "--seed", "3"])
        .arg("--out")
        .arg(&data)
        .output()
        .unwrap();
    assert!(out.status.success(), "gen-data failed: {}", String::from_utf8_lossy(&out.stderr));

    let config = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml");
    let out = bin()
        .args(["run", "--config", config])
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&runs)
        .args([
            "--set",
            "run_id=smoke",
            "--set",
            "train.epochs=2",
            "--set",
            "train.warmup_epochs=0.5",
            "--set",
            "probe.steps=500",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "run failed: {}", String::from_utf8_lossy(&out.stderr));

    let out = bin()
        .arg("report")
        .arg(&runs)
        .arg("--out")
        .arg(&report)
        .output()
        .unwrap();
    assert!(out.status.success(), "report failed: {}", String::from_utf8_lossy(&out.stderr));

    let md = std::fs::read_to_string(report.join("report.md")).unwrap();
    assert!(md.contains("| smoke | 1 |"), "report missing the run row:\n{md}");
    assert!(report.join("ap.png").exists());
    let run_dir = std::fs::read_dir(&runs).unwrap().next().unwrap().unwrap().path();
    for artifact in ["config.toml", "metrics.jsonl", "eval.json"] {
        assert!(run_dir.join(artifact).exists(), "missing {artifact}");
    }
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("eval.json")).unwrap()).unwrap();
    assert!(eval["ap"].as_f64().unwrap().is_finite());

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 300, "took {elapsed:?}, budget 5 min");
    println!(
        "PASS criterion 9: gen-data + run + report on 200 images, exit 0, well-formed report ({elapsed:?})"
    );
}
