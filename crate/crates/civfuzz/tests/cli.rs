use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn civfuzz(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_civfuzz")).args(args).output().unwrap()
}

fn scenario(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(format!("{name}.json"))
        .display()
        .to_string()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn run_into(dir: &Path, name: &str) -> Output {
    civfuzz(&[
        "run",
        "--spec",
        &scenario(name),
        "--adapter",
        "sim",
        "--seed",
        "1",
        "--max-runs",
        "200",
        "--out",
        dir.to_str().unwrap(),
    ])
}

#[test]
fn run_then_report() {
    let root = tempfile::tempdir().unwrap();
    for name in ["markdown", "echo"] {
        let o = run_into(&root.path().join(name), name);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let dir = root.path().to_str().unwrap();

    let table = civfuzz(&["report", dir, "--format", "table"]);
    assert_eq!(code(&table), 0);
    let text = String::from_utf8(table.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("TM & Scenario"));
    assert!(lines[1].contains(" & echo & "));
    assert!(lines[3].contains("Total"));

    let plain = civfuzz(&["report", dir, "--format", "plain"]);
    assert_eq!(String::from_utf8(plain.stdout).unwrap(), text);

    let out: PathBuf = root.path().join("table.csv");
    let csv = civfuzz(&["report", dir, "--format", "csv", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&csv), 0);
    assert!(csv.stdout.is_empty());
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 4);

    let json = civfuzz(&["report", dir, "--format", "json"]);
    let v: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 2);

    // A single campaign directory works too.
    let one = civfuzz(&[
        "report",
        root.path().join("markdown").to_str().unwrap(),
        "--format",
        "csv",
    ]);
    assert_eq!(String::from_utf8(one.stdout).unwrap().lines().count(), 3);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = civfuzz(&["run", "--spec", "/nonexistent.json", "--max-runs", "3"]);
    assert_eq!(code(&missing), 2);

    let unbounded = civfuzz(&["run", "--spec", &scenario("markdown")]);
    assert_eq!(code(&unbounded), 2);

    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{ not json").unwrap();
    let bad = civfuzz(&[
        "run",
        "--spec",
        &scenario("markdown"),
        "--max-runs",
        "3",
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(code(&bad), 2);

    let report = civfuzz(&["report", dir.path().join("nothing").to_str().unwrap()]);
    assert_eq!(code(&report), 2);
}

#[test]
fn config_file_supplies_settings() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"spec_path": "ignored", "adapter": "sim", "seed": 0, "max_runs": 4, "mutation": {"p_cold": 0.0}}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = civfuzz(&[
        "run",
        "--spec",
        &scenario("pipeline"),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["runs"], 4);
}

#[test]
fn adapter_failure_exits_with_three() {
    let spec = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/shim_spec.json");
    let o = civfuzz(&[
        "run",
        "--spec",
        spec.to_str().unwrap(),
        "--adapter",
        "shim",
        "--workload",
        "exit 1",
        "--max-runs",
        "2",
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn scenario_listing_and_validation() {
    let list = civfuzz(&["scenarios", "list"]);
    assert_eq!(code(&list), 0);
    let text = String::from_utf8(list.stdout).unwrap();
    assert_eq!(text.lines().count(), 13);
    assert!(text.lines().any(|l| l.starts_with("errpath\t")));

    let ok = civfuzz(&["scenarios", "validate", &scenario("markdown"), &scenario("racy")]);
    assert_eq!(code(&ok), 0);

    let dir = tempfile::tempdir().unwrap();
    let broken = dir.path().join("broken.json");
    let mut v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(scenario("markdown")).unwrap()).unwrap();
    v["planted"][0]["site"] = "no_such_site".into();
    std::fs::write(&broken, v.to_string()).unwrap();
    let bad = civfuzz(&["scenarios", "validate", &scenario("markdown"), broken.to_str().unwrap()]);
    assert_eq!(code(&bad), 2);
    let out = String::from_utf8(bad.stdout).unwrap();
    assert!(out.contains("invalid") && out.contains("no_such_site"), "{out}");
}
