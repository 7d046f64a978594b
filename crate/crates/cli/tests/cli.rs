use std::process::Command;

fn handfabric(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_handfabric")).args(args).env_remove("RUST_BACKTRACE").output().unwrap()
}

fn stdout(args: &[&str]) -> String {
    let out = handfabric(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn adr_dump_levels() {
    let initial = stdout(&["adr-dump"]);
    assert!(initial.starts_with("ADR n = 0 / "));
    assert!(initial.contains("U(1, 1)"));
    assert!(stdout(&["adr-dump", "--level", "terminal"]).contains("U(0.3, 1.2)"));
    let bad = handfabric(&["adr-dump", "--level", "most"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("most"));
}

#[test]
fn binpack_writes_a_trace_file() {
    let dir = std::env::temp_dir().join(format!("handfabric-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("binpack.jsonl");
    let out = stdout(&["run-binpack", "--objects", "2", "--trace", path.to_str().unwrap()]);
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(report["metrics"]["attempts"], 2);
    let trace = handfabric::runtime::wire::read_trace(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let (m, _) = handfabric::runtime::metrics_from_trace(&trace).unwrap();
    assert_eq!(serde_json::to_value(&m).unwrap(), report["metrics"]);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn line_distillation_reports_each_iteration() {
    let out = stdout(&["run-distill", "--iterations", "3"]);
    let losses: Vec<f64> = out
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["l_action"].as_f64().unwrap())
        .collect();
    assert_eq!(losses.len(), 3);
    assert!(losses[2] < losses[0]);
}

#[test]
fn missing_config_file_is_an_error() {
    let out = handfabric(&["--robot", "/nonexistent/robot.toml", "adr-dump"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/robot.toml"));
}
