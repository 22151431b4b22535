//! End-to-end runs of the `costeer` binary.

use std::path::Path;
use std::process::{Command, Output};

fn costeer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_costeer")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = costeer(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn oracle_then_simulate_time_triggered() {
    let dir = tempfile::tempdir().unwrap();
    let gains = dir.path().join("oracle.json");
    let report = ok(&["oracle", "--out", s(&gains)]);
    assert!(report.contains("feedforward_residual"));

    let out = dir.path().join("time");
    ok(&["simulate", "--gains", s(&gains), "--trigger", "time", "--out", s(&out)]);
    let log = std::fs::read_to_string(out.join("log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t,vy,ra,psiL,yL,yc,delta_d,delta_c,u,sigma,ci,rho,trigger"
    );
    assert_eq!(lines.count(), 3000);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["triggers"], 3000);
}

#[test]
fn learn_writes_gains_and_history() {
    let dir = tempfile::tempdir().unwrap();
    let gains = dir.path().join("learned.json");
    let stdout = ok(&["learn", "--out", s(&gains)]);
    assert!(stdout.contains("iterations"));
    let history = std::fs::read_to_string(dir.path().join("learned.history.csv")).unwrap();
    assert!(history.starts_with("j,dp_norm,k_norm\n"));
    assert!(history.lines().count() > 2);

    let out = dir.path().join("ablation");
    ok(&["ablate", "--gains", s(&gains), "--out", s(&out)]);
    let table = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert!(table.starts_with("variant,cnf,sigma,trigger,j_rms,triggers,max_abs_yc,reduction_pct\n"));
    assert_eq!(table.lines().count(), 7);
}

#[test]
fn config_file_is_honoured_and_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("short.toml");
    std::fs::write(&cfg, "[scenario]\nduration = 2.0\n").unwrap();
    let gains = dir.path().join("g.json");
    ok(&["oracle", "--config", s(&cfg), "--out", s(&gains)]);
    let out = dir.path().join("run");
    ok(&[
        "simulate",
        "--config",
        s(&cfg),
        "--gains",
        s(&gains),
        "--trigger",
        "event",
        "--out",
        s(&out),
    ]);
    assert_eq!(
        std::fs::read_to_string(out.join("log.csv")).unwrap().lines().count(),
        401
    );

    std::fs::write(&cfg, "[scenario]\nduration = -1.0\n").unwrap();
    let bad = costeer(&["simulate", "--config", s(&cfg), "--gains", s(&gains), "--out", s(&out)]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("short.toml"));

    let missing = costeer(&[
        "simulate",
        "--gains",
        s(&dir.path().join("none.json")),
        "--out",
        s(&out),
    ]);
    assert!(!missing.status.success());
}

#[test]
fn shipped_configs_match_reference_cases() {
    use costeer::config::Config;
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    assert_eq!(
        Config::load(&root.join("quarter_turn.toml")).unwrap(),
        Config::default()
    );
    assert_eq!(Config::load(&root.join("loop.toml")).unwrap(), Config::loop_case());
}
