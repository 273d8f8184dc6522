use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use replab::kernel::{read_trace, trace_to_string};
use replab::refinement::fixtures;

fn replab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_replab"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn scenario(name: &str) -> String {
    scenarios().join(name).to_string_lossy().into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

const SMALL: &str = "protocol = \"zab\"\nn = 3\nf = 1\nseed = 4\n\n[workload]\nops_per_client = 6\n";

#[test]
fn run_writes_trace_and_metrics_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let out = replab(dir.path(), &["run", &cfg]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let first = fs::read(dir.path().join("small.trace.jsonl")).unwrap();
    assert!(dir.path().join("small.metrics.json").exists());
    assert!(String::from_utf8_lossy(&out.stdout).contains("6/6 operations answered"));

    let again = replab(dir.path(), &["run", &cfg, "--trace", "second.jsonl", "--metrics", "second.json"]);
    assert_eq!(again.status.code(), Some(0));
    assert_eq!(first, fs::read(dir.path().join("second.jsonl")).unwrap());

    let reseeded = replab(dir.path(), &["run", &cfg, "--seed", "99", "--trace", "third.jsonl"]);
    assert_eq!(reseeded.status.code(), Some(0));
    assert_ne!(first, fs::read(dir.path().join("third.jsonl")).unwrap());
}

#[test]
fn invalid_config_reports_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "protocol = \"paxos\"\nn = 2\nf = 1\n");
    let out = replab(dir.path(), &["run", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("`n`") || err.contains("`f`"), "{err}");

    let unknown = write(dir.path(), "unknown.toml", "protocol = \"paxos\"\nspeed = 3\n");
    let out = replab(dir.path(), &["run", &unknown]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("speed"));
}

#[test]
fn check_accepts_engine_traces_and_rejects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    assert_eq!(replab(dir.path(), &["run", &cfg]).status.code(), Some(0));
    let out = replab(
        dir.path(),
        &["check", "small.trace.jsonl", "--config", &cfg, "--report", "report.jsonl"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let report = fs::read_to_string(dir.path().join("report.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 4);
    assert!(report.lines().all(|l| l.contains("\"accepted\"")));

    let text = fs::read_to_string(dir.path().join("small.trace.jsonl")).unwrap();
    let trace = read_trace(text.as_bytes()).unwrap();
    let bad = fixtures::tamper_payload(&trace).unwrap();
    let bad_path = write(dir.path(), "bad.jsonl", &trace_to_string(&bad));
    let out = replab(dir.path(), &["check", &bad_path, "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("engine-mcpo: rejected at event"), "{stdout}");
    assert!(stdout.contains("not reached"));
}

#[test]
fn check_honours_an_explicit_chain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario("paxos.toml");
    assert_eq!(replab(dir.path(), &["run", &cfg, "--trace", "p.jsonl"]).status.code(), Some(0));
    let out = replab(dir.path(), &["check", "p.jsonl", "--config", &cfg, "--chain", "engine-mc,mc-active"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 2);
    let out = replab(dir.path(), &["check", "p.jsonl", "--config", &cfg, "--chain", "engine-mc,passive-active"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_trace_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    assert_eq!(replab(dir.path(), &["run", &cfg]).status.code(), Some(0));
    let text = fs::read_to_string(dir.path().join("small.trace.jsonl")).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[2] = "{not json";
    let broken = write(dir.path(), "broken.jsonl", &lines.join("\n"));
    let out = replab(dir.path(), &["check", &broken, "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn replay_detects_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    assert_eq!(replab(dir.path(), &["run", &cfg]).status.code(), Some(0));
    let ok = replab(
        dir.path(),
        &["replay", "small.trace.jsonl", "--config", &cfg, "--metrics", "small.metrics.json"],
    );
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stdout));

    let other = write(dir.path(), "other.toml", &SMALL.replace("seed = 4", "seed = 5"));
    let out = replab(dir.path(), &["replay", "small.trace.jsonl", "--config", &other]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("differs"));
}

#[test]
fn compare_prints_a_row_per_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let out = replab(
        dir.path(),
        &["compare", &scenario("paxos.toml"), &scenario("vsr.toml"), &scenario("zab.toml")],
    );
    assert_eq!(out.status.code(), Some(0));
    let table = String::from_utf8_lossy(&out.stdout);
    assert_eq!(table.lines().count(), 4);
    let paxos = table.lines().find(|l| l.starts_with("paxos")).unwrap();
    assert!(paxos.contains("5.00"), "{paxos}");

    let broadcast = replab(
        dir.path(),
        &["compare", &scenario("paxos.toml"), &scenario("paxos_broadcast.toml"), "--axes", "dissemination"],
    );
    assert_eq!(broadcast.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&broadcast.stdout).contains("6.00"));

    let mismatched = replab(dir.path(), &["compare", &scenario("paxos.toml"), &scenario("vsr_crash.toml")]);
    assert_eq!(mismatched.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&mismatched.stderr).contains("crashes"));
}

#[test]
fn crash_scenarios_differ_in_recovery() {
    let dir = tempfile::tempdir().unwrap();
    let out = replab(
        dir.path(),
        &["compare", &scenario("paxos_crash.toml"), &scenario("vsr_crash.toml"), &scenario("zab_crash.toml")],
    );
    assert_eq!(out.status.code(), Some(0));
    let table = String::from_utf8_lossy(&out.stdout);
    for row in table.lines().skip(1) {
        let cols: Vec<&str> = row.split_whitespace().collect();
        assert_eq!(cols[5], "1", "{row}");
    }
}

#[test]
fn explore_reports_and_exits_by_outcome() {
    let dir = tempfile::tempdir().unwrap();
    let out = replab(dir.path(), &["explore", &scenario("small_scope.toml"), "--report", "r.json"]);
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(report["complete"], true);
    assert!(report["violation"].is_null());

    let out = replab(dir.path(), &["explore", &scenario("register_race_plain.toml"), "--trace", "race.jsonl"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("goal reached"));
    let race = fs::read_to_string(dir.path().join("race.jsonl")).unwrap();
    assert!(read_trace(race.as_bytes()).unwrap().iter().any(|e| e.transition == "update"));

    let text = fs::read_to_string(scenarios().join("register_race_po.toml")).unwrap();
    let capped = write(dir.path(), "capped.toml", &text.replace("state_cap = 1000000", "state_cap = 50"));
    let out = replab(dir.path(), &["explore", &capped]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stdout).contains("complete false"));

    let plain = text
        .replace("mode = \"prefix_ordered\"", "mode = \"plain\"")
        .replace("goal = ", "# goal = ");
    let broken = write(dir.path(), "broken.toml", &plain);
    let out = replab(dir.path(), &["explore", &broken, "--trace", "cx.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("violation of PrefixOrder"));
    assert!(dir.path().join("cx.jsonl").exists());
}
