use std::io::{BufRead, BufReader, Read};
use std::net::TcpListener;
use std::path::PathBuf;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::Value;

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn skydrop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skydrop")).args(args).output().unwrap()
}

fn arg(p: &std::path::Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn plan_emits_one_document_per_aircraft() {
    let out = skydrop(&["plan", "--scenario", arg(&scenario("neighborhood.json"))]);
    assert_eq!(out.status.code(), Some(0));
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    let plan = &doc["plans"]["U1"];
    assert_eq!(plan["d_star_m"], 648.0);
    let stops = plan["stops"].as_array().unwrap().len();
    assert_eq!(plan["etas_s"].as_array().unwrap().len(), stops);
    assert_eq!(plan["segment_modes"].as_array().unwrap().len(), stops + 1);
    assert_eq!(doc["rejected"], serde_json::json!(["pkg-08"]));
}

#[test]
fn missing_file_is_invalid_input() {
    for cmd in ["plan", "simulate"] {
        let out = skydrop(&[cmd, "--scenario", "/nonexistent/scenario.json"]);
        assert_eq!(out.status.code(), Some(2));
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn malformed_scenario_is_invalid_input() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"addresses": [], "fleet": [{"id": "U1", "rows": 0, "cols": 2}]}"#).unwrap();
    let out = skydrop(&["simulate", "--scenario", arg(&path)]);
    assert_eq!(out.status.code(), Some(2));
    let out = skydrop(&["simulate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unreachable_stop_is_infeasible() {
    for cmd in ["plan", "simulate"] {
        let out = skydrop(&[cmd, "--scenario", arg(&scenario("infeasible.json"))]);
        assert_eq!(out.status.code(), Some(3));
        assert!(String::from_utf8_lossy(&out.stderr).contains("infeasible_leg"));
        assert!(out.stdout.is_empty());
    }
}

#[test]
fn simulate_is_repeatable_and_honors_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("run.log");
    let path = scenario("neighborhood.json");
    let a = skydrop(&["simulate", "--scenario", arg(&path), "--seed", "7", "--out", arg(&log)]);
    let b = skydrop(&["simulate", "--scenario", arg(&path), "--seed", "7"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    let report: Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(report["delivered"].as_array().unwrap().len(), 6);
    let text = std::fs::read_to_string(&log).unwrap();
    let header: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(header["kind"], "header");
    assert_eq!(header["payload"]["seed"], 7);

    let c = skydrop(&["simulate", "--scenario", arg(&path), "--seed", "8", "--out", arg(&log)]);
    assert_eq!(c.status.code(), Some(0));
    let text = std::fs::read_to_string(&log).unwrap();
    assert!(text.lines().next().unwrap().contains("\"seed\":8"));
}

#[test]
fn report_summarizes_a_log() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("run.log");
    let sim = skydrop(&["simulate", "--scenario", arg(&scenario("neighborhood.json")), "--out", arg(&log)]);
    assert_eq!(sim.status.code(), Some(0));
    let out = skydrop(&["report", "--log", arg(&log)]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("Delivered (6)"));
    assert!(text.contains("Undelivered (1)"));
    assert!(text.contains("permission_timeout"));
    assert!(text.contains("Energy (1)"));
    let garbage = dir.path().join("garbage.log");
    std::fs::write(&garbage, "not json\n").unwrap();
    assert_eq!(skydrop(&["report", "--log", arg(&garbage)]).status.code(), Some(2));
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn http_get(port: u16, path: &str) -> Option<(u16, String)> {
    use std::io::Write;
    let mut s = std::net::TcpStream::connect(("127.0.0.1", port)).ok()?;
    write!(s, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").ok()?;
    let mut text = String::new();
    s.read_to_string(&mut text).ok()?;
    let status = text.split(' ').nth(1)?.parse().ok()?;
    let body = text.split("\r\n\r\n").nth(1).unwrap_or("").to_string();
    Some((status, body))
}

#[test]
fn serve_runs_to_quiescence_and_exits_cleanly() {
    let port = free_port();
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("served.log");
    let mut child = Command::new(env!("CARGO_BIN_EXE_skydrop"))
        .args(["serve", "--scenario", arg(&scenario("crowd.json")), "--port", &port.to_string()])
        .args(["--pace", "400", "--out", arg(&log)])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let start = Instant::now();
    let state = loop {
        if let Some((200, body)) = http_get(port, "/state") {
            break body;
        }
        assert!(start.elapsed() < Duration::from_secs(10), "gateway never answered");
        std::thread::sleep(Duration::from_millis(20));
    };
    let snapshot: Value = serde_json::from_str(&state).unwrap();
    assert_eq!(snapshot["fleet"][0]["aircraft"], "U1");
    let status = child.wait().unwrap();
    assert_eq!(status.code(), Some(0));
    let mut stdout = String::new();
    child.stdout.take().unwrap().read_to_string(&mut stdout).unwrap();
    let report: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(report["status"], "completed");
    assert_eq!(report["jobs"][0]["state"], "delivered");
    assert!(std::fs::read_to_string(&log).unwrap().lines().count() > 10);
}

#[test]
fn serve_on_a_busy_port_exits_4() {
    let held = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = held.local_addr().unwrap().port();
    let out = skydrop(&["serve", "--scenario", arg(&scenario("crowd.json")), "--port", &port.to_string()]);
    assert_eq!(out.status.code(), Some(4));
    drop(held);
}

#[cfg(unix)]
#[test]
fn interrupt_flushes_the_log_and_exits_0() {
    let port = free_port();
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("interrupted.log");
    let mut child = Command::new(env!("CARGO_BIN_EXE_skydrop"))
        .args(["serve", "--scenario", arg(&scenario("operator.json")), "--port", &port.to_string()])
        .args(["--pace", "1", "--out", arg(&log)])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut err = BufReader::new(child.stderr.take().unwrap());
    let mut line = String::new();
    err.read_line(&mut line).unwrap();
    assert!(line.contains("listening"), "{line}");
    std::thread::sleep(Duration::from_millis(300));
    let killed = Command::new("kill").args(["-INT", &child.id().to_string()]).status().unwrap();
    assert!(killed.success());
    let status = child.wait().unwrap();
    assert_eq!(status.code(), Some(0));
    let text = std::fs::read_to_string(&log).unwrap();
    assert!(text.starts_with("{\"seq\":1,"));
    assert!(text.lines().last().unwrap().contains("\"kind\":\"end\""));
}
