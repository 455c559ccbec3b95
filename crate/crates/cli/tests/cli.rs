use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Stdio};

fn skyway() -> Command {
    Command::new(env!("CARGO_BIN_EXE_skyway"))
}

fn small_scenario(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("small.json");
    std::fs::write(
        &p,
        r#"{"name": "small", "duration_s": 5, "arrival_rate": 40, "clock": "virtual", "seed": 3,
            "mix": {"search_flights": 0.5, "create_booking": 0.5}}"#,
    )
    .unwrap();
    p
}

#[test]
fn run_writes_report_and_checks_thresholds() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = small_scenario(dir.path());
    let out = dir.path().join("r.json");
    let pass = dir.path().join("pass.json");
    std::fs::write(&pass, r#"{"metrics": {"consistency_rate_final": {"min": 1}}}"#).unwrap();
    let status = skyway()
        .args(["run", "--scenario"])
        .arg(&scenario)
        .arg("--out")
        .arg(&out)
        .arg("--thresholds")
        .arg(&pass)
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(0), "{}", String::from_utf8_lossy(&status.stderr));
    let stdout = String::from_utf8_lossy(&status.stdout);
    assert!(stdout.contains("PASS consistency_rate_final"));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(report["scenario"], "small");

    let fail = dir.path().join("fail.json");
    std::fs::write(&fail, r#"{"metrics": {"error_rate": {"gt": 0.5}}}"#).unwrap();
    let code = skyway().args(["verify", "--report"]).arg(&out).arg("--thresholds").arg(&fail).stdout(Stdio::null()).status().unwrap();
    assert_eq!(code.code(), Some(1));
    let code = skyway().args(["verify", "--report"]).arg(&out).arg("--thresholds").arg(&pass).stdout(Stdio::null()).status().unwrap();
    assert_eq!(code.code(), Some(0));
}

#[test]
fn seed_override_and_csv_output() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = small_scenario(dir.path());
    let out = dir.path().join("r.csv");
    let code = skyway()
        .args(["run", "--seed", "99", "--scenario"])
        .arg(&scenario)
        .arg("--out")
        .arg(&out)
        .stdout(Stdio::null())
        .status()
        .unwrap();
    assert_eq!(code.code(), Some(0));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("metric,value\n"));
    assert!(csv.contains("\nseed,99\n"));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let code = skyway().args(["run", "--out"]).arg(&out).stderr(Stdio::null()).status().unwrap();
    assert_eq!(code.code(), Some(2));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"name": "x", "duration_s": 1, "arrival_rate": 1, "mix": {"search_flights": 0.5}}"#).unwrap();
    let code = skyway().args(["run", "--scenario"]).arg(&bad).arg("--out").arg(&out).stderr(Stdio::null()).status().unwrap();
    assert_eq!(code.code(), Some(2));
    assert!(!out.exists());

    let code = skyway()
        .args(["verify", "--report", "/nonexistent/r.json", "--thresholds", "/nonexistent/t.json"])
        .stderr(Stdio::null())
        .status()
        .unwrap();
    assert_eq!(code.code(), Some(2));

    let code = skyway().arg("frobnicate").stderr(Stdio::null()).status().unwrap();
    assert_eq!(code.code(), Some(2));
}

#[test]
fn serve_answers_http() {
    let mut child = skyway()
        .args(["serve", "--listen", "127.0.0.1:0", "--threads", "2"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on http://").unwrap().to_string();

    let mut stream = TcpStream::connect(&addr).unwrap();
    write!(stream, "GET /v1/flights/FL0001 HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").unwrap();
    let mut resp = String::new();
    stream.read_to_string(&mut resp).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(resp.contains("\"flight_id\":\"FL0001\""), "{resp}");
}
