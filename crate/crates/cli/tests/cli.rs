use std::io::{Read, Write};
use std::path::Path;
use std::process::{Command, Output};

fn dosefind(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dosefind")).args(args).output().unwrap()
}

fn small_scenario(dir: &Path) -> String {
    let path = dir.join("small.toml");
    std::fs::write(
        &path,
        "n = 4\nm_rho = 32\nm_eta = 64\nB = 4\ncandidates = 6\nrollout_m_rho = 16\nrollout_m_eta = 32\n",
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn simulate_writes_hashed_csv() {
    let out = dosefind(&["simulate", "--policies", "ewoc,crm", "--reps", "40", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("# config-hash: "));
    assert_eq!(lines[1], "design,risk,risk_se,bias,bias_se,rmse,rmse_se,dlt,dlt_se,od,od_se");
    assert!(lines[2].starts_with("EWOC,"));
    assert!(lines[3].starts_with("CRM,"));
}

#[test]
fn simulate_is_byte_identical_across_runs_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = small_scenario(dir.path());
    let args = |threads: &str, out: &str| {
        vec!["simulate", "--scenario", &scenario, "--policies", "ewoc,rollout,sa", "--reps", "12", "--seed", "3"]
            .into_iter()
            .map(String::from)
            .chain(["--threads".into(), threads.into(), "--out".into(), out.into()])
            .collect::<Vec<String>>()
    };
    let paths: Vec<String> = ["a.csv", "b.csv", "c.csv"].iter().map(|f| dir.path().join(f).to_str().unwrap().to_string()).collect();
    for (threads, path) in [("1", &paths[0]), ("1", &paths[1]), ("4", &paths[2])] {
        let a = args(threads, path);
        let out = dosefind(&a.iter().map(String::as_str).collect::<Vec<_>>());
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let read = |p: &String| std::fs::read(p).unwrap();
    assert_eq!(read(&paths[0]), read(&paths[1]));
    assert_eq!(read(&paths[0]), read(&paths[2]));
}

#[test]
fn fit_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = small_scenario(dir.path());
    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = dosefind(&[
            "fit", "--scenario", &scenario, "--iterations", "2", "--seed", "7", "--B", "6", "--reps", "10", "--threads", "1",
            "--out", out_dir.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        out_dir
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["coefficients.json", "lookup.csv", "report.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("coefficients.json")).unwrap()).unwrap();
    assert_eq!(json["iterations"].as_array().unwrap().len(), 2);
    let report = std::fs::read_to_string(a.join("report.csv")).unwrap();
    assert!(report.contains("\nHybrid1,") && report.contains("\nHybrid2,"));
}

#[test]
fn export_table_epsilon_at_unit_spread() {
    let out = dosefind(&["export-table", "--beta0", "0.096", "--beta1", "0.02"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l == "1,1.000000,0.116000"), "{text}");
}

#[test]
fn export_table_reads_coefficient_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(
        &path,
        r#"{"blocks":[{"first":1,"last":10,"beta0":-0.72,"beta1":0.94}],"s_lo":0.0,"s_hi":1.0,"mode":"clamped"}"#,
    )
    .unwrap();
    let out = dosefind(&["export-table", "--coefficients", path.to_str().unwrap(), "--points", "3", "--s-max", "1"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("1,0.000000,0.000000"));
    assert!(text.contains("1,1.000000,0.220000"));
}

#[test]
fn risk_curve_has_one_row_per_stage() {
    let out = dosefind(&["risk-curve", "--policies", "ewoc", "--reps", "20"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("# config-hash: "));
    assert!(text.contains("# design: EWOC\nk,R_k,se\n"));
    assert_eq!(text.lines().filter(|l| l.chars().next().is_some_and(|c| c.is_ascii_digit())).count(), 10);
}

#[test]
fn exit_codes() {
    assert_eq!(dosefind(&["simulate", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(dosefind(&["simulate", "--policies", "nope", "--reps", "4"]).status.code(), Some(1));
    assert_eq!(dosefind(&["simulate", "--scenario", "/nonexistent.toml"]).status.code(), Some(1));
    assert_eq!(dosefind(&["export-table"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "q = 2.0\n").unwrap();
    assert_eq!(dosefind(&["simulate", "--scenario", bad.to_str().unwrap()]).status.code(), Some(1));
    let out_in_missing_dir = dir.path().join("missing/dir/out.csv");
    let out = dosefind(&["simulate", "--reps", "4", "--out", out_in_missing_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(dosefind(&["--help"]).status.code(), Some(0));
}

#[test]
fn serve_answers_health_checks() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = Command::new(env!("CARGO_BIN_EXE_dosefind"))
        .args(["serve", "--port", &port.to_string()])
        .stderr(std::process::Stdio::null())
        .spawn()
        .unwrap();
    let mut response = String::new();
    for _ in 0..100 {
        if let Ok(mut s) = std::net::TcpStream::connect(("127.0.0.1", port)) {
            s.write_all(b"GET /healthz HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").unwrap();
            s.read_to_string(&mut response).unwrap();
            break;
        }
        std::thread::sleep(std::time::Duration::from_millis(50));
    }
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    assert!(response.contains("\"status\":\"ok\""));
}
