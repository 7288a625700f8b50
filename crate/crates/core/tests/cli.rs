use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use serde_json::Value;

const TINY: &str = r#"{
  "corpus": {"n_users": 4, "images_per_user": 12},
  "held_out": {"n_users": 2, "images_per_user": 8},
  "train": {"epochs_step1": 2, "epochs_step2": 2, "i_train": 4},
  "net": {"style_dim": 16, "content_dim": 16, "ff_dim": 32},
  "bench": {"i_new_values": [1, 5], "n_samplings": 2}
}"#;

fn msm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msm")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
    run: PathBuf,
    gen_stdout: String,
}

/// One gen-data + train pass shared by the tests below.
fn run() -> &'static Run {
    static CELL: OnceLock<Run> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("tiny.json");
        std::fs::write(&config, TINY).unwrap();
        let (data, run) = (root.join("data"), root.join("run"));
        let gen_stdout = ok(msm(&["gen-data", "-c", s(&config), "--out", s(&data)]));
        ok(msm(&["train", "-c", s(&config), "--data", s(&data), "--out", s(&run)]));
        Run { _dir: dir, root, config, data, run, gen_stdout }
    })
}

#[test]
fn gen_data_manifests_are_reproducible() {
    let r = run();
    let again = r.root.join("data_again");
    let stdout = ok(msm(&["gen-data", "-c", s(&r.config), "--out", s(&again)]));
    assert_eq!(stdout, r.gen_stdout);
    for split in ["train", "test"] {
        let a = std::fs::read(r.data.join(split).join("manifest.json")).unwrap();
        let b = std::fs::read(again.join(split).join("manifest.json")).unwrap();
        assert_eq!(a, b);
    }
    let cfg: Value = serde_json::from_slice(&std::fs::read(r.data.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["config"]["corpus"]["n_users"], 4);
    assert_eq!(cfg["manifest_sha256"]["train"].as_str().unwrap().len(), 64);
}

#[test]
fn config_errors_exit_with_two() {
    let r = run();
    let bad = r.root.join("bad.json");
    std::fs::write(&bad, r#"{"corpus": {"n_users": 0}}"#).unwrap();
    let out = msm(&["gen-data", "-c", s(&bad), "--out", s(&r.root.join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("corpus.n_users"));
    let out = msm(&["gen-data", "--set", "train.lr=-1", "--out", s(&r.root.join("y"))]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(&bad, r#"{"corpus": {"no_such_field": 1}}"#).unwrap();
    assert_eq!(msm(&["gen-data", "-c", s(&bad), "--out", s(&r.root.join("z"))]).status.code(), Some(2));
}

#[test]
fn missing_artifacts_exit_with_three() {
    let r = run();
    let missing = r.root.join("nope.msm");
    let out = msm(&["eval", "-c", s(&r.config), "--data", s(&r.data), "--checkpoint", s(&missing), "--out", s(&r.root.join("e"))]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(msm(&["serve", "--checkpoint", s(&missing)]).status.code(), Some(3));
    let out = msm(&["train", "-c", s(&r.config), "--data", s(&r.root.join("nodata")), "--out", s(&r.root.join("t"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn train_log_echoes_config_and_counts_epochs() {
    let r = run();
    let log: Value = serde_json::from_slice(&std::fs::read(r.run.join("train_log.json")).unwrap()).unwrap();
    assert_eq!(log["config"]["train"]["epochs_step1"], 2);
    for step in ["step1", "step2"] {
        let epochs: Vec<u64> = log["log"][step].as_array().unwrap().iter().map(|e| e["epoch"].as_u64().unwrap()).collect();
        assert_eq!(epochs.len(), 2);
        assert!(epochs.windows(2).all(|w| w[1] > w[0]));
    }
    assert!(r.run.join("step1.msm").exists() && r.run.join("step2.msm").exists());
}

#[test]
fn resume_reproduces_step2() {
    let r = run();
    let resumed = r.root.join("resumed");
    std::fs::create_dir_all(&resumed).unwrap();
    std::fs::copy(r.run.join("step1.msm"), resumed.join("step1.msm")).unwrap();
    ok(msm(&["train", "-c", s(&r.config), "--data", s(&r.data), "--out", s(&resumed), "--resume"]));
    let a = msm::checkpoint::load(&r.run.join("step2.msm")).unwrap();
    let b = msm::checkpoint::load(&resumed.join("step2.msm")).unwrap();
    assert_eq!(a.model.transformer.params, b.model.transformer.params);
}

#[test]
fn eval_writes_reports() {
    let r = run();
    let out = r.root.join("report");
    let stdout = ok(msm(&["eval", "-c", s(&r.config), "--data", s(&r.data), "--checkpoint", s(&r.run.join("step2.msm")), "--out", s(&out)]));
    assert!(stdout.contains("masked"));
    let doc: Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(doc["config"]["bench"]["n_samplings"], 2);
    assert_eq!(doc["benchmark"]["cells"].as_array().unwrap().len(), 6);
    assert!(out.join("report.txt").exists());
}

#[test]
fn enhance_writes_an_image() {
    let r = run();
    let user = r.data.join("train/corpus/0");
    let pair = |i: usize| format!("{}:{}", s(&user.join(format!("{i}_x.png"))), s(&user.join(format!("{i}_y.png"))));
    let output = r.root.join("out.png");
    let input = user.join("5_x.png");
    let stdout = ok(msm(&[
        "enhance", "--checkpoint", s(&r.run.join("step2.msm")), "--pair", &pair(0), "--pair", &pair(1), "--pair", &pair(2),
        "--input", s(&input), "--output", s(&output),
    ]));
    let v: Value = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!(v["attention"].as_array().unwrap().len(), 3);
    let img = msm::Image::read_png(&output).unwrap();
    assert_eq!(img.dims(), msm::Image::read_png(&input).unwrap().dims());
    let bad = msm(&["enhance", "--checkpoint", s(&r.run.join("step2.msm")), "--pair", &pair(0), "--input", s(&input), "--output", s(&output), "--method", "sepia"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn serve_answers_healthz() {
    let r = run();
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = Command::new(env!("CARGO_BIN_EXE_msm"))
        .args(["serve", "--checkpoint", s(&r.run.join("step2.msm")), "--set", &format!("serve.port={port}")])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(20);
    let response = loop {
        if let Ok(mut stream) = TcpStream::connect(("127.0.0.1", port)) {
            stream.write_all(b"GET /healthz HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").unwrap();
            let mut buf = String::new();
            stream.read_to_string(&mut buf).unwrap();
            break buf;
        }
        assert!(Instant::now() < deadline, "server did not come up");
        std::thread::sleep(Duration::from_millis(100));
    };
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    assert!(response.contains(r#""status":"ok""#));
}
