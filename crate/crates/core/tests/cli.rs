use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use dfrd::mlp::MlpModel;
use dfrd::scenario::{ScenarioConfig, WorldConfig};

fn dfrd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dfrd"))
}

fn small_config(dir: &Path) -> PathBuf {
    let cfg = ScenarioConfig {
        world: WorldConfig {
            n_classes: 20,
            n_seasons: 4,
            experience_prob: 0.3,
            ..WorldConfig::default()
        },
        hidden_dims: vec![16],
        base_count: 200,
        k: 5,
        ..ScenarioConfig::default()
    };
    let path = dir.join("cfg.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn exit_codes() {
    assert_eq!(dfrd().arg("--help").output().unwrap().status.code(), Some(0));
    assert_eq!(dfrd().arg("--version").output().unwrap().status.code(), Some(0));
    assert_eq!(dfrd().output().unwrap().status.code(), Some(1));
    assert_eq!(dfrd().args(["run", "--bogus"]).output().unwrap().status.code(), Some(1));
    assert_eq!(dfrd().args(["run", "--sampler", "weird"]).output().unwrap().status.code(), Some(1));
    let missing = dfrd().args(["run", "--config", "/definitely/not/here.json"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));
}

#[test]
fn invalid_config_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, r#"{"config_version": 99}"#).unwrap();
    assert_eq!(dfrd().args(["run", "--config"]).arg(&p).output().unwrap().status.code(), Some(2));
    std::fs::write(&p, "not json").unwrap();
    assert_eq!(dfrd().args(["run", "--config"]).arg(&p).output().unwrap().status.code(), Some(2));
}

#[test]
fn default_config_roundtrips() {
    let out = dfrd().arg("default-config").output().unwrap();
    assert!(out.status.success());
    assert_eq!(ScenarioConfig::from_json(&stdout(&out)).unwrap(), ScenarioConfig::default());
}

#[test]
fn demo_prints_ten_generations() {
    let out = dfrd().arg("demo").output().unwrap();
    assert!(out.status.success());
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 10);
    assert!(text.lines().all(|l| l.starts_with("generation")));
}

#[test]
fn gradcheck_passes() {
    let out = dfrd().args(["gradcheck", "--models", "5", "--seed", "9"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("worst:"));
}

#[test]
fn run_writes_csv_plot_and_student() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let csv = dir.path().join("out.csv");
    let svg = dir.path().join("plot.svg");
    let model = dir.path().join("student.bin");
    let out = dfrd()
        .args(["run", "--r", "40", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&csv)
        .arg("--plot")
        .arg(&svg)
        .arg("--save-student")
        .arg(&model)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "generation,top1,cumulative_classes,r,seed");
    assert_eq!(lines.len(), 5);
    assert!(!text.contains('\r'));
    for (i, l) in lines[1..].iter().enumerate() {
        let cols: Vec<&str> = l.split(',').collect();
        assert_eq!(cols[0], (i + 1).to_string());
        assert_eq!(cols[1].split('.').nth(1).unwrap().len(), 6);
        assert_eq!(cols[3], "40");
        assert_eq!(cols[4], "0");
    }
    assert!(std::fs::read_to_string(&svg).unwrap().contains("<polyline"));
    let student = MlpModel::load(&model).unwrap();
    assert_eq!(student.in_dim(), 20);
}

#[test]
fn replicas_emit_rows_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dfrd()
        .args(["run", "--replicas", "2", "--seed", "5", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = stdout(&out);
    assert_eq!(text.lines().filter(|l| l.ends_with(",5")).count(), 4);
    assert_eq!(text.lines().filter(|l| l.ends_with(",6")).count(), 4);
}

#[test]
fn sweep_reports_each_r() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dfrd()
        .args(["sweep", "--r-list", "10,80", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 1 + 2 * 4);
    assert_eq!(text.lines().filter(|l| l.contains(",80,")).count(), 4);
}

#[test]
fn serve_and_connect_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let teacher = dir.path().join("teacher.bin");
    let st = dfrd()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("r.csv"))
        .arg("--save-student")
        .arg(&teacher)
        .status()
        .unwrap();
    assert!(st.success());

    let mut server = dfrd()
        .args(["serve", "--listen", "127.0.0.1:0", "--max-sessions", "1", "--model"])
        .arg(&teacher)
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").unwrap().to_string();

    let jsonl = dir.path().join("pseudo.jsonl");
    let distilled = dir.path().join("distilled.bin");
    let out = dfrd()
        .args(["connect", "--addr", &addr, "--r", "50", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&jsonl)
        .arg("--save-student")
        .arg(&distilled)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(server.wait().unwrap().success());

    let text = std::fs::read_to_string(&jsonl).unwrap();
    assert_eq!(text.lines().count(), 300);
    for l in text.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert_eq!(v["x"].as_array().unwrap().len(), 5);
        assert!(v["y"].as_u64().unwrap() < 20);
    }
    assert_eq!(MlpModel::load(&distilled).unwrap().out_dim(), 20);
}

#[test]
fn connect_rejects_dense_naive_queries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let teacher = dir.path().join("t.bin");
    MlpModel::seeded(&dfrd::mlp::MlpConfig::new(20, vec![], 20, 1))
        .unwrap()
        .save(&teacher)
        .unwrap();
    let mut server = dfrd()
        .args(["serve", "--listen", "127.0.0.1:0", "--max-sessions", "1", "--model"])
        .arg(&teacher)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").unwrap().to_string();
    let out = dfrd()
        .args(["connect", "--addr", &addr, "--sampler", "naive", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    server.wait().unwrap();
}
