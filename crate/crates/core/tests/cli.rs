use std::path::Path;
use std::process::Command;

fn sos(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_sos")).args(args).output().unwrap()
}

fn config_path() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/tiny.toml"))
}

#[test]
fn run_with_overrides_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("grid");
    let o = sos(&["run", "--config", config_path().to_str().unwrap(), "--out", out.to_str().unwrap(), "--settings", "ORIG-RS,WDA", "--seeds", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let results = std::fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 3);
    assert!(results.contains("\nORIG-RS,3,") && results.contains("\nWDA,3,"));
    assert!(out.join("summary.csv").exists() && out.join("resolved_config.toml").exists());
    assert!(String::from_utf8_lossy(&o.stdout).contains("Macro F1"));

    let run = out.join("runs/WDA_seed3");
    let o = sos(&["eval", "--pred", run.join("predictions.csv").to_str().unwrap(), "--truth", run.join("truth.csv").to_str().unwrap()]);
    assert!(o.status.success());
    let stdout = String::from_utf8_lossy(&o.stdout);
    let f1: f64 = stdout.lines().find_map(|l| l.strip_prefix("macro_f1")).unwrap().trim().parse().unwrap();
    let recorded: f64 = results.lines().find(|l| l.starts_with("WDA")).unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert!((f1 - recorded).abs() < 1e-4);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, std::fs::read_to_string(config_path()).unwrap().replace("seeds", "sedes")).unwrap();
    let o = sos(&["run", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sedes"));

    let o = sos(&["run", "--config", config_path().to_str().unwrap(), "--seeds", "", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = sos(&["run", "--config", config_path().to_str().unwrap(), "--mode", "merge"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gen_data_then_reorder() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    std::fs::write(&spec, "[desk]\nworkers = 2\nduration = 1500\nseed = 3\n").unwrap();
    let stream = dir.path().join("combined.csv");
    let o = sos(&["gen-data", "--spec", spec.to_str().unwrap(), "--out", stream.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("combined.worker0.csv").exists() && dir.path().join("combined.worker1.csv").exists());
    let combined = sos_core::ingest::load_stream(&stream).unwrap();
    assert_eq!(combined.len(), 3000);

    let sorted = dir.path().join("sorted.csv");
    let o = sos(&["reorder", "--in", stream.to_str().unwrap(), "--strategy", "as", "--out", sorted.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = sos_core::ingest::load_stream(&sorted).unwrap();
    assert_eq!(s.len(), combined.len());
    let labels: Vec<u32> = s.labels().map(|l| l.raw()).collect();
    assert!(labels.windows(2).all(|w| w[0] <= w[1]));

    let o = sos(&["reorder", "--in", stream.to_str().unwrap(), "--strategy", "zigzag", "--out", sorted.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
