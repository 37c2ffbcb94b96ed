use std::path::Path;
use std::process::{Command, Output};

fn int_forge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_int-forge"))
        .args(args)
        .output()
        .expect("spawn int-forge")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn example_config() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/single-switch.jsonc")
        .display()
        .to_string()
}

#[test]
fn gen_writes_a_readable_trace() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    let p = path.to_str().unwrap();
    let o = int_forge(&["gen", "--preset", "cache", "--packets", "3000", "--seed", "4", "--out", p]);
    assert!(o.status.success(), "{o:?}");
    let trace = int_forge::traffic::read_trace(&path).unwrap();
    assert_eq!(trace.len(), 3000);
    let p2 = dir.path().join("u.jsonl");
    let o = int_forge(&["gen", "--preset", "cache", "--packets", "3000", "--seed", "4", "--out", p2.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn detector_only_sweep_prints_csv() {
    let o = int_forge(&[
        "sweep", "--detector-only", "--packets", "5000", "--presets", "web", "--thresholds", "0,100",
        "--duration", "0s", "--base-capacity", "1000000",
    ]);
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    let mut lines = out.lines();
    assert_eq!(
        lines.next(),
        Some("preset,algorithm,threshold_us,packets,events,pass_ratio,potential_capacity_pps")
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    // noop once, the two detectors at each threshold
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[0][..3], ["web", "noop", "0"]);
    for r in &rows {
        assert_eq!(r[3], "5000");
        let pass: f64 = r[5].parse().unwrap();
        let cap: f64 = r[6].parse().unwrap();
        assert!((cap * pass - 1e6).abs() < 1e-3, "{r:?}");
    }
}

#[test]
fn run_accepts_the_commented_example_config() {
    let cfg = example_config();
    let o = int_forge(&["run", "--config", &cfg, "--packets", "2000"]);
    assert!(o.status.success(), "{o:?}");
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["packets"], 2000);
    assert_eq!(v["delivered"], 2000);
    assert_eq!(v["reports"], v["collector"]["forwarded"]);
    assert_eq!(v["switches"][0]["counters"]["stripped"], 2000);
}

#[test]
fn invalid_config_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"switches": 3}"#).unwrap();
    let o = int_forge(&["run", "--config", path.to_str().unwrap(), "--packets", "100"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn collect_prints_stats_header() {
    let dir = tempfile::tempdir().unwrap();
    let sink = dir.path().join("events.jsonl");
    let sink_arg = format!("file:{}", sink.display());
    let o = int_forge(&[
        "collect", "--in", "channel", "--sink", &sink_arg, "--packets", "20000", "--stats-interval", "5ms",
    ]);
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    assert_eq!(out.lines().next(), Some("ts, pps, errors, forwarded"));
    let events = int_forge::collector::read_sink_file(&sink).unwrap();
    assert!(!events.is_empty());
}
