use std::path::Path;
use std::process::{Command, Output};

use frkan::layers::{init_network, save_checkpoint, LayerKind, NetworkConfig, NormPlacement};
use frkan::spline::GridSpec;
use serde_json::Value;

fn frkan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_frkan"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn train_writes_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = frkan(&[
        "train",
        "--epochs",
        "2",
        "--n",
        "200",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "config.json",
        "summary.json",
        "metrics.csv",
        "checkpoint.json",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let header = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(header.starts_with("step,loss,metric,penalty,nan_flag\n"));
    let s = json(&out.join("summary.json"));
    assert_eq!(s["command"], "train");
    assert!(s["test_rmse"].as_f64().unwrap().is_finite());
}

#[test]
fn approx_records_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a");
    let o = frkan(&[
        "approx",
        "--equation",
        "I.6.2",
        "--epochs",
        "1",
        "--n",
        "100",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json(&out.join("manifest.json"))["id"], "I.6.2");
    let rows = std::fs::read_to_string(out.join("dataset.csv"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(rows, 101);
}

#[test]
fn invalid_configuration_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let o = frkan(&["train", "--range", "2,1", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.grid"));
    let o = frkan(&[
        "train",
        "--set",
        "model.colour=3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let o = frkan(&[
        "approx",
        "--equation",
        "I.99.1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let o = frkan(&[
        "train",
        "--arch",
        "in:3 -> frkan:2 -> frkan:1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn config_file_accepts_dotted_keys_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"command": "paramcount", "model.arch": "in:8 -> frkan:16 -> frkan:1", "model": {"grid": {"G": 5}}}"#)
        .unwrap();
    let out = dir.path().join("p");
    let o = frkan(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--K",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let eff = json(&out.join("config.json"));
    assert_eq!(eff["model"]["grid"]["G"], 5);
    assert_eq!(eff["model"]["grid"]["K"], 1);
    let count = json(&out.join("paramcount.json"));
    // 8·16 + 2·(5+1) + 2·(5+1)  then  16·1 + 4·6 + 4·6 + 2·16 (layer norm)
    assert_eq!(count["total"], 128 + 24 + 16 + 48 + 32);
}

#[test]
fn knots_audits_the_sawtooth() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("k");
    let o = frkan(&[
        "knots",
        "--sawtooth",
        "--G",
        "5",
        "--K",
        "1",
        "--range",
        "-1,1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(&out.join("knots.json"));
    assert_eq!(report["pass"], true);
    assert!(report["interior_count"].as_u64().unwrap() > 4);
}

#[test]
fn knots_exits_with_three_outside_the_bound() {
    // a wide G = 2 network whose composed map exceeds the width-free bound
    let mut cfg = NetworkConfig::new(
        "in:1 -> kan:6 -> kan:1",
        LayerKind::Kan,
        GridSpec::new(2, 1, -1.0, 1.0),
    );
    cfg.silu = false;
    cfg.norm = NormPlacement::None;
    let net = init_network(&cfg, 570).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("net.json");
    save_checkpoint(&net, &ck).unwrap();
    let out = dir.path().join("k");
    let o = frkan(&[
        "knots",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert_eq!(json(&out.join("knots.json"))["upper_ok"], false);
}

#[test]
fn export_activation_spans_the_extended_grid() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("t");
    let o = frkan(&[
        "train",
        "--epochs",
        "1",
        "--n",
        "100",
        "--G",
        "4",
        "--K",
        "2",
        "--range",
        "-1,1",
        "--out",
        run.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ck = run.join("checkpoint.json");
    let out = dir.path().join("e");
    let o = frkan(&[
        "export-activation",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--samples",
        "11",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("activation.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x,spline,silu_path,combined"));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 11);
    assert_eq!(rows[0][0], -2.0);
    assert_eq!(rows[10][0], 2.0);
    for r in &rows {
        assert!((r[1] + r[2] - r[3]).abs() < 1e-12);
    }
    let o = frkan(&[
        "export-activation",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--layer",
        "9",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn stability_reports_every_range() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let o = frkan(&[
        "stability",
        "--ranges",
        "-1,1",
        "-3,3",
        "-10,10",
        "--depth",
        "2",
        "--steps",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(&out.join("stability.json"));
    assert_eq!(report["runs"].as_array().unwrap().len(), 3);
    assert!(out.join("metrics_range2.csv").exists());
}
