use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_kslab")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("kslab-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_config(dir: &Path, file: &str, text: &str, extra: &[&str], out: &str) -> Output {
    let cfg = dir.join(file);
    std::fs::write(&cfg, text).unwrap();
    Command::new(bin())
        .arg("--config")
        .arg(&cfg)
        .arg("--out-dir")
        .arg(dir.join(out))
        .args(extra)
        .output()
        .unwrap()
}

fn read_json(path: PathBuf) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_zero_data_gives_zero_columns() {
    let dir = scratch("zero");
    let cfg = "kind = \"simulate\"\npaths = 3\nn_modes = 4\n[simulate]\nhorizon = 0.01\n[initial]\nkind = \"zero\"\n";
    let out = run_config(&dir, "zero.toml", cfg, &[], "out");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.join("out/series.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.len(), 2 + 8);
    let mut rows = 0;
    for line in lines {
        let vals: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        assert!(vals[1..].iter().all(|v| *v == 0.0), "{line}");
        rows += 1;
    }
    assert_eq!(rows, 101);
}

#[test]
fn certificate_report_has_required_fields() {
    let dir = scratch("cert");
    let out = run_config(&dir, "cert.toml", "kind = \"certificate\"\n", &["--paths", "6"], "out");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(dir.join("out/report.json"));
    let result = &report["result"];
    for key in ["delta", "epsilon", "R", "exceedance_count", "markov_bound"] {
        assert!(!result[key].is_null(), "missing {key}");
    }
    assert_eq!(report["config"]["paths"], 6);
    assert!(report["c_hat"]["c_hat"].as_f64().unwrap() > 0.0);
    assert_eq!(report["config"]["source"]["horizon"], 0.9);
}

#[test]
fn rerun_is_byte_identical() {
    let dir = scratch("rerun");
    let cfg = "kind = \"simulate\"\nseed = 7\npaths = 5\nn_modes = 6\n[simulate]\nhorizon = 0.02\n";
    let a = run_config(&dir, "r.toml", cfg, &["--workers", "2"], "a");
    let b = run_config(&dir, "r.toml", cfg, &[], "b");
    assert!(a.status.success() && b.status.success());
    for f in ["series.csv", "report.json"] {
        let x = std::fs::read(dir.join("a").join(f)).unwrap();
        let y = std::fs::read(dir.join("b").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
}

#[test]
fn seed_flag_changes_output() {
    let dir = scratch("seed");
    let cfg = "kind = \"simulate\"\npaths = 2\nn_modes = 3\n[simulate]\nhorizon = 0.01\n";
    run_config(&dir, "s.toml", cfg, &["--seed", "1"], "a");
    run_config(&dir, "s.toml", cfg, &["--seed", "2"], "b");
    let x = std::fs::read(dir.join("a/series.csv")).unwrap();
    let y = std::fs::read(dir.join("b/series.csv")).unwrap();
    assert_ne!(x, y);
}

#[test]
fn invalid_config_exits_2_naming_field() {
    let dir = scratch("bad");
    let out = run_config(
        &dir,
        "bad.toml",
        "kind = \"source-term\"\n[source]\nq = 1.5\n",
        &[],
        "out",
    );
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["field"], "source.q");
    assert!(!dir.join("out").exists());

    let out = run_config(&dir, "neg.json", r#"{"kind": "simulate", "dt": -1.0}"#, &[], "out");
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["field"], "dt");

    let out = run_config(&dir, "typo.toml", "kind = \"simulate\"\npathz = 3\n", &[], "out");
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pathz"));
}

#[test]
fn probe_band_runs() {
    let dir = scratch("band");
    let cfg = "kind = \"probe\"\n[probe]\nprobe = \"band\"\ntaus = [0.2, 0.1]\n";
    let out = run_config(&dir, "band.toml", cfg, &[], "out");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(dir.join("out/report.json"));
    let rows = report["result"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    let c0 = rows[0]["constant"].as_f64().unwrap();
    let c1 = rows[1]["constant"].as_f64().unwrap();
    assert!(c1 > c0);
}
