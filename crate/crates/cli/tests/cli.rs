use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bhm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bhm")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("config.json");
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

const SMALL: &str = r#"{
  "name": "small",
  "gain": {"kind": "spiked", "epsilon": 0.05, "mollify": 0.01},
  "grid": {"kind": "radial", "nodes": 384},
  "paths": {"n_paths": 200, "traces": 2, "probes": [[0.1, 0.0], [0.01, 0.0]]}
}"#;

fn run_in(dir: &Path, cmd: &[&str], config: &str) -> Output {
    let cfg = write_config(dir, config);
    let out = dir.join("out");
    let mut args = cmd.to_vec();
    args.extend(["--config", &cfg, "--out", out.to_str().unwrap()]);
    bhm(&args)
}

#[test]
fn envelope_writes_levels_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["envelope"], SMALL);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("out");
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["converged"], true);
    let levels = summary["levels"].as_array().unwrap();
    assert!(levels.len() >= 2);
    for l in levels {
        for key in ["level", "sup_change", "noncontact_cells", "components"] {
            assert!(l.get(key).is_some(), "missing {key}");
        }
    }
    for name in ["w1.csv", "u_2.csv", "contact_1.csv", "limit.csv"] {
        let text = fs::read_to_string(out.join(name)).unwrap();
        assert!(text.starts_with("# units"), "{name}");
        assert!(text.lines().nth(1).unwrap().starts_with("r,"), "{name}");
    }
}

#[test]
fn invalid_spike_radius_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["envelope"], &SMALL.replace("0.05", "0.7"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("spike radius"));
}

#[test]
fn malformed_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["envelope"], "{ not json");
    assert_eq!(o.status.code(), Some(2));
    let o = bhm(&["envelope"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_iterations_emit_only_w1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SMALL.replace("\"grid\"", "\"envelope\": {\"max_iter\": 0}, \"grid\"");
    let o = run_in(dir.path(), &["envelope"], &cfg);
    assert!(o.status.success());
    let out = dir.path().join("out");
    assert!(out.join("w1.csv").exists());
    assert!(!out.join("u_2.csv").exists());
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["converged"], false);
    assert_eq!(summary["levels"].as_array().unwrap().len(), 1);
}

#[test]
fn reproduce_passes_on_the_spike() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["reproduce", "spiked-ball"], SMALL);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("out");
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("verdict.json")).unwrap()).unwrap();
    assert_eq!(v["verdict"], "PASS");
    let cs = fs::read_to_string(out.join("cross_section.csv")).unwrap();
    assert_eq!(cs.lines().nth(1), Some("r,g,w1,V"));
}

#[test]
fn reproduce_without_oracle_is_incomplete() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SMALL.replace("\"grid\"", "\"oracle\": {\"radial\": false}, \"grid\"");
    let o = run_in(dir.path(), &["reproduce", "spiked-ball"], &cfg);
    assert_eq!(o.status.code(), Some(3));
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/verdict.json")).unwrap()).unwrap();
    assert_eq!(v["verdict"], "INCOMPLETE");
}

#[test]
fn reproduce_needs_a_radial_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SMALL.replace(r#"{"kind": "radial", "nodes": 384}"#, r#"{"kind": "cartesian", "n": 33}"#);
    let o = run_in(dir.path(), &["reproduce", "spiked-ball"], &cfg);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn oracle_without_toggles_is_incomplete() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SMALL.replace("\"grid\"", "\"oracle\": {\"radial\": false, \"psor\": false}, \"grid\"");
    let o = run_in(dir.path(), &["oracle"], &cfg);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn paths_with_zero_paths_write_an_empty_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SMALL.replace("\"n_paths\": 200", "\"n_paths\": 0");
    let o = run_in(dir.path(), &["paths"], &cfg);
    assert!(o.status.success());
    let r: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/paths_report.json")).unwrap()).unwrap();
    assert!(r["probes"].as_array().unwrap().is_empty());
}

#[test]
fn paths_write_two_traces_per_probe() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["paths"], SMALL);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("out");
    for k in 0..2 {
        let t = fs::read_to_string(out.join(format!("trace_0_{k}.csv"))).unwrap();
        assert_eq!(t.lines().nth(1), Some("t,x,y,patch_id"));
    }
    // the second probe sits on the spike plateau (contact), so it has no witness
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("paths_report.json")).unwrap()).unwrap();
    assert_eq!(r["probes"][0]["excessive"], true);
    assert!(r["probes"][1]["skipped"].is_string());
}

#[test]
fn identical_config_and_seed_give_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        assert!(run_in(d.path(), &["envelope"], SMALL).status.success());
        assert!(run_in(d.path(), &["paths", "--seed", "11"], SMALL).status.success());
    }
    let mut names: Vec<_> = fs::read_dir(a.path().join("out")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() > 5);
    for n in names {
        let x = fs::read(a.path().join("out").join(&n)).unwrap();
        let y = fs::read(b.path().join("out").join(&n)).unwrap();
        assert_eq!(x, y, "{n:?} differs");
    }
}

#[test]
fn selftest_passes() {
    let o = bhm(&["selftest"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS"));
}

#[test]
fn presets_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets");
    for name in ["spiked-ball.json", "cap-gain.json", "annulus-gain.json"] {
        let text = fs::read_to_string(root.join(name)).unwrap();
        bhm_core::config::RunConfig::from_json(&text).unwrap().prepare().unwrap();
    }
}
