use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

use rigsfm::scene::io::{read_view_graph, IMAGE_POSES_FILE, POINTS_FILE, RIG_FILE, UNIT_POSES_FILE};
use rigsfm_cli::ablate::{CSV_FILE, JSON_FILE};
use rigsfm_cli::config::{resolve, ConfigError};
use rigsfm_cli::pipeline::{ERROR_FILE, REPORT_FILE};
use rigsfm_cli::{run_stages, PipelineConfig, Skippable, StageRecord};

fn rigsfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rigsfm"))
        .args(args)
        .args(["--log", "warn"])
        .output()
        .unwrap()
}

fn mini_graph() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/mini20.json")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn stage<'a>(records: &'a [StageRecord], name: &str) -> &'a StageRecord {
    records.iter().find(|r| r.name == name).unwrap_or_else(|| panic!("no stage {name}"))
}

/// Small synthetic scene written with `synth`, returned as its directory.
fn synth(dir: &Path) -> PathBuf {
    let out = dir.join("scene");
    let o = rigsfm(&["synth", "-o", s(&out), "--num_units=8", "--num_points", "300", "--pixel_noise_sigma=0.5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn solve_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = rigsfm(&["solve", s(&mini_graph()), "-o", s(&out), "--threads", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [REPORT_FILE, IMAGE_POSES_FILE, UNIT_POSES_FILE, RIG_FILE, POINTS_FILE] {
        assert!(out.join(f).is_file(), "{f}");
    }
    assert!(!out.join(ERROR_FILE).exists());
    let report = read_json(&out.join(REPORT_FILE));
    assert_eq!(report["status"], "ok");
    assert_eq!(report["partial"], false);
    assert_eq!(report["dropped_images"], 3);
    let names: Vec<&str> = report["stages"].as_array().unwrap().iter().map(|r| r["name"].as_str().unwrap()).collect();
    assert_eq!(names.first(), Some(&"largest_component"));
    assert_eq!(names.last(), Some(&"ba_full"));
}

#[test]
fn adjustment_objectives_chain() {
    let graph = read_view_graph(&mini_graph()).unwrap();
    let run = run_stages(&graph, &PipelineConfig::default()).unwrap();
    let ba1 = stage(&run.records, "ba_rotations_fixed");
    let filter = stage(&run.records, "filter");
    let ba2 = stage(&run.records, "ba_full");
    assert_eq!(ba1.objective_after, filter.objective_before);
    assert_eq!(filter.objective_after, ba2.objective_before);
    assert!(ba2.objective_after.unwrap() <= ba2.objective_before.unwrap());
    assert!(ba1.objective_after.unwrap() <= ba1.objective_before.unwrap());
}

#[test]
fn skipping_adjustment_leaves_it_out() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = rigsfm(&["solve", s(&mini_graph()), "-o", s(&out), "--stages.skip", "ba,joint_angle"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&out.join(REPORT_FILE));
    let names: Vec<&str> = report["stages"].as_array().unwrap().iter().map(|r| r["name"].as_str().unwrap()).collect();
    for skipped in ["ba_rotations_fixed", "filter", "ba_full", "joint_angle"] {
        assert!(!names.contains(&skipped), "{skipped} in {names:?}");
    }
    assert!(names.contains(&"triangulate_l1"));
    assert!(out.join(IMAGE_POSES_FILE).is_file());
    assert_eq!(report["config"]["stages"]["skip"], json!(["ba", "joint_angle"]));
}

#[test]
fn unreadable_input_exits_two_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = rigsfm(&["solve", s(&dir.path().join("missing.json")), "-o", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
    let record: Value = serde_json::from_str(String::from_utf8_lossy(&o.stderr).lines().last().unwrap()).unwrap();
    assert_eq!(record["kind"], "input_error");

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"images\": 3}").unwrap();
    let o = rigsfm(&["solve", s(&bad), "-o", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn unknown_configuration_key_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = rigsfm(&["solve", s(&mini_graph()), "-o", s(&out), "--rotation.no_such_key=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("rotation.no_such_key"));

    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, "{\"ba\": {\"huber\": 2}}").unwrap();
    let o = rigsfm(&["solve", s(&mini_graph()), "-o", s(&out), "-c", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn overrides_take_precedence_over_file() {
    let file = json!({"seed": 5, "ba": {"huber_px": 3.0}});
    let cfg: PipelineConfig = resolve(Some(file.clone()), &[]).unwrap();
    assert_eq!(cfg.seed, 5);
    assert_eq!(cfg.ba.huber_px, 3.0);
    let cfg: PipelineConfig =
        resolve(Some(file), &["--ba.huber_px=1.5".into(), "stages.skip=refine_angle, ba".into()]).unwrap();
    assert_eq!(cfg.ba.huber_px, 1.5);
    assert_eq!(cfg.seed, 5);
    assert!(cfg.skips(Skippable::Ba) && cfg.skips(Skippable::RefineAngle) && !cfg.skips(Skippable::JointAngle));
    assert_eq!(cfg.translation_options().seed, 5);

    let err = resolve::<PipelineConfig>(None, &["seed".into()]).unwrap_err();
    assert!(matches!(err, ConfigError::Malformed(_)), "{err}");
    let err = resolve::<PipelineConfig>(None, &["ba.huber_px.x=1".into()]).unwrap_err();
    assert!(matches!(err, ConfigError::UnknownKey(_)), "{err}");
    assert!(resolve::<PipelineConfig>(None, &["stages.skip=everything".into()]).is_err());
}

#[test]
fn synth_solve_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth(dir.path());
    let out = dir.path().join("out");
    let o = rigsfm(&["solve", s(&scene.join("graph.json")), "-o", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let errors = dir.path().join("errors.json");
    let o = rigsfm(&["evaluate", s(&out), s(&scene.join("truth")), "-o", s(&errors)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!o.stdout.is_empty());
    let e = read_json(&errors);
    assert_eq!(e["num_images"], 24);
    assert!(e["median_rotation_deg"].as_f64().unwrap() < 0.5);
    assert!(e["median_position"].as_f64().unwrap() < 0.05);
}

#[test]
fn ablation_table_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth(dir.path());
    let mut tables = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("ablation{k}"));
        let o = rigsfm(&["ablate", s(&scene.join("graph.json")), "--truth", s(&scene.join("truth")), "-o", s(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(out.join(JSON_FILE).is_file());
        tables.push(std::fs::read_to_string(out.join(CSV_FILE)).unwrap());
    }
    assert_eq!(tables[0], tables[1]);
    let lines: Vec<&str> = tables[0].lines().collect();
    assert_eq!(lines.len(), 7);
    assert!(lines[0].starts_with("variant,status,"));
    assert!(lines[1..].iter().all(|l| l.contains(",ok,")), "{}", tables[0]);
}
