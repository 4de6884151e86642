use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use synmocap::calibration::{perturb_rig, sphere_trajectory, synthesize_observations, ObservationFile};
use synmocap::init::InitObservation;
use synmocap::pcm::{save_raster, RasterField, RasterHeader};
use synmocap::scene::{studio_rig, Scene, SceneConfig};
use tempfile::TempDir;

fn synmocap(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_synmocap"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Run config with a shortened bundled scene.
fn short_config(dir: &Path, frames: usize, edit: impl FnOnce(&mut SceneConfig)) -> PathBuf {
    let mut scene = SceneConfig::bundled();
    scene.frames = frames;
    edit(&mut scene);
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&json!({ "scene": scene })).unwrap()).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_of_the_bundled_scene_matches_the_pinned_checksums() {
    let dir = TempDir::new().unwrap();
    let out = synmocap(dir.path(), &["synth", "--out", "s"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let sums = std::fs::read_to_string(dir.path().join("s/SHA256SUMS")).unwrap();
    let pinned = include_str!("fixtures/bundled_synth.sha256");
    for line in pinned.lines() {
        assert!(sums.lines().any(|l| l == line), "missing or changed: {line}");
    }
    assert!(dir.path().join("s/resolved_config.json").exists());
}

#[test]
fn synth_is_deterministic_per_seed() {
    let dir = TempDir::new().unwrap();
    let cfg = short_config(dir.path(), 20, |_| {});
    let cfg = cfg.to_str().unwrap();
    for name in ["a", "b"] {
        assert_eq!(code(&synmocap(dir.path(), &["synth", "--config", cfg, "--seed", "7", "--out", name])), 0);
    }
    assert_eq!(code(&synmocap(dir.path(), &["synth", "--config", cfg, "--seed", "8", "--out", "c"])), 0);
    let digest = |d: &str| std::fs::read_to_string(dir.path().join(d).join("truth/person_0.csv")).unwrap();
    assert_eq!(digest("a"), digest("b"));
    assert_ne!(digest("a"), digest("c"));
    let seed = read_json(&dir.path().join("a/resolved_config.json"))["seed"].clone();
    assert_eq!(seed, json!(7));
}

#[test]
fn full_dropout_leaves_every_field_empty() {
    let dir = TempDir::new().unwrap();
    let cfg = short_config(dir.path(), 10, |s| s.pcm.dropout = 1.0);
    let out = synmocap(dir.path(), &["synth", "--config", cfg.to_str().unwrap(), "--out", "s"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let counts = std::fs::read_to_string(dir.path().join("s/pcm_blobs.tsv")).unwrap();
    let rows: Vec<&str> = counts.lines().skip(1).collect();
    assert_eq!(rows.len(), 10);
    for row in rows {
        assert!(row.split('\t').skip(1).all(|c| c == "0"), "{row}");
    }
}

#[test]
fn invalid_config_names_the_field() {
    let dir = TempDir::new().unwrap();
    let cfg = short_config(dir.path(), 10, |s| s.frame_rate = -1.0);
    let out = synmocap(dir.path(), &["synth", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("frame_rate"), "{}", stderr(&out));

    std::fs::write(dir.path().join("bad.json"), r#"{"tracker": {"lattice_spacing": 0.02, "bogus": 1}}"#).unwrap();
    let out = synmocap(dir.path(), &["synth", "--config", "bad.json"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("bogus"), "{}", stderr(&out));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&synmocap(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&synmocap(dir.path(), &["--help"])), 0);
}

#[test]
fn track_and_eval_round_trip() {
    let dir = TempDir::new().unwrap();
    let cfg = short_config(dir.path(), 40, |_| {});
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(&synmocap(dir.path(), &["synth", "--config", cfg, "--out", "s"])), 0);
    let out = synmocap(dir.path(), &["track", "--config", cfg, "--threads", "2", "--out", "t"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let summary = read_json(&dir.path().join("t/summary.json"));
    let persons = summary["persons"].as_array().unwrap();
    assert_eq!(persons.len(), 5);
    for p in persons {
        assert!(p["mpjpe_mm"].as_f64().unwrap() <= 20.0, "{p}");
        assert_eq!(p["lost_for_frame"], json!(0));
    }
    let diagnostics = std::fs::read_to_string(dir.path().join("t/diagnostics.jsonl")).unwrap();
    assert_eq!(diagnostics.lines().count(), 39);
    let first: Value = serde_json::from_str(diagnostics.lines().next().unwrap()).unwrap();
    assert!(first["persons"][0]["boxes"].is_array());
    assert!(first["persons"][0]["cameras"].is_array());

    let out = synmocap(dir.path(), &["eval", "--pred", "t/sequences", "--truth", "s/truth", "--out", "e"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = read_json(&dir.path().join("e/report.json"));
    assert_eq!(report["overall"]["success_rate"], json!(100.0));
    assert_eq!(report["overall"]["pcp_endpoint"], json!(100.0));
    let curve = std::fs::read_to_string(dir.path().join("e/per_frame_mpjpe.tsv")).unwrap();
    assert!(curve.starts_with("frame\tperson_0\tperson_1\tperson_2\tperson_3\tperson_4\n"));
    assert_eq!(curve.lines().count(), 41);
}

#[test]
fn track_persons_filter_and_reproducibility() {
    let dir = TempDir::new().unwrap();
    let cfg = short_config(dir.path(), 15, |_| {});
    let cfg = cfg.to_str().unwrap();
    for name in ["a", "b"] {
        let out = synmocap(dir.path(), &["track", "--config", cfg, "--persons", "1,3", "--out", name]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let mut files: Vec<String> = std::fs::read_dir(dir.path().join("a/sequences"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(files, ["person_1.csv", "person_3.csv"]);
    let sums = |d: &str| std::fs::read_to_string(dir.path().join(d).join("SHA256SUMS")).unwrap();
    let strip = |s: String| s.lines().filter(|l| !l.ends_with("resolved_config.json")).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(sums("a")), strip(sums("b")));
}

#[test]
fn track_with_a_corrupt_sidecar_is_a_format_error() {
    let dir = TempDir::new().unwrap();
    let pcm = dir.path().join("pcm");
    std::fs::create_dir(&pcm).unwrap();
    let header = RasterHeader {
        width: 4,
        height: 4,
        camera: 0,
        person: 0,
        keypoint: 0,
        frame: 0,
        data: "f0.f32".into(),
    };
    save_raster(&pcm.join("f0.json"), &header, &RasterField::new(4, 4, vec![0.5; 16]).unwrap()).unwrap();
    std::fs::write(pcm.join("f0.f32"), [0u8; 10]).unwrap();
    let out = synmocap(dir.path(), &["track", "--pcm", "pcm", "--out", "t"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("f0.f32"), "{}", stderr(&out));
    assert!(!dir.path().join("t").exists());
}

#[test]
fn eval_of_truth_against_itself_is_perfect_and_disjoint_ranges_fail() {
    let dir = TempDir::new().unwrap();
    let cfg = short_config(dir.path(), 12, |_| {});
    assert_eq!(code(&synmocap(dir.path(), &["synth", "--config", cfg.to_str().unwrap(), "--out", "s"])), 0);
    let out = synmocap(dir.path(), &["eval", "--pred", "s/truth", "--truth", "s/truth", "--out", "e"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let overall = read_json(&dir.path().join("e/report.json"))["overall"].clone();
    assert_eq!(overall["mpjpe_mm"], json!(0.0));
    assert_eq!(overall["pck"], json!(100.0));
    assert_eq!(overall["success_rate"], json!(100.0));
    assert_eq!(overall["pcp_midpoint"], json!(100.0));

    let out = synmocap(dir.path(), &["eval", "--pred", "s/truth", "--truth", "s/truth", "--first", "50", "--out", "e2"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("empty evaluation range"));
}

#[test]
fn init_writes_personalized_skeletons_and_reports_missing_keypoints() {
    let dir = TempDir::new().unwrap();
    let cfg = short_config(dir.path(), 2, |_| {});
    let cfg = cfg.to_str().unwrap();
    let out = synmocap(dir.path(), &["init", "--config", cfg, "--persons", "2", "--out", "i"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let record = read_json(&dir.path().join("i/init/person_2.json"));
    assert_eq!(record["angles"].as_array().unwrap().len(), 40);
    assert_eq!(record["keypoints"].as_array().unwrap().len(), 17);

    let scene = Scene::studio(SceneConfig::bundled()).unwrap();
    let mut obs = InitObservation::from_pcm(&scene.pcm(0).unwrap(), 0).unwrap();
    for view in &mut obs.views {
        view.keypoints[0].confidence = 0.0;
    }
    InitObservation::save(&[obs], &dir.path().join("obs.json")).unwrap();
    let out = synmocap(dir.path(), &["init", "--config", cfg, "--observations", "obs.json", "--out", "j"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("nose"), "{}", stderr(&out));
}

fn calibration_fixture(dir: &Path, noise_px: f64) {
    let rig = studio_rig();
    let points = sphere_trajectory(150, Vector3::new(0.0, 0.0, 1.2), Vector3::new(2.0, 2.0, 0.9));
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let observations = synthesize_observations(&rig, &points, noise_px, &mut rng);
    ObservationFile { observations }.save(&dir.join("obs.json")).unwrap();
    perturb_rig(&rig, 2f64.to_radians(), 0.05, 0.02, &mut rng)
        .unwrap()
        .save(&dir.join("initial_rig.json"))
        .unwrap();
    let anchors: Vec<Value> = [0usize, 40, 80, 120]
        .iter()
        .map(|&f| json!({"frame": f, "world": [points[f].x, points[f].y, points[f].z]}))
        .collect();
    std::fs::write(dir.join("anchors.json"), serde_json::to_string(&anchors).unwrap()).unwrap();
}

#[test]
fn calibrate_converges_on_the_sphere_fixture() {
    let dir = TempDir::new().unwrap();
    calibration_fixture(dir.path(), 0.5);
    let args = [
        "calibrate",
        "--observations",
        "obs.json",
        "--rig",
        "initial_rig.json",
        "--anchors",
        "anchors.json",
        "--out",
        "c",
    ];
    let out = synmocap(dir.path(), &args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = read_json(&dir.path().join("c/calibration_report.json"));
    assert!(report["final_rms_px"].as_f64().unwrap() <= 0.7, "{report}");
    assert!(report["anchor_residual_m"].as_f64().unwrap() < 0.01, "{report}");
    assert!(dir.path().join("c/rig.json").exists());
}

#[test]
fn calibrate_dry_run_and_missing_input() {
    let dir = TempDir::new().unwrap();
    calibration_fixture(dir.path(), 0.0);
    let out = synmocap(
        dir.path(),
        &["calibrate", "--observations", "obs.json", "--rig", "initial_rig.json", "--dry-run", "--out", "c"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(!dir.path().join("c").exists());

    let out = synmocap(dir.path(), &["calibrate", "--observations", "missing.json", "--out", "c"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("missing.json"));
    assert!(!dir.path().join("c").exists());
}
