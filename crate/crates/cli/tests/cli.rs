use std::path::Path;
use std::process::{Command, Output};

use vesselforge_core::mesh::{load_obj, remesh_uniform, save_obj};

fn vesselforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vesselforge")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// 32³ tube, tiny network, short training; `extra` is spliced into the top level.
fn small_config(stages: &str, extra: &str) -> String {
    format!(
        r#"{{
  "seed": 11,
  "stages": {stages},
  "preprocess": {{ "crop_dims": [32, 32, 32] }},
  "phantom": {{ "spec": {{
    "dims": [32, 32, 32],
    "centerlines": [{{ "points": [[9.0, 15.5, 15.5], [22.0, 15.5, 15.5]], "radii": [5.0, 5.0] }}],
    "noise_sd": 10.0, "blur_sigma": 1.0, "seed": 3 }} }},
  "train": {{ "volumes": 4, "dims": [32, 32, 32],
    "optimizer": {{ "epochs": 2, "crop": 16, "crops_per_volume": 4, "learning_rate": 0.01 }} }},
  "segment": {{ "samples": 2, "overlap": 8 }}{extra}
}}"#
    )
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run").to_string_lossy().into_owned();
    for (name, body) in [
        ("unknown.json", r#"{"seed": 1, "stages": ["phantom"], "colour": 3}"#),
        ("empty.json", r#"{"seed": 1, "stages": []}"#),
        ("noseed.json", r#"{"stages": ["phantom"]}"#),
        ("dup.json", r#"{"seed": 1, "stages": ["phantom"], "seed": 2}"#),
    ] {
        let cfg = write_config(dir.path(), name, body);
        let o = vesselforge(&["pipeline", "--config", &cfg, "--out", &out]);
        assert_eq!(o.status.code(), Some(2), "{name}: {}", stderr(&o));
        assert!(stderr(&o).contains("config error"), "{name}: {}", stderr(&o));
    }
    let cfg = write_config(dir.path(), "ok.json", r#"{"seed": 1, "stages": ["phantom"]}"#);
    let o = vesselforge(&["mesh", "--config", &cfg, "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
    let missing = dir.path().join("absent.json").to_string_lossy().into_owned();
    assert_eq!(vesselforge(&["pipeline", "--config", &missing]).status.code(), Some(2));
}

#[test]
fn deform_without_reconstruct_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), "c.json", r#"{"seed": 1, "stages": ["deform"]}"#);
    let o = vesselforge(&["pipeline", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("stage deform") && err.contains("mesh_init.obj"), "{err}");
    assert!(!out.join("manifest.json").exists());
}

#[test]
fn phantom_only_run_is_cached_and_reports_missing_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let cfg = write_config(dir.path(), "c.json", &small_config(r#"["phantom"]"#, ""));
    let o = vesselforge(&["pipeline", "--config", &cfg, "--out", out_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("phantom: done"));
    for f in ["image.nrrd", "label.nrrd", "caps.json", "phantom_spec.json", "surface_truth.obj", "summary.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let manifest = std::fs::read(out.join("manifest.json")).unwrap();
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert!(summary["loss_seg"].is_null());
    let notes = summary["notes"].as_array().unwrap();
    assert!(notes.iter().any(|n| n.as_str().unwrap().starts_with("loss_seg.csv absent")));

    let o = vesselforge(&["pipeline", "--config", &cfg, "--out", out_s]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("phantom: cached"), "{}", stderr(&o));
    assert_eq!(std::fs::read(out.join("manifest.json")).unwrap(), manifest);

    // A different seed changes nothing for an explicit spec but invalidates the cache key.
    let o = vesselforge(&["phantom", "--config", &cfg, "--out", out_s, "--seed", "12"]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("phantom: done"));
}

#[test]
fn segmentation_run_evaluates_and_stage_failures_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        &small_config(r#"["phantom", "train", "segment", "evaluate"]"#, r#", "evaluate": { "case": "small" }"#),
    );
    let o = vesselforge(&["pipeline", "--config", &cfg, "--out", out_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = metrics.lines().collect();
    assert_eq!(rows[0], "case,metric,region,value");
    assert_eq!(rows.len(), 2);
    assert!(rows[1].starts_with("small,dice,all,"));
    let loss = std::fs::read_to_string(out.join("loss_seg.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3);

    // Nothing in the probability map reaches this iso value.
    let bad = write_config(
        dir.path(),
        "bad.json",
        &small_config(r#"["reconstruct"]"#, r#", "reconstruct": { "iso": 0.999 }"#),
    );
    let o = vesselforge(&["reconstruct", "--config", &bad, "--out", out_s]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("stage reconstruct failed"), "{}", stderr(&o));
    assert!(!out.join("mesh_init.obj").exists());
    // Earlier artifacts and their records survive.
    let o = vesselforge(&["pipeline", "--config", &cfg, "--out", out_s]);
    assert!(o.status.success());
    let err = stderr(&o);
    for s in ["phantom", "train", "segment", "evaluate"] {
        assert!(err.contains(&format!("{s}: cached")), "{err}");
    }
}

#[test]
fn deform_stage_writes_one_loss_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let cfg = write_config(dir.path(), "p.json", &small_config(r#"["phantom"]"#, ""));
    assert!(vesselforge(&["pipeline", "--config", &cfg, "--out", out_s]).status.success());
    // A remeshed analytic surface stands in for a reconstruction.
    let truth = load_obj(out.join("surface_truth.obj")).unwrap();
    save_obj(&remesh_uniform(&truth, 500).unwrap(), out.join("mesh_init.obj")).unwrap();
    let d = write_config(
        dir.path(),
        "d.json",
        &small_config(
            r#"["deform", "evaluate"]"#,
            r#", "deform": { "control_points": 20, "optimizer": { "epochs": 5, "lr": 0.05 } }"#,
        ),
    );
    let o = vesselforge(&["pipeline", "--config", &d, "--out", out_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    let loss = std::fs::read_to_string(out.join("loss_deform.csv")).unwrap();
    assert_eq!(loss.lines().count(), 6);
    let dump: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("momenta.json")).unwrap()).unwrap();
    assert_eq!(dump["control_points"].as_array().unwrap().len(), 20);
    assert!(dump["inlet_outlet"].is_object());
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let names: Vec<&str> = metrics.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(names, ["asd_init", "hausdorff_init", "asd_deformed", "hausdorff_deformed"]);
    let quality: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("quality.json")).unwrap()).unwrap();
    assert_eq!(quality["mesh_init"]["watertight"], true);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["loss_deform"]["rows"], 5);
}

#[test]
fn bundled_config_parses_with_expected_defaults() {
    let cfg = vesselforge::parse_config(Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/tube64.json")).unwrap();
    assert_eq!(cfg.ordered_stages().len(), 6);
    assert_eq!(cfg.deform.flow.steps, 15);
    assert_eq!(cfg.deform.loss.w_normal, 0.2);
    assert_eq!(cfg.phantom.spec.as_ref().unwrap().dims, [64; 3]);
}
