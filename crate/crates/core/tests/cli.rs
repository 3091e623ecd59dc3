//! End-to-end runs of the `mvpose` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mvpose::skeleton::AnnotationRecord;
use tempfile::TempDir;

fn mvpose(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvpose"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, json: &str) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, json).unwrap();
    path
}

/// Small scene: `frames` frames seen by four views.
fn synth_scene(tmp: &TempDir, frames: usize, extra: &str) -> PathBuf {
    let scene = tmp.path().join("scene");
    let cfg = write_config(
        tmp.path(),
        &format!(r#"{{"synth":{{"sequence_length":{frames},"view_count":4{extra}}}}}"#),
    );
    let out = mvpose(&["synth", "--config", cfg.to_str().unwrap(), "--out", scene.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    scene
}

fn read_records(path: &Path) -> Vec<AnnotationRecord> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Last row of a metrics CSV: `mean,valid,mpjpe,pa_mpjpe`.
fn mean_row(path: &Path) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    text.lines().last().unwrap().split(',').map(str::to_string).collect()
}

#[test]
fn single_view_config_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), r#"{"synth":{"view_count":1}}"#);
    let scene = tmp.path().join("scene");
    let out = mvpose(&["synth", "--config", cfg.to_str().unwrap(), "--out", scene.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn missing_rig_names_the_file() {
    let tmp = TempDir::new().unwrap();
    let out = mvpose(&["annotate", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("rig.json"), "{}", stderr(&out));
}

#[test]
fn malformed_detections_report_the_line() {
    let tmp = TempDir::new().unwrap();
    let scene = synth_scene(&tmp, 3, "");
    let det = fs::read_dir(scene.join("detections")).unwrap().next().unwrap().unwrap().path();
    let text = fs::read_to_string(&det).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[1] = "{not json";
    fs::write(&det, lines.join("\n")).unwrap();
    let out = mvpose(&["annotate", scene.to_str().unwrap()]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains(":2:"), "{}", stderr(&out));
}

#[test]
fn mask_term_without_masks_is_an_input_error() {
    let tmp = TempDir::new().unwrap();
    let scene = synth_scene(&tmp, 2, "");
    fs::remove_dir_all(scene.join("masks")).unwrap();
    let cfg = write_config(tmp.path(), r#"{"fit":{"lambda_mask":1.0}}"#);
    let gt = scene.join("ground_truth.jsonl");
    let out = mvpose(&[
        "fit",
        scene.to_str().unwrap(),
        "--annotations",
        gt.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("masks"), "{}", stderr(&out));
}

#[test]
fn empty_annotations_give_empty_fit() {
    let tmp = TempDir::new().unwrap();
    let scene = synth_scene(&tmp, 2, "");
    let empty = tmp.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out_dir = tmp.path().join("out");
    let out = mvpose(&[
        "fit",
        scene.to_str().unwrap(),
        "--annotations",
        empty.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read_to_string(out_dir.join("fit.jsonl")).unwrap().trim(), "");
}

#[test]
fn noiseless_annotation_matches_ground_truth() {
    let tmp = TempDir::new().unwrap();
    let scene = synth_scene(&tmp, 4, r#","noise_sigma_px":0,"outlier_rate":0"#);
    let cfg = write_config(tmp.path(), r#"{"confidence":{"median_window":1}}"#);
    let out = mvpose(&["annotate", scene.to_str().unwrap(), "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ann = read_records(&scene.join("out/annotations.jsonl"));
    let gt = read_records(&scene.join("ground_truth.jsonl"));
    assert_eq!(ann.len(), gt.len());
    for (a, g) in ann.iter().zip(&gt) {
        assert_eq!(a.frame, g.frame);
        for (ja, jg) in a.joints.iter().zip(&g.joints) {
            assert!(ja.valid, "frame {} joint {} invalid", a.frame, ja.name);
            let (pa, pg) = (ja.xyz_mm.unwrap(), jg.xyz_mm.unwrap());
            for k in 0..3 {
                // both files carry nine significant digits
                let quantum = 1e-8 * pg[k].abs().max(pa[k].abs());
                assert!((pa[k] - pg[k]).abs() <= 1e-6 + quantum, "{} {:?} vs {:?}", ja.name, pa, pg);
            }
        }
    }
}

#[test]
fn eval_of_identical_sets_is_zero() {
    let tmp = TempDir::new().unwrap();
    let scene = synth_scene(&tmp, 3, "");
    let gt = scene.join("ground_truth.jsonl");
    let out_dir = tmp.path().join("eval");
    let out = mvpose(&[
        "eval",
        gt.to_str().unwrap(),
        gt.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let row = mean_row(&out_dir.join("metrics_all.csv"));
    assert_eq!(row[0], "mean");
    assert!(row[2].parse::<f64>().unwrap().abs() < 1e-9);
    assert!(row[3].parse::<f64>().unwrap().abs() < 1e-6);
}

#[test]
fn fitting_ground_truth_recovers_it() {
    let tmp = TempDir::new().unwrap();
    let scene = synth_scene(&tmp, 6, "");
    let cfg = write_config(tmp.path(), r#"{"fit":{"lambda_mask":0}}"#);
    let gt = scene.join("ground_truth.jsonl");
    let out_dir = tmp.path().join("fit");
    let out = mvpose(&[
        "fit",
        scene.to_str().unwrap(),
        "--annotations",
        gt.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let fits: Vec<serde_json::Value> = fs::read_to_string(out_dir.join("fit.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let converged = fits.iter().filter(|f| f["converged"] == true).count();
    assert!(converged * 100 >= fits.len() * 95, "{converged}/{} converged", fits.len());

    let joints = out_dir.join("fit_joints.jsonl");
    let out = mvpose(&["eval", joints.to_str().unwrap(), gt.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mpjpe: f64 = mean_row(&out_dir.join("metrics_all.csv"))[2].parse().unwrap();
    assert!(mpjpe < 1.0, "MPJPE {mpjpe} mm");
}

#[test]
fn default_synth_scene_validates() {
    let tmp = TempDir::new().unwrap();
    let scene = tmp.path().join("scene");
    let out = mvpose(&["synth", "--out", scene.to_str().unwrap(), "--seed", "3"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = mvpose(&["validate", scene.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}

#[test]
fn validate_reports_a_broken_scene() {
    let tmp = TempDir::new().unwrap();
    let scene = synth_scene(&tmp, 2, "");
    fs::write(scene.join("model.json"), "{\"offsets\": 7}").unwrap();
    let out = mvpose(&["validate", scene.to_str().unwrap()]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("model.json"), "{}", stderr(&out));
}
