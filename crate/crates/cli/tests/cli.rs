//! End-to-end checks of the `semshape` binary on small datasets.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::Vector3;

use semshape::io::{read_cloud, write_cloud, write_ply};
use semshape::shape::load_model;
use semshape::transform::{axis_angle, PoseRecord};
use semshape::{Pose, Space};
use semshape_cli::dataset::{build_manifest, Dataset, MANIFEST_FILE};
use semshape_cli::estimate::{
    keypoints_nocs_ply, keypoints_ply, recon_ply, scene_json, IndexEntry, ResultsIndex,
    SceneResult, INDEX_FILE,
};
use semshape_cli::evaluate::ReportFile;
use semshape_cli::json::{write_json, Provenance};
use semshape_cli::train::log_path;

const BOX_SPEC: &str = r#"{
  "category": {"family": "BOX", "instance_count": 20, "points_per_instance": 1024, "seed": 3},
  "held_out": 4,
  "scenes": 6
}"#;

fn semshape(args: &[&str], paths: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_semshape"));
    cmd.args(["--jobs", "2"]).args(args);
    for (flag, p) in paths {
        cmd.arg(flag).arg(p);
    }
    cmd.output().unwrap()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn gen_box(dir: &Path, name: &str) -> PathBuf {
    let spec = dir.join("box.json");
    fs::write(&spec, BOX_SPEC).unwrap();
    let out = dir.join(name);
    assert_ok(&semshape(&["gen"], &[("--config", &spec), ("--out", &out)]));
    out
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_writes_instances_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen_box(dir.path(), "a");
    let b = gen_box(dir.path(), "b");
    let files = tree(&a);
    let plys = files
        .iter()
        .filter(|(p, _)| p.starts_with("instances") && p.extension().unwrap() == "ply")
        .count();
    let feats = files
        .iter()
        .filter(|(p, _)| p.starts_with("instances") && p.extension().unwrap() == "feat")
        .count();
    assert_eq!((plys, feats), (20, 20));
    assert!(a.join("category.json").exists());
    assert_eq!(files, tree(&b));
}

#[test]
fn malformed_config_exits_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.json");
    fs::write(&spec, "{\"category\": {\"family\": \"BOX\",").unwrap();
    let out = dir.path().join("ds");
    let o = semshape(&["gen"], &[("--config", &spec), ("--out", &out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn train_is_reproducible_and_loss_decreases_across_stages() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_box(dir.path(), "ds");
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, r#"{"train": {"epochs": 100}}"#).unwrap();
    let (m1, m2) = (dir.path().join("m1.dlsm"), dir.path().join("m2.dlsm"));
    for m in [&m1, &m2] {
        assert_ok(&semshape(
            &["train"],
            &[("--dataset", &ds), ("--config", &cfg), ("--out", m)],
        ));
    }
    let model = load_model(&m1).unwrap();
    assert_eq!((model.num_points(), model.basis_dim()), (1024, 5));
    assert!(model.semantic_prototype().is_some());
    assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());
    assert_eq!(
        fs::read(log_path(&m1)).unwrap(),
        fs::read(log_path(&m2)).unwrap()
    );

    // loss at the last epoch of each curriculum stage
    let log = fs::read_to_string(log_path(&m1)).unwrap();
    let mut rows = log
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1].parse::<f64>().unwrap(), f[2].parse::<usize>().unwrap())
        });
    let mut stage_end = Vec::new();
    let mut prev = rows.next().unwrap();
    for row in rows {
        if row.1 != prev.1 {
            stage_end.push(prev.0);
        }
        prev = row;
    }
    stage_end.push(prev.0);
    assert_eq!(stage_end.len(), 6);
    assert!(stage_end.windows(2).all(|w| w[1] <= w[0]), "{stage_end:?}");
}

#[test]
fn sparse_scene_is_flagged_too_sparse() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_box(dir.path(), "ds");
    let scene = ds.join("scenes/box_scene_0000");
    let partial = read_cloud(scene.join("partial.ply"), Space::Camera).unwrap();
    write_cloud(scene.join("partial.ply"), &partial.select(&[0, 1])).unwrap();
    write_json(&ds.join(MANIFEST_FILE), &build_manifest(&ds).unwrap()).unwrap();

    let cfg = dir.path().join("run.json");
    fs::write(&cfg, r#"{"train": {"epochs": 100}}"#).unwrap();
    let model = dir.path().join("m.dlsm");
    assert_ok(&semshape(
        &["train"],
        &[("--dataset", &ds), ("--config", &cfg), ("--out", &model)],
    ));
    let res = dir.path().join("res");
    assert_ok(&semshape(
        &["estimate"],
        &[
            ("--dataset", &ds),
            ("--model", &model),
            ("--config", &cfg),
            ("--out", &res),
        ],
    ));
    let index: ResultsIndex =
        serde_json::from_str(&fs::read_to_string(res.join(INDEX_FILE)).unwrap()).unwrap();
    assert_eq!(index.scenes[0].error_tag.as_deref(), Some("too_sparse"));
    assert_eq!(index.scenes.len(), 6);
}

/// Writes a results directory whose predictions are the ground truth moved by
/// `perturb`, with exact reconstructions and keypoints.
fn planted_results(ds_path: &Path, out: &Path, perturb: impl Fn(&Pose) -> Pose) {
    let ds = Dataset::load(ds_path).unwrap();
    let prov = Provenance {
        config_hash: "test".into(),
        dataset_hash: ds.manifest_hash.clone(),
        model_hash: None,
    };
    for sub in ["scenes", "recon", "keypoints"] {
        fs::create_dir_all(out.join(sub)).unwrap();
    }
    let mut scenes = Vec::new();
    for id in &ds.record.scenes {
        let rec = ds.scene(id).unwrap();
        let gt = rec.gt_pose().unwrap();
        let inst = ds
            .instance_cloud(ds.instance_by_id(&rec.instance_id).unwrap())
            .unwrap();
        let nocs = inst.points();
        let cam: Vec<_> = nocs.iter().map(|p| gt.nocs_to_camera(p)).collect();
        write_ply(recon_ply(out, id), nocs, None).unwrap();
        write_ply(keypoints_ply(out, id), &cam, None).unwrap();
        write_ply(keypoints_nocs_ply(out, id), nocs, None).unwrap();
        let pred = PoseRecord::from(&perturb(&gt));
        let res = SceneResult {
            scene_id: id.clone(),
            category_id: ds.category_id().to_string(),
            rotation: Some(pred.rotation),
            translation: Some(pred.translation),
            size: Some(pred.size),
            inlier_ratio: Some(1.0),
            fit_cd: Some(0.0),
            error: None,
            stage_timings_ms: None,
            provenance: prov.clone(),
        };
        write_json(&scene_json(out, id), &res).unwrap();
        scenes.push(IndexEntry {
            scene_id: id.clone(),
            error_tag: None,
        });
    }
    let index = ResultsIndex {
        provenance: prov,
        category_id: ds.category_id().to_string(),
        succeeded: scenes.len(),
        failed: 0,
        scenes,
    };
    write_json(&out.join(INDEX_FILE), &index).unwrap();
}

fn eval_report(ds: &Path, res: &Path, out: &Path) -> ReportFile {
    assert_ok(&semshape(
        &["eval"],
        &[("--results", res), ("--dataset", ds), ("--out", out)],
    ));
    serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap()
}

#[test]
fn eval_scores_planted_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_box(dir.path(), "ds");

    let exact = dir.path().join("exact");
    planted_results(&ds, &exact, |g| *g);
    let m = eval_report(&ds, &exact, &dir.path().join("r1")).report.mean;
    assert_eq!(
        [
            m.map_5deg2cm,
            m.map_5deg5cm,
            m.map_10deg2cm,
            m.map_10deg5cm,
            m.iou50,
            m.iou75
        ],
        [100.0; 6]
    );
    // keypoint PLYs store single precision
    assert!(
        m.recon_cd.unwrap() < 1e-12 && m.nocs_rms.unwrap() < 1e-6,
        "{m:?}"
    );

    let tilted = dir.path().join("tilted");
    let tilt = axis_angle(&Vector3::x(), 6f64.to_radians());
    planted_results(&ds, &tilted, |g| {
        Pose::new(g.rotation * tilt, g.translation, g.size).unwrap()
    });
    let m = eval_report(&ds, &tilted, &dir.path().join("r2"))
        .report
        .mean;
    assert_eq!(
        [m.map_5deg2cm, m.map_5deg5cm, m.map_10deg2cm, m.map_10deg5cm],
        [0.0, 0.0, 100.0, 100.0]
    );
}

#[test]
fn eval_without_ground_truth_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_box(dir.path(), "ds");
    let res = dir.path().join("res");
    planted_results(&ds, &res, |g| *g);
    fs::remove_dir_all(ds.join("scenes/box_scene_0002")).unwrap();
    write_json(&ds.join(MANIFEST_FILE), &build_manifest(&ds).unwrap()).unwrap();
    // restamp the results against the edited dataset
    let mut index: ResultsIndex =
        serde_json::from_str(&fs::read_to_string(res.join(INDEX_FILE)).unwrap()).unwrap();
    index.provenance.dataset_hash = Dataset::load(&ds).unwrap().manifest_hash;
    write_json(&res.join(INDEX_FILE), &index).unwrap();
    let out = dir.path().join("report");
    let o = semshape(
        &["eval"],
        &[("--results", &res), ("--dataset", &ds), ("--out", &out)],
    );
    assert_eq!(
        o.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(!out.exists());
}
