use std::path::Path;
use std::process::Command;

use gls_core::priors::{load_dataset, LoadOptions};

const CHAMFER_VOXELS: f64 = 2.0;
const NC_MIN: f64 = 0.9;
const MIOU_MIN: f64 = 0.85;
const MBIOU_MIN: f64 = 0.6;

fn ok(args: &[&str]) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_gls")).args(args).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Bundled scene through every subcommand, scored against its ground truth.
#[test]
fn bundled_scene_meets_the_quality_targets() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let run = root.join("run");
    let mesh = root.join("mesh.ply");
    let masks = root.join("masks");
    let report = root.join("mesh.json");
    ok(&["gen-synthetic", "--out", s(&data)]);
    ok(&["train", "--data", s(&data), "--out", s(&run), "--desk", "--iterations", "2000"]);
    let scene = run.join("scene.glsc");
    ok(&["mesh", "--scene", s(&scene), "--data", s(&data), "--out", s(&mesh), "--semantic"]);
    assert!(root.join("mesh.palette.json").exists());
    ok(&["query", "--scene", s(&scene), "--data", s(&data), "--out", s(&masks)]);
    ok(&["eval", "--pred", s(&mesh), "--gt", s(&data.join("gt").join("mesh.ply")), "--out", s(&report)]);
    let seg: serde_json::Value = serde_json::from_slice(&ok(&["eval-seg", "--pred", s(&masks), "--gt", s(&data.join("gt").join("masks"))])).unwrap();

    let ds = load_dataset(&data, &LoadOptions::default()).unwrap();
    let (lo, hi) = ds.init_bounds().unwrap();
    let voxel = (hi - lo).norm() / 256.0;
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let chamfer = m[0]["chamfer_l1"].as_f64().unwrap();
    let nc = m[0]["normal_consistency"].as_f64().unwrap();
    let (miou, mbiou) = (seg["miou"].as_f64().unwrap(), seg["mbiou"].as_f64().unwrap());
    println!("chamfer {chamfer:.4} (limit {:.4}), nc {nc:.3}, miou {miou:.3}, mbiou {mbiou:.3}", CHAMFER_VOXELS * voxel);
    assert_eq!(seg["missing_predictions"], 0);
    assert!(chamfer < CHAMFER_VOXELS * voxel);
    assert!(nc > NC_MIN);
    assert!(miou > MIOU_MIN);
    assert!(mbiou > MBIOU_MIN);
}
