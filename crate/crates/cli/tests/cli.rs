use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gaussfuse"))
}

fn repo(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

/// The room scene cut to its first 120 source frames.
fn short_room(dir: &Path) -> PathBuf {
    let text = std::fs::read_to_string(repo("data/room.json")).unwrap();
    let mut spec: serde_json::Value = serde_json::from_str(&text).unwrap();
    let traj = &mut spec["trajectory"];
    let full = traj["frames"].as_f64().unwrap();
    let sweep = traj["sweep_deg"].as_f64().unwrap();
    traj["sweep_deg"] = (sweep * 119.0 / (full - 1.0)).into();
    traj["frames"] = 120.into();
    let path = dir.join("scene.json");
    std::fs::write(&path, spec.to_string()).unwrap();
    path
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_synthetic(scene: &Path, out: &Path, seed: &str) -> Output {
    bin()
        .args(["run", "--synthetic"])
        .arg(scene)
        .arg("--config")
        .arg(repo("configs/default.json"))
        .arg("-o")
        .arg(out)
        .args(["--seed", seed])
        .output()
        .unwrap()
}

#[test]
fn run_writes_the_four_outputs_and_repeats_bit_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = short_room(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(run_synthetic(&scene, &a, "4"));
    ok(run_synthetic(&scene, &b, "4"));
    for name in ["map.bin", "map.ply", "traj.tum", "metrics.json"] {
        let (x, y) = (std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap());
        assert!(!x.is_empty(), "{name} is empty");
        assert_eq!(x, y, "{name} differs between seeded runs");
    }
    let traj = std::fs::read_to_string(a.join("traj.tum")).unwrap();
    assert_eq!(traj.lines().count(), 12);
    for line in traj.lines() {
        let vals: Vec<f64> = line.split(' ').map(|v| v.parse().unwrap()).collect();
        assert_eq!(vals.len(), 8);
        let q = (vals[4] * vals[4] + vals[5] * vals[5] + vals[6] * vals[6] + vals[7] * vals[7]).sqrt();
        assert!((q - 1.0).abs() < 1e-6);
    }
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["frames"], 12);
    assert!(metrics["metrics"]["f1_at_0_2"].as_f64().unwrap() > 50.0);
}

#[test]
fn different_seeds_give_different_trajectories() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = short_room(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(run_synthetic(&scene, &a, "1"));
    ok(run_synthetic(&scene, &b, "2"));
    assert_ne!(
        std::fs::read(a.join("traj.tum")).unwrap(),
        std::fs::read(b.join("traj.tum")).unwrap()
    );
}

#[test]
fn bundles_round_trip_through_run_eval_and_segment() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = short_room(tmp.path());
    let bundles = tmp.path().join("bundles");
    ok(bin()
        .args(["synth"])
        .arg(&scene)
        .args(["--stride", "10", "--seed", "3", "-o"])
        .arg(&bundles)
        .output()
        .unwrap());
    for name in ["frame_000000", "frame_000011", "gt.tum", "gt.ply", "embeddings.json", "camera.json"] {
        assert!(bundles.join(name).exists(), "synth did not write {name}");
    }
    assert!(!bundles.join("frame_000012").exists());

    let config = tmp.path().join("stride1.json");
    std::fs::write(&config, r#"{"frame_stride": 1}"#).unwrap();
    let out = tmp.path().join("out");
    ok(bin().arg("run").arg(&bundles).arg("--config").arg(&config).arg("-o").arg(&out).output().unwrap());
    let run_metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();

    let report = tmp.path().join("report.json");
    let eval = ok(bin()
        .arg("eval")
        .arg("--map")
        .arg(out.join("map.bin"))
        .arg("--traj")
        .arg(out.join("traj.tum"))
        .arg("--gt-traj")
        .arg(bundles.join("gt.tum"))
        .arg("--gt-cloud")
        .arg(bundles.join("gt.ply"))
        .arg("--camera")
        .arg(out.join("camera.json"))
        .arg("--embeddings")
        .arg(bundles.join("embeddings.json"))
        .arg("--config")
        .arg(&config)
        .arg("-o")
        .arg(&report)
        .output()
        .unwrap());
    assert!(String::from_utf8_lossy(&eval.stdout).contains("ATE RMSE"));
    let eval_metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    // evaluating the written files reproduces the in-run scores
    for key in ["ate_rmse", "f1_at_0_2", "normal_consistency", "acc"] {
        let (x, y) = (run_metrics["metrics"][key].as_f64().unwrap(), eval_metrics[key].as_f64().unwrap());
        assert!((x - y).abs() < 1e-6, "{key}: run {x}, eval {y}");
    }

    let seg = tmp.path().join("seg");
    ok(bin()
        .arg("segment")
        .arg("--map")
        .arg(out.join("map.bin"))
        .arg("--embeddings")
        .arg(bundles.join("embeddings.json"))
        .arg("-o")
        .arg(&seg)
        .arg("--gt-cloud")
        .arg(bundles.join("gt.ply"))
        .arg("--traj")
        .arg(out.join("traj.tum"))
        .arg("--gt-traj")
        .arg(bundles.join("gt.tum"))
        .output()
        .unwrap());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(seg.join("segmentation.json")).unwrap()).unwrap();
    let counted: u64 = summary["counts"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).sum();
    assert_eq!(counted, run_metrics["gaussians"].as_u64().unwrap());
    assert!((summary["metrics"]["acc"].as_f64().unwrap() - eval_metrics["acc"].as_f64().unwrap()).abs() < 1e-9);
    assert!(seg.join("segmented.ply").exists());
}

#[test]
fn eval_names_the_first_unmatched_pose() {
    let tmp = tempfile::tempdir().unwrap();
    let gt = tmp.path().join("gt.tum");
    let est = tmp.path().join("est.tum");
    let line = |t: f64| format!("{t:.6} 0 0 0 0 0 0 1\n");
    std::fs::write(&gt, [0.0, 1.0, 2.0, 3.0].map(line).concat()).unwrap();
    std::fs::write(&est, [0.0, 1.0, 2.5, 3.0].map(line).concat()).unwrap();
    let out = bin()
        .arg("eval")
        .arg("--map")
        .arg(tmp.path().join("unused.bin"))
        .arg("--traj")
        .arg(&est)
        .arg("--gt-traj")
        .arg(&gt)
        .arg("--gt-cloud")
        .arg(tmp.path().join("unused.ply"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("pose 2") && stderr.contains("2.500000"), "{stderr}");
}

#[test]
fn usage_errors_exit_with_one() {
    for args in [
        vec!["run", "--bogus"],
        vec!["run", "-o", "somewhere"],
        vec!["frobnicate"],
        vec!["synth", "scene.json", "--stride", "0", "-o", "x"],
    ] {
        let out = bin().args(&args).output().unwrap();
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"), "{args:?}");
    }
    assert_eq!(bin().arg("--help").output().unwrap().status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_synthetic(&tmp.path().join("missing.json"), &tmp.path().join("o"), "0");
    assert_eq!(out.status.code(), Some(2));
    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let out = bin().arg("run").arg(&empty).arg("-o").arg(tmp.path().join("o2")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("frame_"));
}
