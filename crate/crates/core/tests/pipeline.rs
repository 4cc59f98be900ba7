mod common;

use gaussfuse::eval::ate_rmse;
use gaussfuse::pipeline::{run, FrameOutcome};
use gaussfuse::source::NoiseModel;
use gaussfuse::types::Config;

use common::{gt_for, room_source, BlankFrame};

#[test]
fn noise_free_orbit_tracks_within_five_millimeters() {
    let mut source = room_source(NoiseModel::zero(), 300, 0);
    let out = run(&mut source, &Config::default()).unwrap();
    assert_eq!(out.trajectory.len(), 30);
    assert!(out.skipped().is_empty());
    let ate = ate_rmse(&out.trajectory, &gt_for(&source, &out.trajectory)).unwrap();
    assert!(ate.rmse < 0.005, "ATE {:.4} m", ate.rmse);
    assert!(out.map.validate().is_empty());
}

#[test]
fn buffer_plus_one_frames_integrate_once() {
    let config = Config::default();
    let frames = config.buffer_size * config.frame_stride + 1;
    let mut source = room_source(NoiseModel::moderate(), frames, 3);
    let out = run(&mut source, &config).unwrap();
    let integrated = out
        .frames
        .iter()
        .filter(|f| matches!(f.outcome, FrameOutcome::Integrated { .. }))
        .count();
    assert_eq!(integrated, 1);
    assert_eq!(out.trajectory.len(), config.buffer_size + 1);
    assert!(out.map.validate().is_empty());
    assert!(out.trajectory.entries().iter().all(|e| e.pose.is_valid()));
}

#[test]
fn injected_localization_failure_drops_one_pose() {
    let config = Config::default();
    let failing = 150;
    let mut source = BlankFrame {
        inner: room_source(NoiseModel::moderate(), 300, 0),
        frame: failing,
    };
    let out = run(&mut source, &config).unwrap();
    assert_eq!(out.skipped(), vec![failing]);
    assert_eq!(out.trajectory.len(), 29);
    assert!(out.trajectory.get(failing).is_none());
    assert!(out.map.validate().is_empty());
    let ate = ate_rmse(&out.trajectory, &gt_for(&source.inner, &out.trajectory)).unwrap();
    assert!(ate.rmse < 0.1, "ATE {:.4} m", ate.rmse);
}

#[test]
fn map_grows_monotonically_and_refine_conserves() {
    let mut source = room_source(NoiseModel::moderate(), 200, 5);
    let out = run(&mut source, &Config::default()).unwrap();
    for w in out.frames.windows(2) {
        assert!(w[1].map_size >= w[0].map_size);
    }
    let mut seen = 0;
    for (_, r) in out.refine_reports() {
        assert_eq!(r.built, r.merged + r.appended);
        seen += 1;
    }
    assert_eq!(seen, 10);
}
