//! Runs the mapper on a synthetic scene file and prints per-frame progress
//! and metrics.
//!
//! `cargo run --release --example synthetic_run -- data/room.json [seed]`

use std::path::PathBuf;
use std::time::Instant;

use gaussfuse::eval::{evaluate_run, GroundTruth};
use gaussfuse::pipeline::{run, FrameOutcome};
use gaussfuse::source::{ObservationSource, SyntheticSource, SyntheticSpec};
use gaussfuse::types::{Config, Trajectory};

fn main() -> gaussfuse::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let path = PathBuf::from(args.get(1).map(String::as_str).unwrap_or("data/room.json"));
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let spec = SyntheticSpec::load(&path)?;
    let mut source = SyntheticSource::from_spec(&spec, seed)?;
    let config = Config {
        seed,
        ..Config::default()
    };
    let t0 = Instant::now();
    let out = run(&mut source, &config)?;
    println!("run: {:.1}s, {} Gaussians, {} poses", t0.elapsed().as_secs_f64(), out.map.len(), out.trajectory.len());
    for f in &out.frames {
        if let FrameOutcome::Integrated { em_points, em_updated, unexplained, refine, coarse_residual } = &f.outcome {
            println!(
                "frame {:4}: em {em_points:6} pts -> {em_updated:4} G, unexplained {unexplained:6}, refine built {} merged {} appended {}, coarse rms {coarse_residual:.4}, map {}",
                f.frame_id, refine.built, refine.merged, refine.appended, f.map_size
            );
        } else {
            println!("frame {:4}: {:?}", f.frame_id, f.outcome);
        }
    }

    let mut gt = Trajectory::new();
    for e in out.trajectory.entries() {
        gt.push(e.frame_id, *source.gt_pose(e.frame_id).unwrap(), e.timestamp)?;
    }
    let (surface, _) = source.ground_truth(&out.trajectory.frame_ids(), spec.gt_spacing);
    let e = evaluate_run(
        &out.map,
        &out.trajectory,
        GroundTruth {
            trajectory: &gt,
            surface: &surface,
        },
        Some(&source.intrinsics()),
        &config,
        Some(&source.scene().class_features),
    )?;
    println!("{}", e.report.to_text());
    println!(
        "precision {:.1} recall {:.1}, total {:.1}s",
        e.reconstruction.precision,
        e.reconstruction.recall,
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}
