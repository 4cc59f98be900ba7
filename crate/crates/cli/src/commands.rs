use std::path::Path;

use gaussfuse::eval::{
    align_points, ate_rmse, evaluate_run, segment_map, segmentation_metrics, Evaluation, GroundTruth,
    MetricsReport,
};
use gaussfuse::io::tum::match_timestamps;
use gaussfuse::io::{export_map, export_ply, import_map, load_surface, read_tum, save_surface, write_tum, ClassEmbeddings};
use gaussfuse::pipeline::{processed_frames, run as run_pipeline, FrameOutcome, RunOutput};
use gaussfuse::source::{write_bundle, BundleSource, NoiseModel, ObservationSource, SurfaceSamples, SyntheticSource, SyntheticSpec};
use gaussfuse::types::{CameraIntrinsics, RigidPose, Trajectory};
use gaussfuse::{Error, Result};
use serde_json::json;

use crate::{load_config, EvalArgs, RunArgs, SegmentArgs, SynthArgs};

/// Frames inferred per request when writing bundles, anchor included.
const SYNTH_CHUNK: usize = 16;

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

fn load_camera(path: &Path) -> Result<CameraIntrinsics> {
    let k: CameraIntrinsics = read_json(path)?;
    k.validate()?;
    Ok(k)
}

/// Ground truth that goes with a run's output.
struct Reference {
    trajectory: Trajectory,
    surface: SurfaceSamples,
    embeddings: Option<ClassEmbeddings>,
}

fn synthetic_reference(source: &SyntheticSource, spec: &SyntheticSpec, estimated: &Trajectory) -> Result<Reference> {
    let mut trajectory = Trajectory::new();
    for e in estimated.entries() {
        let pose = source
            .gt_pose(e.frame_id)
            .ok_or_else(|| Error::Source(format!("frame {} has no ground-truth pose", e.frame_id)))?;
        trajectory.push(e.frame_id, *pose, e.timestamp)?;
    }
    let (surface, _) = source.ground_truth(&estimated.frame_ids(), spec.gt_spacing);
    let scene = source.scene();
    Ok(Reference {
        trajectory,
        surface,
        embeddings: Some(ClassEmbeddings {
            classes: scene.class_names.clone(),
            embeddings: scene.class_features.clone(),
        }),
    })
}

/// `gt.tum` and `gt.ply` next to the bundles, as written by `synth`.
fn bundle_reference(dir: &Path) -> Result<Option<(Trajectory, SurfaceSamples, Option<ClassEmbeddings>)>> {
    let (tum, ply, emb) = (dir.join("gt.tum"), dir.join("gt.ply"), dir.join("embeddings.json"));
    if !(tum.is_file() && ply.is_file()) {
        return Ok(None);
    }
    let embeddings = if emb.is_file() { Some(ClassEmbeddings::load(&emb)?) } else { None };
    Ok(Some((read_tum(&tum)?, load_surface(&ply)?, embeddings)))
}

fn summary(out: &RunOutput, report: Option<&MetricsReport>) -> serde_json::Value {
    let integrated = out
        .frames
        .iter()
        .filter(|f| matches!(f.outcome, FrameOutcome::Integrated { .. }))
        .count();
    json!({
        "gaussians": out.map.len(),
        "frames": out.frames.len(),
        "integrated": integrated,
        "skipped": out.skipped(),
        "metrics": report,
    })
}

pub fn run(args: RunArgs) -> Result<()> {
    let config = load_config(args.config.as_deref(), args.seed)?;
    create_dir(&args.output)?;
    let started = std::time::Instant::now();

    let (out, intrinsics, reference) = if let Some(scene) = &args.synthetic {
        let spec = SyntheticSpec::load(scene)?;
        let mut source = SyntheticSource::from_spec(&spec, config.seed)?;
        let out = run_pipeline(&mut source, &config)?;
        let reference = synthetic_reference(&source, &spec, &out.trajectory)?;
        (out, source.intrinsics(), Some(reference))
    } else {
        let dir = args.source.as_deref().expect("clap requires an input");
        let mut source = BundleSource::open(dir)?;
        let out = run_pipeline(&mut source, &config)?;
        let reference = bundle_reference(dir)?.map(|(trajectory, surface, embeddings)| Reference {
            trajectory,
            surface,
            embeddings,
        });
        (out, source.intrinsics(), reference)
    };
    log::info!("mapped {} frames in {:.1}s", out.frames.len(), started.elapsed().as_secs_f64());

    let evaluation = match &reference {
        Some(r) => {
            // bundle ground truth is keyed by position in the file, not frame id
            let estimated = if args.synthetic.is_some() {
                out.trajectory.clone()
            } else {
                match_timestamps(&out.trajectory, &r.trajectory)?
            };
            Some(evaluate_run(
                &out.map,
                &estimated,
                GroundTruth {
                    trajectory: &r.trajectory,
                    surface: &r.surface,
                },
                Some(&intrinsics),
                &config,
                r.embeddings.as_ref().map(|e| e.embeddings.as_slice()),
            )?)
        }
        None => None,
    };
    let labels = evaluation
        .as_ref()
        .and_then(|e| e.segmentation.as_ref())
        .map(|(s, _)| s.labels.as_slice());

    export_map(&out.map, &args.output.join("map.bin"))?;
    export_ply(&out.map, &args.output.join("map.ply"), labels)?;
    write_tum(&out.trajectory, &args.output.join("traj.tum"))?;
    write_text(&args.output.join("camera.json"), &serde_json::to_string_pretty(&intrinsics)?)?;
    let report = evaluation.as_ref().map(|e| &e.report);
    write_text(
        &args.output.join("metrics.json"),
        &serde_json::to_string_pretty(&summary(&out, report))?,
    )?;
    if let Some(r) = report {
        print!("{}", r.to_text());
    }
    println!(
        "{} Gaussians, {} poses, {} skipped -> {}",
        out.map.len(),
        out.trajectory.len(),
        out.skipped().len(),
        args.output.display()
    );
    Ok(())
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let mut spec = SyntheticSpec::load(&args.scene)?;
    if let Some(path) = &args.noise {
        let noise: NoiseModel = read_json(path)?;
        noise.validate()?;
        spec.noise = noise;
    }
    let mut source = SyntheticSource::from_spec(&spec, args.seed)?;
    let frames = processed_frames(source.len(), args.stride as usize);
    let anchor = *frames.first().ok_or_else(|| Error::Source("scene has no frames".into()))?;
    create_dir(&args.output)?;

    let mut position = 0usize;
    for chunk in frames[1..].chunks(SYNTH_CHUNK - 1) {
        let mut request = vec![anchor];
        request.extend_from_slice(chunk);
        let preds = source.infer(&request, &[(anchor, RigidPose::identity())])?;
        // the anchor is written once, from the first request
        let skip = usize::from(position > 0);
        for pred in &preds[skip..] {
            let dir = args.output.join(format!("frame_{position:06}"));
            write_bundle(&dir, pred, Some(source.timestamp(pred.frame_id)))?;
            position += 1;
        }
    }
    if frames.len() == 1 {
        let preds = source.infer(&[anchor], &[(anchor, RigidPose::identity())])?;
        write_bundle(&args.output.join("frame_000000"), &preds[0], Some(source.timestamp(anchor)))?;
        position = 1;
    }

    let mut gt = Trajectory::new();
    for &f in &frames {
        gt.push(f, *source.gt_pose(f).expect("frame in range"), source.timestamp(f))?;
    }
    write_tum(&gt, &args.output.join("gt.tum"))?;
    let (surface, _) = source.ground_truth(&frames, spec.gt_spacing);
    save_surface(&surface, &args.output.join("gt.ply"))?;
    let scene = source.scene();
    ClassEmbeddings {
        classes: scene.class_names.clone(),
        embeddings: scene.class_features.clone(),
    }
    .save(&args.output.join("embeddings.json"))?;
    write_text(
        &args.output.join("camera.json"),
        &serde_json::to_string_pretty(&source.intrinsics())?,
    )?;
    println!(
        "{position} bundles, {} ground-truth points -> {}",
        surface.len(),
        args.output.display()
    );
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let config = load_config(args.config.as_deref(), None)?;
    let gt = read_tum(&args.gt_traj)?;
    let estimated = match_timestamps(&read_tum(&args.traj)?, &gt)?;
    let map = import_map(&args.map)?;
    let surface = load_surface(&args.gt_cloud)?;
    let camera = args.camera.as_deref().map(load_camera).transpose()?;
    let embeddings = args.embeddings.as_deref().map(ClassEmbeddings::load).transpose()?;
    let Evaluation { report, .. } = evaluate_run(
        &map,
        &estimated,
        GroundTruth {
            trajectory: &gt,
            surface: &surface,
        },
        camera.as_ref(),
        &config,
        embeddings.as_ref().map(|e| e.embeddings.as_slice()),
    )?;
    print!("{}", report.to_text());
    if let Some(path) = &args.output {
        write_text(path, &report.to_json())?;
    }
    Ok(())
}

pub fn segment(args: SegmentArgs) -> Result<()> {
    let map = import_map(&args.map)?;
    let embeddings = ClassEmbeddings::load(&args.embeddings)?;
    let seg = segment_map(&map, &embeddings.embeddings)?;
    create_dir(&args.output)?;
    export_ply(&map, &args.output.join("segmented.ply"), Some(&seg.labels))?;

    let metrics = match &args.gt_cloud {
        Some(path) => {
            let surface = load_surface(path)?;
            let mut centers = map.means();
            if let (Some(traj), Some(gt_traj)) = (&args.traj, &args.gt_traj) {
                let gt = read_tum(gt_traj)?;
                let estimated = match_timestamps(&read_tum(traj)?, &gt)?;
                let ate = ate_rmse(&estimated, &gt)?;
                align_points(&ate.alignment, &mut centers, &mut []);
            }
            Some(segmentation_metrics(&centers, &seg.labels, &surface.points, &surface.labels)?)
        }
        None => None,
    };
    let counts: Vec<usize> = (0..embeddings.classes.len())
        .map(|c| seg.labels.iter().filter(|&&l| l == c).count())
        .collect();
    let low_confidence = seg.low_confidence.iter().filter(|&&b| b).count();
    for (name, n) in embeddings.classes.iter().zip(&counts) {
        println!("{name:<16}{n:>8}");
    }
    if let Some(m) = &metrics {
        println!("mIoU {:.1}%, f-mIoU {:.1}%, Acc {:.1}%", m.miou, m.f_miou, m.acc);
    }
    let out = json!({
        "classes": embeddings.classes,
        "counts": counts,
        "low_confidence": low_confidence,
        "metrics": metrics,
    });
    write_text(&args.output.join("segmentation.json"), &serde_json::to_string_pretty(&out)?)
}
