use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Incremental Gaussian-mixture mapping from dense point-map predictions.
#[derive(Debug, Parser)]
#[command(name = "gaussfuse", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Map a sequence and write map.bin, map.ply, traj.tum and metrics.json.
    Run(RunArgs),
    /// Render a synthetic scene into prediction bundles plus ground truth.
    Synth(SynthArgs),
    /// Score a map and trajectory against ground truth.
    Eval(EvalArgs),
    /// Label map Gaussians with class embeddings.
    Segment(SegmentArgs),
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("input").required(true).args(["source", "synthetic"])))]
struct RunArgs {
    /// Directory of `frame_*` prediction bundles.
    source: Option<PathBuf>,
    /// Synthetic scene file to generate predictions from.
    #[arg(long, value_name = "SCENE")]
    synthetic: Option<PathBuf>,
    /// Config JSON; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(short, long, value_name = "DIR")]
    output: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    scene: PathBuf,
    /// Noise model JSON replacing the scene's own.
    #[arg(long)]
    noise: Option<PathBuf>,
    /// Write every n-th frame only.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    stride: u64,
    #[arg(short, long, value_name = "DIR")]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    map: PathBuf,
    /// Estimated trajectory (TUM).
    #[arg(long)]
    traj: PathBuf,
    /// Ground-truth trajectory (TUM); poses are paired by timestamp.
    #[arg(long)]
    gt_traj: PathBuf,
    /// Ground-truth oriented labeled cloud (PLY).
    #[arg(long)]
    gt_cloud: PathBuf,
    /// Camera intrinsics JSON; enables densified reconstruction.
    #[arg(long)]
    camera: Option<PathBuf>,
    /// Class embeddings JSON; enables segmentation scores.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write the report as JSON here.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("frame").multiple(true).requires_all(["traj", "gt_traj"]).args(["traj", "gt_traj"])))]
struct SegmentArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(short, long, value_name = "DIR")]
    output: PathBuf,
    /// Ground-truth labeled cloud; enables scores.
    #[arg(long)]
    gt_cloud: Option<PathBuf>,
    /// Estimated and ground-truth trajectories used to align the map to the
    /// ground-truth frame before scoring.
    #[arg(long)]
    traj: Option<PathBuf>,
    #[arg(long)]
    gt_traj: Option<PathBuf>,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> gaussfuse::Result<gaussfuse::types::Config> {
    let mut config = match path {
        Some(p) => gaussfuse::types::Config::load(p)?,
        None => gaussfuse::types::Config::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Run(a) => commands::run(a),
        Command::Synth(a) => commands::synth(a),
        Command::Eval(a) => commands::eval(a),
        Command::Segment(a) => commands::segment(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
