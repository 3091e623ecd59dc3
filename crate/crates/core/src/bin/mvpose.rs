use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mvpose::pipeline::{self, EvalOptions, JointSubset, PipelineConfig};
use mvpose::Error;

#[derive(Parser)]
#[command(name = "mvpose", version, about = "Multi-view hand-body pose annotation")]
struct Cli {
    /// JSON pipeline configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Overrides the synthetic scene seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (the scene itself for `synth`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene directory.
    Synth,
    /// Triangulate and merge keypoints for a scene.
    Annotate { scene: PathBuf },
    /// Fit the capsule model to a scene's annotations.
    Fit {
        scene: PathBuf,
        /// Annotation file; defaults to annotations.jsonl in the output directory.
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
    /// Compare predicted and ground-truth annotation files.
    Eval {
        pred: PathBuf,
        gt: PathBuf,
        #[arg(long, default_value = "all")]
        joints: String,
        /// Topology file; defaults to topology.json beside the ground truth.
        #[arg(long)]
        topology: Option<PathBuf>,
        /// CSV of `truth,prediction` action labels for a confusion report.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Check a scene directory for problems.
    Validate { scene: PathBuf },
}

fn config(cli: &Cli) -> mvpose::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(seed) = cli.seed {
        let mut synth = cfg.synth_or_default();
        synth.rng_seed = seed;
        cfg.synth = Some(synth);
    }
    if let Some(out) = &cli.out {
        if !matches!(cli.command, Command::Synth) {
            cfg.out_dir = Some(out.clone());
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> mvpose::Result<()> {
    let cfg = config(cli)?;
    cfg.install(|| match &cli.command {
        Command::Synth => {
            let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("scene"));
            pipeline::cmd_synth(&dir, &cfg)?;
            println!("{}", dir.display());
            Ok(())
        }
        Command::Annotate { scene } => {
            println!("{}", pipeline::cmd_annotate(scene, &cfg)?.display());
            Ok(())
        }
        Command::Fit { scene, annotations } => {
            let summary = pipeline::cmd_fit(scene, annotations.as_deref(), &cfg)?;
            eprintln!(
                "{}/{} frames converged, {} failed",
                summary.converged, summary.frames, summary.failed
            );
            println!("{}", summary.params_path.display());
            Ok(())
        }
        Command::Eval {
            pred,
            gt,
            joints,
            topology,
            labels,
        } => {
            let opts = EvalOptions {
                subset: joints.parse::<JointSubset>()?,
                topology: topology.clone(),
                labels: labels.clone(),
                out_dir: cli.out.clone(),
            };
            let report = pipeline::cmd_eval(pred, gt, &opts, &cfg)?;
            let mean = pipeline::metrics_csv(&report.rows);
            print!("{}", mean.lines().last().map(|l| format!("{l}\n")).unwrap_or_default());
            if let Some(acc) = report.accuracy {
                println!("accuracy,{acc}");
            }
            Ok(())
        }
        Command::Validate { scene } => validate(scene),
    })
}

fn validate(scene: &Path) -> mvpose::Result<()> {
    let problems = pipeline::cmd_validate(scene);
    if problems.is_empty() {
        println!("ok");
        return Ok(());
    }
    for p in &problems {
        eprintln!("{p}");
    }
    Err(Error::Input {
        path: scene.to_path_buf(),
        message: format!("{} problem(s) found", problems.len()),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(pipeline::exit_code(&e) as u8)
        }
    }
}
