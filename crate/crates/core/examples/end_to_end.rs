//! Full pipeline on a fresh scene: synth, annotate, fit, eval.

use mvpose::fitting::FitConfig;
use mvpose::pipeline::{self, EvalOptions, JointSubset, PipelineConfig};
use mvpose::synth::SynthConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = tempfile::tempdir()?;
    let scene = root.path().join("scene");
    let cfg = PipelineConfig {
        synth: Some(SynthConfig {
            sequence_length: 8,
            ..SynthConfig::default()
        }),
        fit: FitConfig {
            max_iterations: 40,
            ..FitConfig::default()
        },
        ..PipelineConfig::default()
    };
    cfg.install(|| -> mvpose::Result<()> {
        pipeline::cmd_synth(&scene, &cfg)?;
        let annotations = pipeline::cmd_annotate(&scene, &cfg)?;
        let fit = pipeline::cmd_fit(&scene, None, &cfg)?;
        println!("fit: {}/{} frames converged", fit.converged, fit.frames);

        let gt = scene.join("ground_truth.jsonl");
        for (name, pred) in [("triangulated", annotations), ("fitted", fit.joints_path)] {
            for subset in [JointSubset::Body, JointSubset::Hand] {
                let opts = EvalOptions {
                    subset,
                    topology: None,
                    labels: None,
                    out_dir: Some(root.path().join("eval")),
                };
                let report = pipeline::cmd_eval(&pred, &gt, &opts, &cfg)?;
                let n = report.rows.len() as f64;
                let mean = report.rows.iter().map(|r| r.mpjpe).sum::<f64>() / n;
                let pa = report.rows.iter().map(|r| r.pa_mpjpe).sum::<f64>() / n;
                println!("{name:>12} {subset:?}: MPJPE {mean:.2} mm, PA-MPJPE {pa:.2} mm");
            }
        }
        Ok(())
    })?;
    Ok(())
}
