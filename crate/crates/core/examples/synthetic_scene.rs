//! Generates a synthetic scene and writes it as a scene directory.

use mvpose::pipeline::{self, PipelineConfig};
use mvpose::synth::SynthConfig;

fn main() -> mvpose::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "synthetic_scene".into());
    let cfg = PipelineConfig {
        synth: Some(SynthConfig {
            sequence_length: 10,
            rng_seed: 7,
            ..SynthConfig::default()
        }),
        ..PipelineConfig::default()
    };
    let scene = pipeline::cmd_synth(dir.as_ref(), &cfg)?;
    println!("wrote {dir}");
    println!("views: {}", scene.rig.views.iter().map(|v| v.id()).collect::<Vec<_>>().join(", "));
    println!("frames: {}", scene.joints_per_frame.len());
    let areas: Vec<String> = scene.masks_per_frame_view[0].iter().map(|m| format!("{:.0}", m.area())).collect();
    println!("frame 0 mask areas (px): {}", areas.join(" "));
    let problems = pipeline::cmd_validate(dir.as_ref());
    println!("validate: {}", if problems.is_empty() { "ok".to_string() } else { problems.join("; ") });
    Ok(())
}
