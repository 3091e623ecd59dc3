//! Renders soft silhouettes and shows the mask term pulling a laterally
//! shifted model back onto its observed silhouette.

use mvpose::fitting::{self, FitConfig};
use mvpose::kinematics::{self, KinematicParams};
use mvpose::silhouette;
use mvpose::skeleton::{Joint3D, SkeletonSet3D};
use mvpose::synth::{self, SynthConfig};
use nalgebra::Vector3;

fn main() -> mvpose::Result<()> {
    let cfg = SynthConfig {
        sequence_length: 1,
        ..SynthConfig::default()
    };
    let scene = synth::generate_scene(&cfg)?;
    let model = &scene.model;
    let masks = &scene.masks_per_frame_view[0];
    let truth = &scene.params_per_frame[0];

    // every target joint is biased 30 mm sideways
    let joints = scene.joints_per_frame[0]
        .joints
        .iter()
        .map(|j| Joint3D::exact(j.position + Vector3::new(30.0, 0.0, 0.0)))
        .collect();
    let target = SkeletonSet3D::new(model.topology().clone(), 0, joints)?;

    let iou_of = |p: &KinematicParams| -> mvpose::Result<f64> {
        let x = kinematics::forward_kinematics(model, p)?;
        let mut sum = 0.0;
        for (view, mask) in scene.rig.views.iter().zip(masks) {
            let occ = silhouette::render_positions(model, &x, view, cfg.mask_sigma_px)?;
            sum += silhouette::iou(&occ, &mask.grid);
        }
        Ok(sum / masks.len() as f64)
    };
    println!("ground truth IoU {:.4}", iou_of(truth)?);

    let init = fitting::initial_alignment(model, &target)?;
    for lambda_mask in [0.0, 1e4] {
        let fit = FitConfig {
            lambda_mask,
            max_iterations: 60,
            ..FitConfig::default()
        };
        let used = if lambda_mask > 0.0 { &masks[..] } else { &[] };
        let out = fitting::fit_frame(model, &target, used, &scene.rig, &init, &fit)?;
        println!(
            "λ_mask = {lambda_mask:>6}: loss {:.4e} → {:.4e}, IoU {:.4}",
            out.history[0],
            out.loss,
            iou_of(&out.params)?
        );
    }
    Ok(())
}
