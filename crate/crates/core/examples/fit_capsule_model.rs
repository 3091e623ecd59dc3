//! Fits the articulated capsule model to a posed target with damped
//! Gauss-Newton and compares it with plain gradient descent.

use mvpose::fitting::{self, FitConfig, StepPolicy};
use mvpose::geometry::Rig;
use mvpose::kinematics::{self, CapsuleModel, KinematicParams};
use mvpose::skeleton::SkeletonSet3D;
use nalgebra::Vector3;

fn main() -> mvpose::Result<()> {
    let model = CapsuleModel::default_upper_body();
    let mut truth = KinematicParams::zeros(&model);
    truth.root_rotation = Vector3::new(0.0, 0.0, 0.6);
    truth.root_translation = Vector3::new(20.0, -15.0, 350.0);
    for (i, t) in truth.theta.iter_mut().enumerate() {
        *t = 0.3 * (1.3 * i as f64).sin();
    }
    let x = kinematics::forward_kinematics(&model, &truth)?;
    let target = SkeletonSet3D::from_positions(model.topology().clone(), 0, &x)?;

    let init = fitting::initial_alignment(&model, &target)?;
    let no_views = Rig::new(Vec::new());
    for policy in [StepPolicy::GaussNewtonLm, StepPolicy::GradientDescent] {
        let cfg = FitConfig {
            step_policy: policy,
            max_iterations: 200,
            ..FitConfig::default().without_masks()
        };
        let out = fitting::fit_frame(&model, &target, &[], &no_views, &init, &cfg)?;
        let fitted = kinematics::forward_kinematics(&model, &out.params)?;
        let err = mvpose::evaluation::mpjpe(&fitted, &x, &vec![true; x.len()])?;
        println!(
            "{policy:?}: {} iterations, converged {}, loss {:.3e} → {:.3e}, MPJPE {err:.4} mm",
            out.iterations,
            out.converged,
            out.history[0],
            out.loss
        );
    }
    Ok(())
}
