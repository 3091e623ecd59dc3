//! MPJPE against PA-MPJPE: a rotated, scaled and shifted copy of a pose has
//! a large plain error and (almost) no error after Procrustes alignment.

use mvpose::evaluation::{mpjpe, pa_mpjpe, procrustes_align};
use mvpose::kinematics::{self, CapsuleModel, KinematicParams};
use nalgebra::{Rotation3, Vector3};

fn main() -> mvpose::Result<()> {
    let model = CapsuleModel::default_upper_body();
    let mut p = KinematicParams::zeros(&model);
    p.root_translation.z = 350.0;
    let gt = kinematics::forward_kinematics(&model, &p)?;

    let r = Rotation3::from_euler_angles(0.2, -0.4, 1.1);
    let pred: Vec<Vector3<f64>> = gt
        .iter()
        .enumerate()
        .map(|(i, x)| r * x * 1.08 + Vector3::new(50.0, -20.0, 10.0) + Vector3::new(0.0, 0.0, (i % 3) as f64))
        .collect();
    let valid = vec![true; gt.len()];

    println!("MPJPE    {:.3} mm", mpjpe(&pred, &gt, &valid)?);
    println!("PA-MPJPE {:.3} mm", pa_mpjpe(&pred, &gt, &valid)?);
    let (sim, _) = procrustes_align(&pred, &gt, &valid)?;
    println!("recovered scale {:.4} (true {:.4})", sim.scale, 1.0 / 1.08);
    Ok(())
}
