//! Projects a 3D point into a ring of cameras, perturbs the detections and
//! recovers the point with weighted DLT triangulation.

use mvpose::confidence::Detection2D;
use mvpose::geometry::project_point;
use mvpose::synth::{self, SynthConfig};
use mvpose::triangulation::triangulate_joint;
use nalgebra::Vector3;

fn main() -> mvpose::Result<()> {
    let rig = synth::generate_rig(&SynthConfig::default())?;
    let truth = Vector3::new(40.0, -25.0, 420.0);

    let views: Vec<_> = rig.views.iter().collect();
    let dets: Vec<Option<Detection2D>> = views
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let px = project_point(v, &truth).ok()?;
            // a deterministic sub-pixel wobble per view
            let wobble = 0.4 * (i as f64 * 2.1).sin();
            Some(Detection2D::new(px.x + wobble, px.y - wobble, 0.9))
        })
        .collect();

    let uniform = triangulate_joint(&views, &dets, &vec![1.0; views.len()])?;
    let p = uniform.joint.position;
    println!("truth        {:.3} {:.3} {:.3}", truth.x, truth.y, truth.z);
    println!("triangulated {:.3} {:.3} {:.3}", p.x, p.y, p.z);
    println!("error {:.4} mm, support {}", (p - truth).norm(), uniform.joint.support);

    // dropping all but two views still determines the point
    let mut weights = vec![0.0; views.len()];
    weights[0] = 1.0;
    weights[3] = 1.0;
    let pair = triangulate_joint(&views, &dets, &weights)?;
    println!(
        "two views: error {:.4} mm, status {:?}",
        (pair.joint.position - truth).norm(),
        pair.status
    );
    Ok(())
}
