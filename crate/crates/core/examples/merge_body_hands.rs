//! Triangulates a noiseless synthetic frame and merges separately estimated
//! hand keypoints into the body skeleton.

use mvpose::skeleton::Part;
use mvpose::synth::{self, SynthConfig};
use mvpose::triangulation::{merge_keypoints, triangulate_frame};

fn main() -> mvpose::Result<()> {
    let cfg = SynthConfig {
        sequence_length: 1,
        ..SynthConfig::default().noiseless()
    };
    let scene = synth::generate_scene(&cfg)?;
    let per_view = synth::observe(&scene, &cfg)?;
    let frame: Vec<_> = per_view.iter().map(|v| v[0].clone()).collect();
    let topology = scene.model.topology().clone();

    let full = triangulate_frame(&scene.rig, &frame, &topology)?;
    let body = full.restricted_to(&[Part::Body]);
    let hands = full.restricted_to(&[Part::LeftHand, Part::RightHand]);
    let merged = merge_keypoints(&body, &hands)?;

    let gt = &scene.joints_per_frame[0];
    let worst = merged
        .joints
        .iter()
        .zip(&gt.joints)
        .filter(|(m, _)| m.valid)
        .map(|(m, g)| (m.position - g.position).norm())
        .fold(0.0, f64::max);
    let valid = merged.joints.iter().filter(|j| j.valid).count();
    println!("body valid {}", body.joints.iter().filter(|j| j.valid).count());
    println!("hand valid {}", hands.joints.iter().filter(|j| j.valid).count());
    println!("merged valid {valid}/{}, worst error {worst:.2e} mm", merged.joints.len());
    for (link_hand, link_body) in topology.wrist_links() {
        let d = (merged.joints[link_hand].position - merged.joints[link_body].position).norm();
        println!(
            "{} ↔ {}: {d:.2e} mm apart",
            topology.joints()[link_hand].name,
            topology.joints()[link_body].name
        );
    }
    Ok(())
}
