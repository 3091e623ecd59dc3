//! Invariants checked against independent oracles.

use mvpose::confidence::{modulate_confidence, threshold_rescale, Detection2D};
use mvpose::evaluation;
use mvpose::fitting::{self, FitConfig};
use mvpose::geometry::{project_point, Rig};
use mvpose::kinematics::{self, CapsuleModel, KinematicParams};
use mvpose::silhouette::{self, SilhouetteMask};
use mvpose::skeleton::{Joint3D, SkeletonSet3D};
use mvpose::synth::{self, SynthConfig};
use nalgebra::{Matrix3, Matrix4, Rotation3, SymmetricEigen, UnitQuaternion, Vector3, Vector4};
use proptest::prelude::*;

fn model() -> CapsuleModel {
    CapsuleModel::default_upper_body()
}

fn vec3(range: f64) -> impl Strategy<Value = Vector3<f64>> {
    prop::array::uniform3(-range..range).prop_map(Vector3::from)
}

fn params_strategy(theta_max: f64) -> impl Strategy<Value = KinematicParams> {
    let m = model();
    (
        prop::collection::vec(-0.2..0.2f64, m.bone_count()),
        prop::collection::vec(-theta_max..theta_max, 3 * m.joint_count()),
        vec3(3.0),
        vec3(500.0),
    )
        .prop_map(|(beta, theta, root_rotation, root_translation)| KinematicParams {
            beta,
            theta,
            root_rotation,
            root_translation,
        })
}

fn homogeneous(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
    m
}

/// Chains 4×4 transforms: each joint sits at its parent's frame applied to
/// the scaled rest offset, then rotates its own frame by θ.
fn fk_oracle(model: &CapsuleModel, p: &KinematicParams) -> Vec<Vector3<f64>> {
    let topo = model.topology();
    let rot = |v: Vector3<f64>| *Rotation3::from_scaled_axis(v).matrix();
    let mut frames: Vec<Matrix4<f64>> = Vec::new();
    for j in 0..topo.len() {
        let local = rot(p.joint_rotation(j));
        let frame = match topo.parent(j) {
            None => {
                homogeneous(Matrix3::identity(), p.root_translation)
                    * homogeneous(rot(p.root_rotation), Vector3::zeros())
                    * homogeneous(local, model.rest_offsets()[j])
            }
            Some(parent) => {
                let scale = p.beta[model.bone_of_joint(j).unwrap()].exp();
                frames[parent] * homogeneous(local, model.rest_offsets()[j] * scale)
            }
        };
        frames.push(frame);
    }
    frames.iter().map(|f| Vector3::new(f[(0, 3)], f[(1, 3)], f[(2, 3)])).collect()
}

/// Horn's closed form: the optimal rotation is the top eigenvector of a
/// 4×4 matrix built from the cross-covariance, read as a quaternion.
fn horn_pa_mpjpe(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> f64 {
    let n = pred.len() as f64;
    let (mp, mg) = (
        pred.iter().sum::<Vector3<f64>>() / n,
        gt.iter().sum::<Vector3<f64>>() / n,
    );
    let x: Vec<_> = pred.iter().map(|p| p - mp).collect();
    let y: Vec<_> = gt.iter().map(|g| g - mg).collect();
    let s: Matrix3<f64> = x.iter().zip(&y).map(|(a, b)| a * b.transpose()).sum();
    let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
    let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
    let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
    let k = Matrix4::new(
        sxx + syy + szz, syz - szy, szx - sxz, sxy - syx,
        syz - szy, sxx - syy - szz, sxy + syx, szx + sxz,
        szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy,
        sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz,
    );
    let eig = SymmetricEigen::new(k);
    let top = eig.eigenvalues.imax();
    let q: Vector4<f64> = eig.eigenvectors.column(top).into_owned();
    let r = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
    let scale = x.iter().zip(&y).map(|(a, b)| b.dot(&(r * a))).sum::<f64>()
        / x.iter().map(|a| a.norm_squared()).sum::<f64>();
    x.iter().zip(&y).map(|(a, b)| (r * a * scale - b).norm()).sum::<f64>() / n
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fk_matches_homogeneous_chain(p in params_strategy(1.2)) {
        let m = model();
        let fast = kinematics::forward_kinematics(&m, &p).unwrap();
        for (a, b) in fast.iter().zip(fk_oracle(&m, &p)) {
            prop_assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn fk_is_equivariant_under_root_motion(p in params_strategy(0.8), axis in vec3(1.5), shift in vec3(300.0)) {
        let m = model();
        let base = kinematics::forward_kinematics(&m, &p).unwrap();
        let q = Rotation3::from_scaled_axis(axis);
        let mut moved = p.clone();
        moved.root_rotation = (q * Rotation3::from_scaled_axis(p.root_rotation)).scaled_axis();
        moved.root_translation = q * p.root_translation + shift;
        let after = kinematics::forward_kinematics(&m, &moved).unwrap();
        for (a, b) in base.iter().zip(&after) {
            prop_assert!((q * a + shift - b).norm() < 1e-8);
        }
    }

    #[test]
    fn pa_mpjpe_matches_horn(pts in prop::collection::vec(vec3(400.0), 6..30), noise in prop::collection::vec(vec3(20.0), 30),
                             axis in vec3(3.0), scale in 0.5..2.0f64, shift in vec3(1000.0)) {
        let q = Rotation3::from_scaled_axis(axis);
        let pred: Vec<_> = pts.iter().zip(&noise).map(|(p, e)| q * (p + e) * scale + shift).collect();
        let valid = vec![true; pts.len()];
        let got = evaluation::pa_mpjpe(&pred, &pts, &valid).unwrap();
        let want = horn_pa_mpjpe(&pred, &pts);
        prop_assert!((got - want).abs() < 1e-6 * want.max(1.0), "{got} vs {want}");
    }

    #[test]
    fn mpjpe_and_joint_loss_match_brute_force(pairs in prop::collection::vec((vec3(500.0), vec3(500.0), any::<bool>()), 1..40)) {
        prop_assume!(pairs.iter().any(|p| p.2));
        let pred: Vec<_> = pairs.iter().map(|p| p.0).collect();
        let gt: Vec<_> = pairs.iter().map(|p| p.1).collect();
        let valid: Vec<_> = pairs.iter().map(|p| p.2).collect();
        let mut dist_sum = 0.0;
        let mut sq_sum = 0.0;
        let mut n = 0.0;
        for i in 0..pairs.len() {
            if valid[i] {
                let d = ((pred[i].x - gt[i].x).powi(2) + (pred[i].y - gt[i].y).powi(2) + (pred[i].z - gt[i].z).powi(2)).sqrt();
                dist_sum += d;
                sq_sum += d * d;
                n += 1.0;
            }
        }
        let got = evaluation::mpjpe(&pred, &gt, &valid).unwrap();
        prop_assert!((got - dist_sum / n).abs() < 1e-9 * got.max(1.0));

        let topo = mvpose::skeleton::SkeletonTopology::new(
            (0..pairs.len())
                .map(|i| mvpose::skeleton::JointSpec {
                    name: format!("j{i}"),
                    parent: i.checked_sub(1),
                    part: mvpose::skeleton::Part::Body,
                })
                .collect(),
        )
        .unwrap();
        let joints = gt
            .iter()
            .zip(&valid)
            .map(|(g, &v)| if v { Joint3D::exact(*g) } else { Joint3D::invalid(0) })
            .collect();
        let target = SkeletonSet3D::new(std::sync::Arc::new(topo), 0, joints).unwrap();
        let loss = fitting::joint_loss(&pred, &target).unwrap();
        prop_assert!((loss - sq_sum / n).abs() < 1e-9 * loss.max(1.0));
    }

    #[test]
    fn confidence_stays_in_unit_interval_and_is_monotone(
        x in -20.0..180.0f64, y in -20.0..180.0f64, c in 0.0..=1.0f64, dc in 0.0..=1.0f64, margin in 1.0..40.0f64, tau in 0.0..0.9f64,
    ) {
        let lo = modulate_confidence(&Detection2D::new(x, y, c * dc), 160.0, 160.0, margin);
        let hi = modulate_confidence(&Detection2D::new(x, y, c), 160.0, 160.0, margin);
        prop_assert!((0.0..=1.0).contains(&hi));
        prop_assert!(lo <= hi);
        prop_assert!(hi <= c);
        if !(0.0..=160.0).contains(&x) || !(0.0..=160.0).contains(&y) {
            prop_assert_eq!(hi, 0.0);
        }
        let (w_lo, w_hi) = (threshold_rescale(lo, tau), threshold_rescale(hi, tau));
        prop_assert!((0.0..=1.0).contains(&w_hi));
        prop_assert!(w_lo <= w_hi);
        if hi < tau {
            prop_assert_eq!(w_hi, 0.0);
        }
    }

    #[test]
    fn confidence_grows_away_from_the_edge(d in 0.0..60.0f64, step in 0.0..30.0f64, c in 0.0..=1.0f64) {
        // walk inward from the left edge along the middle row
        let near = modulate_confidence(&Detection2D::new(d, 80.0, c), 160.0, 160.0, 20.0);
        let far = modulate_confidence(&Detection2D::new(d + step, 80.0, c), 160.0, 160.0, 20.0);
        prop_assert!(near <= far + 1e-15);
    }
}

fn residuals(cfg: &SynthConfig) -> (Vec<f64>, Vec<bool>) {
    let scene = synth::generate_scene(cfg).unwrap();
    let views = synth::observe(&scene, cfg).unwrap();
    let mut res = Vec::new();
    let mut outliers = Vec::new();
    for (view, frames) in scene.rig.views.iter().zip(&views) {
        for (gt, det) in scene.joints_per_frame.iter().zip(frames) {
            for (j, d) in gt.joints.iter().zip(&det.joints) {
                let (Some(d), Ok(px)) = (d, project_point(view, &j.position)) else {
                    continue;
                };
                res.push(d.x - px.x);
                res.push(d.y - px.y);
                outliers.push(d.x != px.x || d.y != px.y);
            }
        }
    }
    (res, outliers)
}

#[test]
fn detection_noise_has_the_declared_std() {
    let cfg = SynthConfig {
        noise_sigma_px: 1.5,
        outlier_rate: 0.0,
        sequence_length: 12,
        rng_seed: 5,
        ..Default::default()
    };
    let (res, _) = residuals(&cfg);
    let res = &res[..10_000];
    let mean = res.iter().sum::<f64>() / res.len() as f64;
    let std = (res.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (res.len() - 1) as f64).sqrt();
    assert!((std / cfg.noise_sigma_px - 1.0).abs() < 0.05, "std {std}");
}

#[test]
fn outlier_count_is_within_binomial_bounds() {
    let cfg = SynthConfig {
        noise_sigma_px: 0.0,
        outlier_rate: 0.02,
        sequence_length: 60,
        rng_seed: 9,
        ..Default::default()
    };
    let (_, outliers) = residuals(&cfg);
    let n = outliers.len() as f64;
    let k = outliers.iter().filter(|&&o| o).count() as f64;
    let (mean, sd) = (n * cfg.outlier_rate, (n * cfg.outlier_rate * (1.0 - cfg.outlier_rate)).sqrt());
    assert!((k - mean).abs() <= 2.576 * sd, "{k} outliers in {n}, expected {mean} ± {sd}");
}

#[test]
fn motion_displacement_respects_the_kinematic_bound() {
    let cfg = SynthConfig {
        sequence_length: 80,
        amplitude_rad: 0.4,
        angular_speed: 0.08,
        rng_seed: 2,
        ..Default::default()
    };
    let m = model();
    let (params, joints) = synth::generate_motion(&m, &cfg).unwrap();
    let topo = m.topology();
    // each θ component moves at most `angular_speed` per frame
    let per_joint = 3f64.sqrt() * cfg.angular_speed;
    let mut bound = vec![0.0; topo.len()];
    let mut turn = vec![per_joint; topo.len()];
    for j in 0..topo.len() {
        if let Some(parent) = topo.parent(j) {
            turn[j] += turn[parent];
            let bone = m.bone_of_joint(j).unwrap();
            let len = m.rest_offsets()[j].norm() * params[0].beta[bone].exp();
            bound[j] = bound[parent] + turn[parent] * len;
        }
    }
    for w in joints.windows(2) {
        for (j, (a, b)) in w[0].joints.iter().zip(&w[1].joints).enumerate() {
            assert!((a.position - b.position).norm() <= bound[j] + 1e-9, "joint {j}");
        }
    }
}

#[test]
fn static_motion_when_amplitude_is_zero() {
    let cfg = SynthConfig {
        sequence_length: 5,
        amplitude_rad: 0.0,
        ..Default::default()
    };
    let (_, joints) = synth::generate_motion(&model(), &cfg).unwrap();
    assert!(joints.windows(2).all(|w| w[0].joints == w[1].joints));
}

fn front_rig() -> Rig {
    Rig::new(vec![
        synth::look_at_origin("front", Vector3::new(0.0, -2500.0, 300.0), 220.0, 160),
        synth::look_at_origin("side", Vector3::new(2400.0, 300.0, 200.0), 220.0, 160),
    ])
}

#[test]
fn mask_area_shrinks_with_radii() {
    let m = model();
    let mut p = KinematicParams::zeros(&m);
    p.root_translation.z = 350.0;
    let view = &front_rig().views[0];
    let mut last = f64::INFINITY;
    for factor in [1.6, 1.3, 1.0, 0.8, 0.6, 0.4] {
        let scaled = m.with_scaled_radii(factor).unwrap();
        let x = kinematics::forward_kinematics(&scaled, &p).unwrap();
        let occ = silhouette::render_positions(&scaled, &x, view, 1.0).unwrap();
        let area = occ.iter().filter(|&&o| o >= 0.5).count() as f64;
        assert!(area < last, "factor {factor}: area {area} vs {last}");
        last = area;
    }
}

#[test]
fn mask_loss_falls_along_the_way_to_the_silhouette() {
    let m = model();
    let rig = front_rig();
    let mut truth = KinematicParams::zeros(&m);
    truth.root_translation.z = 350.0;
    let x = kinematics::forward_kinematics(&m, &truth).unwrap();
    let masks: Vec<SilhouetteMask> = rig
        .views
        .iter()
        .map(|v| {
            let grid = silhouette::render_positions(&m, &x, v, 1.0)
                .unwrap()
                .into_iter()
                .map(|o| if o >= 0.5 { 1.0 } else { 0.0 })
                .collect();
            SilhouetteMask::new(v.id(), 0, 160, 160, grid).unwrap()
        })
        .collect();
    let offset = Vector3::new(120.0, -60.0, 40.0);
    let losses: Vec<f64> = (0..10)
        .map(|i| {
            let mut p = truth.clone();
            p.root_translation += offset * (1.0 - f64::from(i) / 9.0);
            let x = kinematics::forward_kinematics(&m, &p).unwrap();
            silhouette::mask_loss_only(&m, &x, &rig, &masks, 1.0).unwrap()
        })
        .collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn constant_pose_needs_few_iterations_after_the_first_frame() {
    let m = model();
    let mut p = KinematicParams::zeros(&m);
    p.root_translation = Vector3::new(30.0, -20.0, 350.0);
    p.root_rotation = Vector3::new(0.0, 0.0, 0.7);
    for (i, t) in p.theta.iter_mut().enumerate() {
        *t = 0.25 * ((i as f64) * 1.7).sin();
    }
    let x = kinematics::forward_kinematics(&m, &p).unwrap();
    let targets: Vec<SkeletonSet3D> = (0..6)
        .map(|f| SkeletonSet3D::from_positions(m.topology().clone(), f, &x).unwrap())
        .collect();
    let cfg = FitConfig::default().without_masks();
    let fits = fitting::fit_sequence(&m, &targets, &[], &Rig::new(Vec::new()), &cfg).unwrap();
    let first = fits[0].iterations;
    for f in &fits[1..] {
        assert!(4 * f.iterations <= first, "frame {}: {} vs {first}", f.frame, f.iterations);
    }
}

#[test]
fn mask_only_directions_never_abort_the_fit() {
    // hand joints without targets leave their shape pinned only by the mask
    // and a weak prior, which invites overflowing trial steps
    let cfg = SynthConfig {
        sequence_length: 1,
        view_count: 3,
        ..Default::default()
    };
    let scene = synth::generate_scene(&cfg).unwrap();
    let m = &scene.model;
    let hands = m.topology().hand_indices();
    let joints = scene.joints_per_frame[0]
        .joints
        .iter()
        .enumerate()
        .map(|(j, joint)| {
            if hands.contains(&j) {
                Joint3D::invalid(0)
            } else {
                Joint3D::exact(joint.position + Vector3::new(30.0, 0.0, 0.0))
            }
        })
        .collect();
    let target = SkeletonSet3D::new(m.topology().clone(), 0, joints).unwrap();
    let fit = FitConfig {
        lambda_mask: 1e4,
        max_iterations: 30,
        ..FitConfig::default()
    };
    let init = fitting::initial_alignment(m, &target).unwrap();
    let out = fitting::fit_frame(m, &target, &scene.masks_per_frame_view[0], &scene.rig, &init, &fit).unwrap();
    assert!(out.params.is_finite());
    assert!(out.loss <= out.history[0]);
}
