//! Seeded synthetic scenes: a camera ring, smooth motion of the capsule
//! model, noisy detections with simulated confidences, and oracle masks.
//!
//! Every random draw comes from a ChaCha stream derived from the seed, with
//! one stream per frame for observations, so results do not depend on the
//! order in which frames are generated.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::confidence::{Detection2D, FrameDetections};
use crate::error::{Error, Result};
use crate::geometry::{project_point, CameraView, Rig};
use crate::kinematics::{self, CapsuleModel, KinematicParams};
use crate::silhouette::{self, SilhouetteMask};
use crate::skeleton::SkeletonSet3D;

const RIG_STREAM: u64 = u64::MAX;
const MOTION_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub view_count: usize,
    pub noise_sigma_px: f64,
    pub outlier_rate: f64,
    pub outlier_sigma_px: f64,
    pub sequence_length: usize,
    pub rng_seed: u64,
    /// Upper bound on each joint-angle component's excursion, radians.
    pub amplitude_rad: f64,
    /// Upper bound on each joint-angle component's rate, radians per frame.
    pub angular_speed: f64,
    /// Random per-bone log-scale range.
    pub shape_jitter: f64,
    pub ring_radius_mm: [f64; 2],
    pub camera_height_mm: [f64; 2],
    pub focal_px: f64,
    pub crop_px: u32,
    pub mask_sigma_px: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            view_count: 8,
            noise_sigma_px: 1.0,
            outlier_rate: 0.02,
            outlier_sigma_px: 20.0,
            sequence_length: 30,
            rng_seed: 0,
            amplitude_rad: 0.3,
            angular_speed: 0.05,
            shape_jitter: 0.1,
            ring_radius_mm: [2000.0, 3000.0],
            camera_height_mm: [-300.0, 600.0],
            focal_px: 220.0,
            crop_px: 160,
            mask_sigma_px: 1.0,
        }
    }
}

impl SynthConfig {
    /// Same scene geometry and motion with noise and outliers switched off.
    pub fn noiseless(mut self) -> Self {
        self.noise_sigma_px = 0.0;
        self.outlier_rate = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.view_count < 2 {
            return fail(format!("view_count must be ≥ 2, got {}", self.view_count));
        }
        if !(0.0..=1.0).contains(&self.outlier_rate) {
            return fail(format!("outlier_rate must be in [0, 1], got {}", self.outlier_rate));
        }
        for (name, v) in [
            ("noise_sigma_px", self.noise_sigma_px),
            ("outlier_sigma_px", self.outlier_sigma_px),
            ("angular_speed", self.angular_speed),
            ("shape_jitter", self.shape_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be finite and ≥ 0, got {v}"));
            }
        }
        if !(0.0..=0.5).contains(&self.amplitude_rad) {
            return fail(format!("amplitude_rad must be in [0, 0.5], got {}", self.amplitude_rad));
        }
        let [r0, r1] = self.ring_radius_mm;
        if !(r0 > 0.0 && r1 >= r0) {
            return fail(format!("ring_radius_mm must be an increasing positive range, got {r0}..{r1}"));
        }
        let [h0, h1] = self.camera_height_mm;
        if !(h1 >= h0) || h0.abs().max(h1.abs()) >= r0 {
            return fail(format!("camera_height_mm {h0}..{h1} must be ordered and below the ring radius"));
        }
        if !(self.focal_px > 0.0) || self.crop_px == 0 {
            return fail("focal_px and crop_px must be positive".into());
        }
        if !(self.mask_sigma_px > 0.0) {
            return fail("mask_sigma_px must be > 0".into());
        }
        Ok(())
    }
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Camera at `center` looking at the world origin with +z up.
pub fn look_at_origin(
    id: impl Into<String>,
    center: Vector3<f64>,
    focal: f64,
    crop: u32,
) -> CameraView {
    let forward = (-center).normalize();
    let right = forward.cross(&Vector3::z()).normalize();
    let down = forward.cross(&right);
    let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    let translation = -(rotation * center);
    let c = f64::from(crop) / 2.0;
    let intrinsics = Matrix3::new(focal, 0.0, c, 0.0, focal, c, 0.0, 0.0, 1.0);
    CameraView::new(id, intrinsics, rotation, translation, crop, crop)
}

/// `view_count` cameras spread around a ring, each with a jittered azimuth,
/// radius and height, all aimed at the origin.
pub fn generate_rig(cfg: &SynthConfig) -> Result<Rig> {
    cfg.validate()?;
    let mut rng = stream(cfg.rng_seed, RIG_STREAM);
    let step = 2.0 * PI / cfg.view_count as f64;
    let views = (0..cfg.view_count)
        .map(|i| {
            let azimuth = step * (i as f64 + rng.random_range(-0.25..0.25));
            let radius = uniform(&mut rng, cfg.ring_radius_mm);
            let height = uniform(&mut rng, cfg.camera_height_mm);
            let center = Vector3::new(radius * azimuth.cos(), radius * azimuth.sin(), height);
            look_at_origin(format!("cam{i}"), center, cfg.focal_px, cfg.crop_px)
        })
        .collect();
    Ok(Rig::new(views))
}

/// One sinusoidal component `a·sin(ω·t + φ)` of a joint angle.
#[derive(Debug, Clone, Copy)]
struct Wave {
    amplitude: f64,
    omega: f64,
    phase: f64,
}

impl Wave {
    fn at(&self, t: f64) -> f64 {
        self.amplitude * (self.omega * t + self.phase).sin()
    }
}

/// Ground-truth parameters and joints for every frame. The root stays
/// fixed (upright, centered on the origin) while every joint angle
/// oscillates with amplitude ≤ `amplitude_rad` and rate ≤ `angular_speed`.
pub fn generate_motion(
    model: &CapsuleModel,
    cfg: &SynthConfig,
) -> Result<(Vec<KinematicParams>, Vec<SkeletonSet3D>)> {
    cfg.validate()?;
    let mut rng = stream(cfg.rng_seed, MOTION_STREAM);
    let mut base = KinematicParams::zeros(model);
    for b in base.beta.iter_mut() {
        *b = if cfg.shape_jitter > 0.0 {
            rng.random_range(-cfg.shape_jitter..=cfg.shape_jitter)
        } else {
            0.0
        };
    }
    base.root_rotation = Vector3::new(0.0, 0.0, rng.random_range(-PI..PI));
    base.root_translation = Vector3::new(0.0, 0.0, 350.0);

    let waves: Vec<Wave> = (0..base.theta.len())
        .map(|_| {
            let amplitude = cfg.amplitude_rad * rng.random_range(0.2..1.0);
            let omega = if amplitude > 0.0 {
                cfg.angular_speed / amplitude * rng.random_range(0.5..1.0)
            } else {
                0.0
            };
            Wave {
                amplitude,
                omega,
                phase: rng.random_range(0.0..2.0 * PI),
            }
        })
        .collect();

    let mut params = Vec::with_capacity(cfg.sequence_length);
    let mut joints = Vec::with_capacity(cfg.sequence_length);
    for frame in 0..cfg.sequence_length {
        let mut p = base.clone();
        for (theta, wave) in p.theta.iter_mut().zip(&waves) {
            *theta = wave.at(frame as f64);
        }
        let x = kinematics::forward_kinematics(model, &p)?;
        joints.push(SkeletonSet3D::from_positions(model.topology().clone(), frame as i64, &x)?);
        params.push(p);
    }
    Ok((params, joints))
}

#[derive(Debug, Clone)]
pub struct GroundTruthScene {
    pub rig: Rig,
    pub model: CapsuleModel,
    pub params_per_frame: Vec<KinematicParams>,
    pub joints_per_frame: Vec<SkeletonSet3D>,
    /// `[frame][view]`, hard masks in rig view order.
    pub masks_per_frame_view: Vec<Vec<SilhouetteMask>>,
}

/// Rig, motion and hard oracle masks for the default capsule model.
pub fn generate_scene(cfg: &SynthConfig) -> Result<GroundTruthScene> {
    generate_scene_with_model(CapsuleModel::default_upper_body(), cfg)
}

pub fn generate_scene_with_model(model: CapsuleModel, cfg: &SynthConfig) -> Result<GroundTruthScene> {
    let rig = generate_rig(cfg)?;
    let (params_per_frame, joints_per_frame) = generate_motion(&model, cfg)?;
    let mut scene = GroundTruthScene {
        rig,
        model,
        params_per_frame,
        joints_per_frame,
        masks_per_frame_view: Vec::new(),
    };
    scene.masks_per_frame_view = render_gt_masks(&scene, &scene.rig, cfg.mask_sigma_px, true)?;
    Ok(scene)
}

/// Simulated detector output, one `FrameDetections` list per rig view.
///
/// Each coordinate gets `N(0, σ²)` noise. With probability `outlier_rate`
/// a detection is further offset by `N(0, outlier_σ²)` per coordinate and
/// its confidence set to `1 / (1 + |offset| / 10)`; otherwise confidence is
/// drawn from `[0.95, 1]`. Joints that cannot be projected are omitted.
pub fn observe(scene: &GroundTruthScene, cfg: &SynthConfig) -> Result<Vec<Vec<FrameDetections>>> {
    cfg.validate()?;
    let noise = Normal::new(0.0, cfg.noise_sigma_px).map_err(|e| Error::Config(e.to_string()))?;
    let outlier = Normal::new(0.0, cfg.outlier_sigma_px).map_err(|e| Error::Config(e.to_string()))?;
    let per_frame: Vec<Vec<FrameDetections>> = scene
        .joints_per_frame
        .par_iter()
        .map(|gt| {
            let mut rng = stream(cfg.rng_seed, gt.frame as u64);
            scene
                .rig
                .views
                .iter()
                .map(|view| {
                    let joints = gt
                        .joints
                        .iter()
                        .map(|j| {
                            // draws happen unconditionally so the stream stays aligned
                            let n = Vector3::new(noise.sample(&mut rng), noise.sample(&mut rng), 0.0);
                            let is_outlier = rng.random::<f64>() < cfg.outlier_rate;
                            let o = Vector3::new(outlier.sample(&mut rng), outlier.sample(&mut rng), 0.0);
                            let jitter: f64 = rng.random();
                            let px = project_point(view, &j.position).ok()?;
                            let (x, y) = (px.x + n.x, px.y + n.y);
                            Some(if is_outlier {
                                Detection2D::new(x + o.x, y + o.y, 1.0 / (1.0 + o.norm() / 10.0))
                            } else {
                                Detection2D::new(x, y, 1.0 - 0.05 * jitter)
                            })
                        })
                        .collect();
                    FrameDetections {
                        view_id: view.id().to_string(),
                        frame: gt.frame,
                        joints,
                    }
                })
                .collect()
        })
        .collect();

    let mut per_view: Vec<Vec<FrameDetections>> = vec![Vec::with_capacity(per_frame.len()); scene.rig.len()];
    for frame in per_frame {
        for (v, dets) in frame.into_iter().enumerate() {
            per_view[v].push(dets);
        }
    }
    Ok(per_view)
}

/// Masks of the ground-truth pose, `[frame][view]`. With `hard`, the soft
/// render is thresholded at 0.5.
pub fn render_gt_masks(
    scene: &GroundTruthScene,
    rig: &Rig,
    soft_sigma: f64,
    hard: bool,
) -> Result<Vec<Vec<SilhouetteMask>>> {
    scene
        .joints_per_frame
        .par_iter()
        .map(|gt| {
            let positions = gt.positions();
            rig.views
                .iter()
                .map(|view| {
                    let mut grid = silhouette::render_positions(&scene.model, &positions, view, soft_sigma)?;
                    if hard {
                        grid.iter_mut().for_each(|v| *v = if *v >= 0.5 { 1.0 } else { 0.0 });
                    }
                    SilhouetteMask::new(
                        view.id(),
                        gt.frame,
                        view.width() as usize,
                        view.height() as usize,
                        grid,
                    )
                })
                .collect()
        })
        .collect()
}
