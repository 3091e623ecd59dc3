//! Gating of per-view 2D detections before triangulation.
//!
//! Each view's joint tracks are median filtered over time, then every
//! detection's confidence is scaled down linearly inside a margin band along
//! the crop border and finally thresholded and rescaled back onto `[0, 1]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CameraView;
use crate::io;

/// Threshold applied to boundary-modulated confidences.
pub const DEFAULT_TAU: f64 = 0.15;
pub const DEFAULT_MARGIN_PX: f64 = 20.0;
pub const DEFAULT_MEDIAN_WINDOW: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection2D {
    pub x: f64,
    pub y: f64,
    #[serde(rename = "w")]
    pub confidence: f64,
}

impl Detection2D {
    pub fn new(x: f64, y: f64, confidence: f64) -> Self {
        Self { x, y, confidence }
    }

    pub fn is_well_formed(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && (0.0..=1.0).contains(&self.confidence)
    }
}

/// One frame of one view's detector output; `None` marks an undetected joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDetections {
    pub view_id: String,
    pub frame: i64,
    pub joints: Vec<Option<Detection2D>>,
}

impl FrameDetections {
    pub fn load_jsonl(path: &Path) -> Result<Vec<Self>> {
        let frames: Vec<Self> = io::read_jsonl(path)?;
        for f in &frames {
            if let Some(bad) = f.joints.iter().flatten().find(|d| !d.is_well_formed()) {
                return Err(Error::input(
                    path,
                    format!("frame {}: malformed detection {bad:?}", f.frame),
                ));
            }
        }
        Ok(frames)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfidenceConfig {
    pub margin: f64,
    pub tau: f64,
    pub median_window: usize,
}

impl Default for ConfidenceConfig {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN_PX,
            tau: DEFAULT_TAU,
            median_window: DEFAULT_MEDIAN_WINDOW,
        }
    }
}

impl ConfidenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!("margin must be > 0, got {}", self.margin)));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must lie in [0, 1), got {}", self.tau)));
        }
        if self.median_window == 0 || self.median_window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "median window must be odd and ≥ 1, got {}",
                self.median_window
            )));
        }
        Ok(())
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Centered temporal median of each coordinate over the present detections
/// in the window. Windows are truncated at the sequence ends; confidences and
/// absences pass through untouched.
pub fn median_filter_track(
    track: &[Option<Detection2D>],
    window: usize,
) -> Vec<Option<Detection2D>> {
    let half = window / 2;
    let mut xs = Vec::with_capacity(window);
    let mut ys = Vec::with_capacity(window);
    track
        .iter()
        .enumerate()
        .map(|(t, det)| {
            let det = (*det)?;
            xs.clear();
            ys.clear();
            let lo = t.saturating_sub(half);
            let hi = (t + half).min(track.len() - 1);
            for d in track[lo..=hi].iter().flatten() {
                xs.push(d.x);
                ys.push(d.y);
            }
            Some(Detection2D {
                x: median(&mut xs),
                y: median(&mut ys),
                confidence: det.confidence,
            })
        })
        .collect()
}

/// Confidence scaled by the normalized distance to the nearest crop edge,
/// saturating at 1 beyond `margin` pixels and clamped at 0 outside the crop.
pub fn modulate_confidence(det: &Detection2D, width: f64, height: f64, margin: f64) -> f64 {
    let edge = (det.x / margin)
        .min((width - det.x) / margin)
        .min(det.y / margin)
        .min((height - det.y) / margin)
        .min(1.0);
    (edge * det.confidence).max(0.0)
}

/// Zero below `tau`, affine onto `[0, 1]` above it.
pub fn threshold_rescale(w_prime: f64, tau: f64) -> f64 {
    if w_prime < tau {
        0.0
    } else {
        ((w_prime - tau) / (1.0 - tau)).min(1.0)
    }
}

/// Full gating of one view's sequence: per-joint median filtering, then
/// boundary modulation and threshold-rescale of every confidence.
pub fn process_view_sequence(
    frames: &[FrameDetections],
    view: &CameraView,
    joint_count: usize,
    cfg: &ConfidenceConfig,
) -> Result<Vec<FrameDetections>> {
    cfg.validate()?;
    for f in frames {
        if f.joints.len() != joint_count {
            return Err(Error::TopologyMismatch(format!(
                "view {} frame {} has {} joints, topology has {joint_count}",
                f.view_id,
                f.frame,
                f.joints.len()
            )));
        }
    }
    if frames.windows(2).any(|w| w[0].frame >= w[1].frame) {
        return Err(Error::DimensionMismatch(format!(
            "frames of view {} are not strictly increasing",
            view.id()
        )));
    }

    let mut out: Vec<FrameDetections> = frames.to_vec();
    let (w, h) = (f64::from(view.width()), f64::from(view.height()));
    for joint in 0..joint_count {
        let track: Vec<Option<Detection2D>> = frames.iter().map(|f| f.joints[joint]).collect();
        let filtered = median_filter_track(&track, cfg.median_window);
        for (frame, det) in out.iter_mut().zip(filtered) {
            frame.joints[joint] = det.map(|mut d| {
                let w_prime = modulate_confidence(&d, w, h, cfg.margin);
                d.confidence = threshold_rescale(w_prime, cfg.tau);
                d
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, Vector3};

    fn det(x: f64) -> Option<Detection2D> {
        Some(Detection2D::new(x, 50.0, 0.9))
    }

    #[test]
    fn window_one_is_identity() {
        let track = vec![det(1.0), None, det(7.0), det(-3.0)];
        assert_eq!(median_filter_track(&track, 1), track);
    }

    #[test]
    fn spike_is_removed() {
        let track = vec![det(0.0), det(100.0), det(0.0)];
        let out = median_filter_track(&track, 3);
        assert_eq!(out[1].unwrap().x, 0.0);
        assert_eq!(out[1].unwrap().confidence, 0.9);
    }

    #[test]
    fn outlier_frame_takes_neighborhood_median() {
        let xs = [10.0, 11.0, 12.0, 13.0, 500.0, 15.0, 16.0, 17.0, 18.0];
        let track: Vec<_> = xs.iter().map(|&x| det(x)).collect();
        let out = median_filter_track(&track, 5);
        // window {12, 13, 500, 15, 16}
        assert_eq!(out[4].unwrap().x, 15.0);
        // truncated window at the start: {10, 11, 12}
        assert_eq!(out[0].unwrap().x, 11.0);
    }

    #[test]
    fn even_present_count_averages_middle_pair() {
        let track = vec![det(1.0), None, det(3.0)];
        let out = median_filter_track(&track, 3);
        assert_eq!(out[0].unwrap().x, 1.0);
        assert!(out[1].is_none());
        assert_eq!(out[2].unwrap().x, 3.0);
        let track = vec![det(1.0), det(4.0)];
        assert_eq!(median_filter_track(&track, 3)[0].unwrap().x, 2.5);
    }

    #[test]
    fn boundary_modulation_values() {
        let c = Detection2D::new(100.0, 100.0, 0.8);
        assert_eq!(modulate_confidence(&c, 200.0, 200.0, 20.0), 0.8);
        let edge = Detection2D::new(10.0, 100.0, 0.8);
        assert_eq!(modulate_confidence(&edge, 200.0, 200.0, 20.0), 0.4);
        let on_edge = Detection2D::new(0.0, 100.0, 0.7);
        assert_eq!(modulate_confidence(&on_edge, 200.0, 200.0, 5.0), 0.0);
        let outside = Detection2D::new(-4.0, 100.0, 0.7);
        assert_eq!(modulate_confidence(&outside, 200.0, 200.0, 5.0), 0.0);
    }

    #[test]
    fn threshold_values() {
        assert_eq!(threshold_rescale(0.10, DEFAULT_TAU), 0.0);
        assert_eq!(threshold_rescale(1.0, 0.3), 1.0);
        assert!((threshold_rescale(0.575, 0.15) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(ConfidenceConfig::default().validate().is_ok());
        let bad = ConfidenceConfig { median_window: 4, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ConfidenceConfig { tau: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ConfidenceConfig { margin: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    fn view() -> CameraView {
        let k = Matrix3::new(100.0, 0.0, 100.0, 0.0, 100.0, 100.0, 0.0, 0.0, 1.0);
        CameraView::new("v", k, Matrix3::identity(), Vector3::zeros(), 200, 200)
    }

    #[test]
    fn centered_constant_tracks_keep_full_confidence() {
        let frames: Vec<FrameDetections> = (0..6)
            .map(|f| FrameDetections {
                view_id: "v".into(),
                frame: f,
                joints: vec![Some(Detection2D::new(100.0, 90.0, 1.0)), None],
            })
            .collect();
        let out = process_view_sequence(&frames, &view(), 2, &ConfidenceConfig::default()).unwrap();
        for f in &out {
            assert_eq!(f.joints[0], Some(Detection2D::new(100.0, 90.0, 1.0)));
            assert!(f.joints[1].is_none());
        }
    }

    #[test]
    fn margin_band_lowers_confidence() {
        let frames = vec![FrameDetections {
            view_id: "v".into(),
            frame: 0,
            joints: vec![Some(Detection2D::new(15.0, 100.0, 0.9))],
        }];
        let out = process_view_sequence(&frames, &view(), 1, &ConfidenceConfig::default()).unwrap();
        assert!(out[0].joints[0].unwrap().confidence < 0.9);
    }

    #[test]
    fn joint_count_mismatch_is_an_error() {
        let frames = vec![FrameDetections {
            view_id: "v".into(),
            frame: 0,
            joints: vec![None; 3],
        }];
        assert!(matches!(
            process_view_sequence(&frames, &view(), 2, &ConfidenceConfig::default()),
            Err(Error::TopologyMismatch(_))
        ));
    }
}
