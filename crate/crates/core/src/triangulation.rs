//! Confidence-weighted linear triangulation and body/hand merging.
//!
//! Every view contributes the two DLT rows `x·P³ − P¹` and `y·P³ − P²`,
//! both scaled by that view's gated confidence. The homogeneous solution is
//! the right singular vector of the smallest singular value of the stacked
//! weighted system.

use nalgebra::{DMatrix, Matrix2x4, Vector4};

use crate::confidence::{Detection2D, FrameDetections};
use crate::error::{Error, Result};
use crate::geometry::{self, CameraView, Rig};
use crate::skeleton::{Joint3D, Part, SkeletonSet3D, SkeletonTopology};

use std::sync::Arc;

/// Fewest contributing views for a joint to count as triangulated.
pub const MIN_SUPPORT: usize = 2;

/// Relative gap below which the two smallest singular values are treated
/// as equal and the null direction as ambiguous.
pub const DEGENERACY_RTOL: f64 = 1e-12;

pub fn build_dlt_rows(view: &CameraView, det: &Detection2D) -> Matrix2x4<f64> {
    let p = view.projection();
    let r3 = p.row(2);
    let mut rows = Matrix2x4::zeros();
    rows.set_row(0, &(det.x * r3 - p.row(0)));
    rows.set_row(1, &(det.y * r3 - p.row(1)));
    rows
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointStatus {
    Ok,
    InsufficientSupport,
    /// Smallest singular value not isolated, or the solution lies at infinity.
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointEstimate {
    pub joint: Joint3D,
    pub status: JointStatus,
}

/// Triangulates one joint from `views.len()` optional detections with
/// per-view weights. Views with weight 0 (or no detection) are dropped
/// before the system is built.
pub fn triangulate_joint(
    views: &[&CameraView],
    dets: &[Option<Detection2D>],
    weights: &[f64],
) -> Result<JointEstimate> {
    if views.len() != dets.len() || views.len() != weights.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} views, {} detections, {} weights",
            views.len(),
            dets.len(),
            weights.len()
        )));
    }
    let used: Vec<(&CameraView, Detection2D, f64)> = views
        .iter()
        .zip(dets)
        .zip(weights)
        .filter_map(|((v, d), &w)| match d {
            Some(d) if w > 0.0 => Some((*v, *d, w)),
            _ => None,
        })
        .collect();
    let support = used.len();
    if support < MIN_SUPPORT {
        return Ok(JointEstimate {
            joint: Joint3D::invalid(support),
            status: JointStatus::InsufficientSupport,
        });
    }

    let mut a = DMatrix::<f64>::zeros(2 * support, 4);
    for (i, (view, det, w)) in used.iter().enumerate() {
        let rows = build_dlt_rows(view, det) * *w;
        a.view_mut((2 * i, 0), (2, 4)).copy_from(&rows);
    }
    let degenerate = JointEstimate {
        joint: Joint3D::invalid(support),
        status: JointStatus::Degenerate,
    };
    let svd = a.svd(false, true);
    let Some(v_t) = svd.v_t else {
        return Ok(degenerate);
    };
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let s = &svd.singular_values;
    let (smallest, second, largest) = (s[order[0]], s[order[1]], s[order[order.len() - 1]]);
    if second - smallest <= DEGENERACY_RTOL * largest {
        return Ok(degenerate);
    }
    let x: Vector4<f64> = Vector4::from_iterator(v_t.row(order[0]).iter().copied());
    if x.w.abs() <= f64::EPSILON * x.xyz().norm() || !x.iter().all(|c| c.is_finite()) {
        return Ok(degenerate);
    }
    let position = x.xyz() / x.w;

    let mut err_sum = 0.0;
    let mut w_sum = 0.0;
    for (view, det, w) in &used {
        let e = match geometry::project_point(view, &position) {
            Ok(p) => ((p.x - det.x).powi(2) + (p.y - det.y).powi(2)).sqrt(),
            Err(_) => return Ok(degenerate),
        };
        err_sum += w * e;
        w_sum += w;
    }
    Ok(JointEstimate {
        joint: Joint3D {
            position,
            valid: true,
            support,
            residual: err_sum / w_sum,
        },
        status: JointStatus::Ok,
    })
}

/// Triangulates every joint of one frame. `frame_dets` holds one entry per
/// view (any order, matched by id); detection confidences are the weights.
pub fn triangulate_frame(
    rig: &Rig,
    frame_dets: &[FrameDetections],
    topology: &Arc<SkeletonTopology>,
) -> Result<SkeletonSet3D> {
    let frame = frame_dets.first().map(|f| f.frame).unwrap_or(0);
    let mut views = Vec::with_capacity(frame_dets.len());
    for f in frame_dets {
        if f.frame != frame {
            return Err(Error::FrameMismatch(frame, f.frame));
        }
        if f.joints.len() != topology.len() {
            return Err(Error::TopologyMismatch(format!(
                "view {} has {} joints, topology has {}",
                f.view_id,
                f.joints.len(),
                topology.len()
            )));
        }
        let view = rig.view(&f.view_id).ok_or_else(|| {
            Error::DimensionMismatch(format!("view {} is not part of the rig", f.view_id))
        })?;
        views.push(view);
    }

    let mut joints = Vec::with_capacity(topology.len());
    let mut dets = Vec::with_capacity(views.len());
    let mut weights = Vec::with_capacity(views.len());
    for j in 0..topology.len() {
        dets.clear();
        weights.clear();
        for f in frame_dets {
            let d = f.joints[j];
            dets.push(d);
            weights.push(d.map_or(0.0, |d| d.confidence));
        }
        let est = triangulate_joint(&views, &dets, &weights)?;
        if est.status == JointStatus::Degenerate {
            log::debug!("frame {frame}: joint {} is degenerate", topology.joints()[j].name);
        }
        joints.push(est.joint);
    }
    SkeletonSet3D::new(topology.clone(), frame, joints)
}

/// Combines a body-sourced and a hand-sourced set over one unified topology.
///
/// Body-part joints come from `body`, hand-part joints from `hands`. Where a
/// hand root attaches to a body wrist, a valid hand value overrides the
/// body wrist.
pub fn merge_keypoints(body: &SkeletonSet3D, hands: &SkeletonSet3D) -> Result<SkeletonSet3D> {
    if body.frame != hands.frame {
        return Err(Error::FrameMismatch(body.frame, hands.frame));
    }
    if !Arc::ptr_eq(&body.topology, &hands.topology) && body.topology != hands.topology {
        return Err(Error::TopologyMismatch(
            "body and hand sets use different topologies".into(),
        ));
    }
    let topo = &body.topology;
    if body.joints.len() != topo.len() || hands.joints.len() != topo.len() {
        return Err(Error::TopologyMismatch("joint count differs from topology".into()));
    }
    let mut joints: Vec<Joint3D> = (0..topo.len())
        .map(|i| match topo.part(i) {
            Part::Body => body.joints[i],
            Part::LeftHand | Part::RightHand => hands.joints[i],
        })
        .collect();
    for (hand_root, wrist) in topo.wrist_links() {
        if hands.joints[hand_root].valid {
            joints[wrist] = hands.joints[hand_root];
        }
    }
    SkeletonSet3D::new(topo.clone(), body.frame, joints)
}
