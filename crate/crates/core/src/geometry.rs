//! Pinhole cameras and the multi-view rig.
//!
//! All lengths are millimeters and all image coordinates are pixels in the
//! crop frame of each view. A [`CameraView`] keeps its 3×4 projection
//! precomputed because every triangulation row reads it.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

/// Below this magnitude a homogeneous depth cannot be divided out.
pub const MIN_DEPTH: f64 = 1e-9;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    id: String,
    intrinsics: Matrix3<f64>,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    projection: Matrix3x4<f64>,
    width: u32,
    height: u32,
}

impl CameraView {
    pub fn new(
        id: impl Into<String>,
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: u32,
        height: u32,
    ) -> Self {
        let projection = compose_projection(&intrinsics, &rotation, &translation);
        Self {
            id: id.into(),
            intrinsics,
            rotation,
            translation,
            projection,
            width,
            height,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn projection(&self) -> &Matrix3x4<f64> {
        &self.projection
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// Mean of the two focal lengths, used to project metric radii.
    pub fn focal(&self) -> f64 {
        0.5 * (self.intrinsics[(0, 0)] + self.intrinsics[(1, 1)])
    }

    /// Homogeneous image coordinates `P·[X;1]`.
    pub fn project_homogeneous(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.projection * Vector4::new(point.x, point.y, point.z, 1.0)
    }

    /// Depth of a world point along this camera's optical axis.
    pub fn depth(&self, point: &Vector3<f64>) -> f64 {
        (self.rotation * point + self.translation).z
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }
}

fn compose_projection(
    intrinsics: &Matrix3<f64>,
    rotation: &Matrix3<f64>,
    translation: &Vector3<f64>,
) -> Matrix3x4<f64> {
    let mut extrinsic = Matrix3x4::zeros();
    extrinsic.fixed_view_mut::<3, 3>(0, 0).copy_from(rotation);
    extrinsic.set_column(3, translation);
    intrinsics * extrinsic
}

/// Standard pinhole projection of a world point to pixels.
pub fn project_point(view: &CameraView, point: &Vector3<f64>) -> Result<Vector2<f64>> {
    let h = view.project_homogeneous(point);
    if h.z.abs() < MIN_DEPTH {
        return Err(Error::DegenerateDepth { depth: h.z });
    }
    Ok(Vector2::new(h.x / h.z, h.y / h.z))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rig {
    pub views: Vec<CameraView>,
    pub units: String,
}

impl Rig {
    pub fn new(views: Vec<CameraView>) -> Self {
        Self {
            views,
            units: "mm".to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn view(&self, id: &str) -> Option<&CameraView> {
        self.views.iter().find(|v| v.id == id)
    }

    /// Reads a rig file and rejects it if any camera invariant fails.
    pub fn load(path: &Path) -> Result<Self> {
        let text = io::read_to_string(path)?;
        let file: RigFile = serde_json::from_str(&text)
            .map_err(|e| Error::input(path, format!("malformed rig: {e}")))?;
        let rig = file.into_rig();
        let violations = validate_rig(&rig);
        if !violations.is_empty() {
            let joined: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            return Err(Error::input(path, joined.join("; ")));
        }
        Ok(rig)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json_atomic(path, &RigFile::from_rig(self))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub view: Option<String>,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.view {
            Some(id) => write!(f, "view {id}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Reports every broken rig invariant. An empty list means the rig is usable.
pub fn validate_rig(rig: &Rig) -> Vec<Violation> {
    let mut out = Vec::new();
    if rig.views.len() < 2 {
        out.push(Violation {
            view: None,
            message: format!("needs ≥2 views, got {}", rig.views.len()),
        });
    }
    let mut seen = HashSet::new();
    for view in &rig.views {
        let mut flag = |message: String| {
            out.push(Violation {
                view: Some(view.id.clone()),
                message,
            })
        };
        if !seen.insert(view.id.as_str()) {
            flag("duplicate view id".into());
        }
        let r = &view.rotation;
        let gram_err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(gram_err <= ORTHONORMAL_TOL) {
            flag(format!("rotation is not orthonormal (|RᵀR−I| = {gram_err:e})"));
        } else if (r.determinant() - 1.0).abs() > ORTHONORMAL_TOL {
            flag("rotation has determinant −1".into());
        }
        let expected = compose_projection(&view.intrinsics, &view.rotation, &view.translation);
        if (expected - view.projection).abs().max() > ORTHONORMAL_TOL {
            flag("projection does not equal K·[R|t]".into());
        }
        if view.width == 0 || view.height == 0 {
            flag(format!("empty crop {}×{}", view.width, view.height));
        }
        if !(view.intrinsics[(0, 0)] > 0.0 && view.intrinsics[(1, 1)] > 0.0) {
            flag("focal lengths must be positive".into());
        }
        if !view.translation.iter().chain(view.intrinsics.iter()).all(|v| v.is_finite()) {
            flag("non-finite calibration entry".into());
        }
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct RigFile {
    units: String,
    views: Vec<ViewFile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ViewFile {
    id: String,
    #[serde(rename = "K")]
    k: [f64; 9],
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
    width: u32,
    height: u32,
}

impl RigFile {
    fn into_rig(self) -> Rig {
        let views = self
            .views
            .into_iter()
            .map(|v| {
                CameraView::new(
                    v.id,
                    Matrix3::from_row_slice(&v.k),
                    Matrix3::from_row_slice(&v.r),
                    Vector3::from_row_slice(&v.t),
                    v.width,
                    v.height,
                )
            })
            .collect();
        Rig {
            views,
            units: self.units,
        }
    }

    fn from_rig(rig: &Rig) -> Self {
        let row_major = |m: &Matrix3<f64>| {
            let mut out = [0.0; 9];
            for r in 0..3 {
                for c in 0..3 {
                    out[3 * r + c] = m[(r, c)];
                }
            }
            out
        };
        RigFile {
            units: rig.units.clone(),
            views: rig
                .views
                .iter()
                .map(|v| ViewFile {
                    id: v.id.clone(),
                    k: row_major(&v.intrinsics),
                    r: row_major(&v.rotation),
                    t: [v.translation.x, v.translation.y, v.translation.z],
                    width: v.width,
                    height: v.height,
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_view(id: &str) -> CameraView {
        CameraView::new(
            id,
            Matrix3::identity(),
            Matrix3::identity(),
            Vector3::zeros(),
            100,
            100,
        )
    }

    #[test]
    fn identity_camera_projects_by_depth_division() {
        let v = identity_view("a");
        let p = project_point(&v, &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(p, Vector2::new(0.0, 0.0));
        let p = project_point(&v, &Vector3::new(2.0, 3.0, 2.0)).unwrap();
        assert_eq!(p, Vector2::new(1.0, 1.5));
    }

    #[test]
    fn zero_depth_is_rejected() {
        let v = identity_view("a");
        assert!(matches!(
            project_point(&v, &Vector3::new(1.0, 1.0, 0.0)),
            Err(Error::DegenerateDepth { .. })
        ));
    }

    #[test]
    fn single_view_rig_reports_view_count() {
        let rig = Rig::new(vec![identity_view("a")]);
        let v = validate_rig(&rig);
        assert_eq!(v.len(), 1);
        assert!(v[0].message.contains("needs ≥2 views"));
    }

    #[test]
    fn skewed_rotation_is_named() {
        let mut r = Matrix3::identity();
        r[(0, 1)] = 0.1;
        let bad = CameraView::new("cam_b", Matrix3::identity(), r, Vector3::zeros(), 10, 10);
        let rig = Rig::new(vec![identity_view("cam_a"), bad]);
        let v = validate_rig(&rig);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].view.as_deref(), Some("cam_b"));
    }

    #[test]
    fn duplicate_ids_and_empty_crop_are_reported() {
        let mut b = identity_view("a");
        b.width = 0;
        let rig = Rig::new(vec![identity_view("a"), b]);
        assert_eq!(validate_rig(&rig).len(), 2);
    }

    #[test]
    fn projection_is_k_times_extrinsics() {
        let k = Matrix3::new(200.0, 0.0, 80.0, 0.0, 210.0, 60.0, 0.0, 0.0, 1.0);
        let r = nalgebra::Rotation3::from_euler_angles(0.1, -0.2, 0.3).into_inner();
        let t = Vector3::new(10.0, -20.0, 2500.0);
        let v = CameraView::new("c", k, r, t, 160, 120);
        let x = Vector3::new(30.0, -40.0, 50.0);
        let cam = r * x + t;
        let expected = Vector2::new(
            k[(0, 0)] * cam.x / cam.z + k[(0, 2)],
            k[(1, 1)] * cam.y / cam.z + k[(1, 2)],
        );
        let got = project_point(&v, &x).unwrap();
        assert!((got - expected).norm() < 1e-9);
        assert!((v.center() - (-(r.transpose() * t))).norm() < 1e-12);
    }
}
