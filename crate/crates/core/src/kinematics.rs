//! Capsule-skeleton body model: parameters, forward kinematics and its
//! Jacobian.
//!
//! Every non-root joint is reached from its parent through a bone whose rest
//! vector is scaled by `exp(β_bone)` and rotated by the parent's cumulative
//! rotation. Cumulative rotations compose down the chain as
//! `R_j = R_parent · Exp(θ_j)`, with the root using `Exp(root_rotation)` in
//! place of a parent. Each bone carries a capsule used for silhouettes.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::skeleton::SkeletonTopology;

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues exponential of an axis-angle vector.
pub fn exp_so3(v: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::new(*v).into_inner()
}

/// Right Jacobian of the SO(3) exponential:
/// `Exp(v + δ) ≈ Exp(v)·Exp(J_r(v)·δ)`.
pub fn right_jacobian(v: &Vector3<f64>) -> Matrix3<f64> {
    let phi2 = v.norm_squared();
    let k = skew(v);
    let (a, b) = if phi2 < 1e-8 {
        // series of (1−cos φ)/φ² and (φ−sin φ)/φ³
        (0.5 - phi2 / 24.0, 1.0 / 6.0 - phi2 / 120.0)
    } else {
        let phi = phi2.sqrt();
        ((1.0 - phi.cos()) / phi2, (phi - phi.sin()) / (phi2 * phi))
    };
    Matrix3::identity() - a * k + b * k * k
}

/// Equivalent axis-angle with magnitude in `[0, π]`.
pub fn canonical_axis_angle(v: &Vector3<f64>) -> Vector3<f64> {
    let phi = v.norm();
    if phi <= PI {
        return *v;
    }
    let wrapped = phi - 2.0 * PI * (phi / (2.0 * PI)).round();
    v * (wrapped / phi)
}

/// Shape and pose of the capsule model for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicParams {
    /// Log-scale per bone.
    pub beta: Vec<f64>,
    /// Axis-angle per joint, flattened `[x0, y0, z0, x1, ...]`.
    pub theta: Vec<f64>,
    pub root_rotation: Vector3<f64>,
    pub root_translation: Vector3<f64>,
}

impl KinematicParams {
    pub fn zeros(model: &CapsuleModel) -> Self {
        Self {
            beta: vec![0.0; model.bone_count()],
            theta: vec![0.0; 3 * model.joint_count()],
            root_rotation: Vector3::zeros(),
            root_translation: Vector3::zeros(),
        }
    }

    pub fn len(&self) -> usize {
        self.beta.len() + self.theta.len() + 6
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn joint_rotation(&self, joint: usize) -> Vector3<f64> {
        Vector3::new(
            self.theta[3 * joint],
            self.theta[3 * joint + 1],
            self.theta[3 * joint + 2],
        )
    }

    pub fn set_joint_rotation(&mut self, joint: usize, v: &Vector3<f64>) {
        self.theta[3 * joint..3 * joint + 3].copy_from_slice(v.as_slice());
    }

    /// Flattened as `[β | θ | root_rotation | root_translation]`.
    pub fn to_vector(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&self.beta);
        out.extend_from_slice(&self.theta);
        out.extend_from_slice(self.root_rotation.as_slice());
        out.extend_from_slice(self.root_translation.as_slice());
        DVector::from_vec(out)
    }

    pub fn from_vector(model: &CapsuleModel, v: &DVector<f64>) -> Result<Self> {
        let (nb, nt) = (model.bone_count(), 3 * model.joint_count());
        if v.len() != nb + nt + 6 {
            return Err(Error::DimensionMismatch(format!(
                "parameter vector of {} for a model needing {}",
                v.len(),
                nb + nt + 6
            )));
        }
        let s = v.as_slice();
        Ok(Self {
            beta: s[..nb].to_vec(),
            theta: s[nb..nb + nt].to_vec(),
            root_rotation: Vector3::from_row_slice(&s[nb + nt..nb + nt + 3]),
            root_translation: Vector3::from_row_slice(&s[nb + nt + 3..]),
        })
    }

    /// Every axis-angle (per joint and root) reduced to magnitude ≤ π.
    pub fn canonicalized(&self) -> Self {
        let mut out = self.clone();
        for j in 0..self.theta.len() / 3 {
            out.set_joint_rotation(j, &canonical_axis_angle(&self.joint_rotation(j)));
        }
        out.root_rotation = canonical_axis_angle(&self.root_rotation);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

/// Articulated capsule skeleton standing in for a learned body mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleModel {
    topology: Arc<SkeletonTopology>,
    rest_offsets: Vec<Vector3<f64>>,
    /// Indexed by bone.
    capsule_radii: Vec<f64>,
    bone_of_joint: Vec<Option<usize>>,
    joint_of_bone: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    topology_ref: String,
    rest_offsets: Vec<[f64; 3]>,
    capsule_radii: Vec<f64>,
}

impl CapsuleModel {
    /// `rest_offsets` is per joint (the root's entry is relative to the root
    /// translation); `capsule_radii` is per bone in joint order. Zero offsets
    /// are accepted only for hand roots attached to a body wrist.
    pub fn new(
        topology: Arc<SkeletonTopology>,
        rest_offsets: Vec<Vector3<f64>>,
        capsule_radii: Vec<f64>,
    ) -> Result<Self> {
        if rest_offsets.len() != topology.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} rest offsets for {} joints",
                rest_offsets.len(),
                topology.len()
            )));
        }
        let mut bone_of_joint = vec![None; topology.len()];
        let mut joint_of_bone = Vec::new();
        for (j, slot) in bone_of_joint.iter_mut().enumerate() {
            if topology.parent(j).is_some() {
                *slot = Some(joint_of_bone.len());
                joint_of_bone.push(j);
            }
        }
        if capsule_radii.len() != joint_of_bone.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} capsule radii for {} bones",
                capsule_radii.len(),
                joint_of_bone.len()
            )));
        }
        let links: Vec<usize> = topology.wrist_links().iter().map(|l| l.0).collect();
        for &j in &joint_of_bone {
            if rest_offsets[j].norm() == 0.0 && !links.contains(&j) {
                return Err(Error::DimensionMismatch(format!(
                    "bone ending at {} has a zero rest offset",
                    topology.joints()[j].name
                )));
            }
        }
        if let Some(r) = capsule_radii.iter().find(|r| !(**r > 0.0)) {
            return Err(Error::DimensionMismatch(format!("capsule radius {r} is not positive")));
        }
        Ok(Self {
            topology,
            rest_offsets,
            capsule_radii,
            bone_of_joint,
            joint_of_bone,
        })
    }

    pub fn load(path: &Path, topology: Arc<SkeletonTopology>) -> Result<Self> {
        let file: ModelFile = io::read_json(path)?;
        Self::new(
            topology,
            file.rest_offsets.into_iter().map(Vector3::from).collect(),
            file.capsule_radii,
        )
        .map_err(|e| Error::input(path, e.to_string()))
    }

    /// Reads only the topology reference of a model file.
    pub fn topology_ref(path: &Path) -> Result<String> {
        let file: ModelFile = io::read_json(path)?;
        Ok(file.topology_ref)
    }

    pub fn save(&self, path: &Path, topology_ref: &str) -> Result<()> {
        io::write_json_atomic(
            path,
            &ModelFile {
                topology_ref: topology_ref.to_string(),
                rest_offsets: self.rest_offsets.iter().map(|v| [v.x, v.y, v.z]).collect(),
                capsule_radii: self.capsule_radii.clone(),
            },
        )
    }

    pub fn topology(&self) -> &Arc<SkeletonTopology> {
        &self.topology
    }

    pub fn joint_count(&self) -> usize {
        self.topology.len()
    }

    pub fn bone_count(&self) -> usize {
        self.joint_of_bone.len()
    }

    pub fn param_count(&self) -> usize {
        self.bone_count() + 3 * self.joint_count() + 6
    }

    pub fn rest_offsets(&self) -> &[Vector3<f64>] {
        &self.rest_offsets
    }

    pub fn capsule_radii(&self) -> &[f64] {
        &self.capsule_radii
    }

    pub fn bone_of_joint(&self, joint: usize) -> Option<usize> {
        self.bone_of_joint[joint]
    }

    /// `(parent, child)` joint pair for each bone.
    pub fn bone_endpoints(&self, bone: usize) -> (usize, usize) {
        let child = self.joint_of_bone[bone];
        (self.topology.parent(child).expect("bones have parents"), child)
    }

    /// Same model with every radius multiplied by `factor`.
    pub fn with_scaled_radii(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.topology.clone(),
            self.rest_offsets.clone(),
            self.capsule_radii.iter().map(|r| r * factor).collect(),
        )
    }

    fn check(&self, params: &KinematicParams) -> Result<()> {
        if params.beta.len() != self.bone_count() || params.theta.len() != 3 * self.joint_count() {
            return Err(Error::DimensionMismatch(format!(
                "params have {} β / {} θ, model needs {} / {}",
                params.beta.len(),
                params.theta.len(),
                self.bone_count(),
                3 * self.joint_count()
            )));
        }
        Ok(())
    }

    /// Upper-body-plus-hands model matching
    /// [`SkeletonTopology::default_upper_body`]. World axes: x to the
    /// subject's left, y forward, z up; the root is the nose.
    pub fn default_upper_body() -> Self {
        let topology = Arc::new(SkeletonTopology::default_upper_body());
        let mut offsets = vec![Vector3::zeros(); topology.len()];
        let mut radii_by_joint = vec![0.0; topology.len()];
        let mut set = |name: &str, off: [f64; 3], radius: f64| {
            let j = topology.index_of(name).expect("default joint");
            offsets[j] = Vector3::from(off);
            radii_by_joint[j] = radius;
        };
        for (side, s) in [("left", 1.0), ("right", -1.0)] {
            set(&format!("{side}_eye"), [s * 32.0, -10.0, 35.0], 22.0);
            set(&format!("{side}_ear"), [s * 45.0, -70.0, -5.0], 28.0);
            set(&format!("{side}_shoulder"), [s * 175.0, -80.0, -210.0], 55.0);
            set(&format!("{side}_elbow"), [s * 25.0, 110.0, -250.0], 45.0);
            set(&format!("{side}_wrist"), [s * -35.0, 245.0, 10.0], 35.0);
            set(&format!("{side}_hip"), [s * -50.0, 10.0, -500.0], 85.0);
            set(&format!("{side}_hand_wrist"), [0.0, 0.0, 0.0], 28.0);
            let fingers: [(&str, f64, [f64; 3], f64); 5] = [
                ("thumb", -1.0, [-30.0, 30.0, 0.0], 10.0),
                ("index", 0.0, [-20.0, 85.0, 0.0], 9.0),
                ("middle", 0.0, [0.0, 88.0, 0.0], 9.0),
                ("ring", 0.0, [18.0, 82.0, 0.0], 8.5),
                ("pinky", 0.0, [34.0, 72.0, 0.0], 8.0),
            ];
            for (finger, thumbness, base, radius) in fingers {
                // mirrored across the body midline
                let base = [-s * base[0], base[1], base[2]];
                set(&format!("{side}_{finger}_1"), base, radius + 3.0);
                let phalanx: [f64; 3] = if thumbness < 0.0 {
                    [-s * 18.0, 22.0, -4.0]
                } else {
                    [0.0, 32.0, -6.0]
                };
                for (k, shrink) in [(2, 1.0), (3, 0.75), (4, 0.6)] {
                    set(
                        &format!("{side}_{finger}_{k}"),
                        [phalanx[0] * shrink, phalanx[1] * shrink, phalanx[2] * shrink],
                        radius * (1.05 - 0.1 * f64::from(k)),
                    );
                }
            }
        }
        let radii: Vec<f64> = (0..topology.len())
            .filter(|&j| topology.parent(j).is_some())
            .map(|j| radii_by_joint[j])
            .collect();
        Self::new(topology, offsets, radii).expect("default model is well formed")
    }
}

/// Joint positions and cumulative rotations for one parameter set.
#[derive(Debug, Clone)]
pub struct Posed {
    pub positions: Vec<Vector3<f64>>,
    pub rotations: Vec<Matrix3<f64>>,
}

pub fn pose(model: &CapsuleModel, params: &KinematicParams) -> Result<Posed> {
    model.check(params)?;
    let topo = model.topology();
    let root_rot = exp_so3(&params.root_rotation);
    let mut positions = Vec::with_capacity(topo.len());
    let mut rotations: Vec<Matrix3<f64>> = Vec::with_capacity(topo.len());
    for j in 0..topo.len() {
        let local = exp_so3(&params.joint_rotation(j));
        let (pos, rot) = match topo.parent(j) {
            None => (
                params.root_translation + root_rot * model.rest_offsets[j],
                root_rot * local,
            ),
            Some(p) => {
                let bone = model.bone_of_joint[j].expect("non-root joint has a bone");
                let scale = params.beta[bone].exp();
                (
                    positions[p] + rotations[p] * (model.rest_offsets[j] * scale),
                    rotations[p] * local,
                )
            }
        };
        positions.push(pos);
        rotations.push(rot);
    }
    Ok(Posed {
        positions,
        rotations,
    })
}

pub fn forward_kinematics(model: &CapsuleModel, params: &KinematicParams) -> Result<Vec<Vector3<f64>>> {
    Ok(pose(model, params)?.positions)
}

/// Forward kinematics plus the dense `3J × P` Jacobian of all joint
/// positions with respect to the flattened parameter vector.
pub fn forward_kinematics_jacobian(
    model: &CapsuleModel,
    params: &KinematicParams,
) -> Result<(Vec<Vector3<f64>>, DMatrix<f64>)> {
    let posed = pose(model, params)?;
    let topo = model.topology();
    let n = topo.len();
    let nb = model.bone_count();
    let theta_col = |j: usize| nb + 3 * j;
    let rot_col = nb + 3 * n;
    let trans_col = rot_col + 3;
    let mut jac = DMatrix::zeros(3 * n, model.param_count());
    let x = &posed.positions;

    let root_rot = exp_so3(&params.root_rotation);
    let root_block = root_rot * right_jacobian(&params.root_rotation);
    // per joint: R_j · J_r(θ_j), the world-frame axis map of a θ_j perturbation
    let axis_maps: Vec<Matrix3<f64>> = (0..n)
        .map(|j| posed.rotations[j] * right_jacobian(&params.joint_rotation(j)))
        .collect();

    for k in 0..n {
        let rows = 3 * k;
        jac.view_mut((rows, trans_col), (3, 3)).copy_from(&Matrix3::identity());
        let lever = x[k] - params.root_translation;
        jac.view_mut((rows, rot_col), (3, 3))
            .copy_from(&(-skew(&lever) * root_block));

        // walk up: every ancestor's rotation moves k, every bone on the
        // chain from the root to k stretches it
        let mut child = k;
        while let Some(p) = topo.parent(child) {
            let bone = model.bone_of_joint[child].expect("non-root joint has a bone");
            let d_beta = posed.rotations[p] * model.rest_offsets[child] * params.beta[bone].exp();
            jac.view_mut((rows, bone), (3, 1)).copy_from(&d_beta);
            let lever = x[k] - x[p];
            jac.view_mut((rows, theta_col(p)), (3, 3))
                .copy_from(&(-skew(&lever) * axis_maps[p]));
            child = p;
        }
    }
    Ok((posed.positions, jac))
}
