//! Joint topology and per-frame 3D keypoint sets.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Body,
    LeftHand,
    RightHand,
}

impl Part {
    pub fn is_hand(self) -> bool {
        matches!(self, Part::LeftHand | Part::RightHand)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointSpec {
    pub name: String,
    pub parent: Option<usize>,
    pub part: Part,
}

/// Ordered joint list, topologically sorted (every parent precedes its
/// children).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkeletonTopology {
    joints: Vec<JointSpec>,
    body_count: usize,
    hand_count: usize,
}

#[derive(Serialize, Deserialize)]
struct TopologyFile {
    joints: Vec<JointSpec>,
}

impl SkeletonTopology {
    pub fn new(joints: Vec<JointSpec>) -> Result<Self> {
        let mut names = HashMap::new();
        for (i, j) in joints.iter().enumerate() {
            if names.insert(j.name.as_str(), i).is_some() {
                return Err(Error::TopologyMismatch(format!("duplicate joint name {}", j.name)));
            }
            if let Some(p) = j.parent {
                if p >= i {
                    return Err(Error::TopologyMismatch(format!(
                        "joint {} has parent {p} which does not precede it",
                        j.name
                    )));
                }
            }
        }
        let roots: Vec<&JointSpec> = joints.iter().filter(|j| j.parent.is_none()).collect();
        let single_global = roots.len() == 1;
        let one_per_part = [Part::Body, Part::LeftHand, Part::RightHand]
            .iter()
            .all(|&part| {
                let present = joints.iter().any(|j| j.part == part);
                let n = roots.iter().filter(|r| r.part == part).count();
                if present { n == 1 } else { n == 0 }
            });
        if !(single_global || one_per_part) {
            return Err(Error::TopologyMismatch(format!(
                "expected a single root or one root per part, found {}",
                roots.len()
            )));
        }
        let body_count = joints.iter().filter(|j| j.part == Part::Body).count();
        let hand_count = joints.len() - body_count;
        Ok(Self {
            joints,
            body_count,
            hand_count,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: TopologyFile = io::read_json(path)?;
        Self::new(file.joints).map_err(|e| Error::input(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json_atomic(
            path,
            &TopologyFile {
                joints: self.joints.clone(),
            },
        )
    }

    pub fn joints(&self) -> &[JointSpec] {
        &self.joints
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn body_count(&self) -> usize {
        self.body_count
    }

    pub fn hand_count(&self) -> usize {
        self.hand_count
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.joints[joint].parent
    }

    pub fn part(&self, joint: usize) -> Part {
        self.joints[joint].part
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    /// Joints whose part is one of `parts`, in topology order.
    pub fn indices_of(&self, parts: &[Part]) -> Vec<usize> {
        (0..self.len()).filter(|&i| parts.contains(&self.joints[i].part)).collect()
    }

    pub fn hand_indices(&self) -> Vec<usize> {
        self.indices_of(&[Part::LeftHand, Part::RightHand])
    }

    pub fn body_indices(&self) -> Vec<usize> {
        self.indices_of(&[Part::Body])
    }

    /// `(hand_root, body_joint)` pairs: hand joints attached directly to a
    /// body joint. Both name the same physical point (the wrist), measured
    /// once by each source.
    pub fn wrist_links(&self) -> Vec<(usize, usize)> {
        self.joints
            .iter()
            .enumerate()
            .filter_map(|(i, j)| match j.parent {
                Some(p) if j.part.is_hand() && self.joints[p].part == Part::Body => Some((i, p)),
                _ => None,
            })
            .collect()
    }

    /// Upper body (13 joints, COCO order) plus two 21-joint hands. Each hand
    /// wrist hangs off the matching body wrist.
    pub fn default_upper_body() -> Self {
        let body: [(&str, Option<usize>); 13] = [
            ("nose", None),
            ("left_eye", Some(0)),
            ("right_eye", Some(0)),
            ("left_ear", Some(1)),
            ("right_ear", Some(2)),
            ("left_shoulder", Some(0)),
            ("right_shoulder", Some(0)),
            ("left_elbow", Some(5)),
            ("right_elbow", Some(6)),
            ("left_wrist", Some(7)),
            ("right_wrist", Some(8)),
            ("left_hip", Some(5)),
            ("right_hip", Some(6)),
        ];
        let mut joints: Vec<JointSpec> = body
            .iter()
            .map(|&(name, parent)| JointSpec {
                name: name.into(),
                parent,
                part: Part::Body,
            })
            .collect();
        for (side, part, wrist) in [("left", Part::LeftHand, 9), ("right", Part::RightHand, 10)] {
            let root = joints.len();
            joints.push(JointSpec {
                name: format!("{side}_hand_wrist"),
                parent: Some(wrist),
                part,
            });
            for finger in ["thumb", "index", "middle", "ring", "pinky"] {
                let mut parent = root;
                for k in 1..=4 {
                    joints.push(JointSpec {
                        name: format!("{side}_{finger}_{k}"),
                        parent: Some(parent),
                        part,
                    });
                    parent = joints.len() - 1;
                }
            }
        }
        Self::new(joints).expect("default topology is well formed")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Joint3D {
    pub position: Vector3<f64>,
    pub valid: bool,
    /// Number of views with non-zero gated confidence.
    pub support: usize,
    /// Confidence-weighted mean reprojection error, pixels.
    pub residual: f64,
}

impl Joint3D {
    pub fn invalid(support: usize) -> Self {
        Self {
            position: Vector3::repeat(f64::NAN),
            valid: false,
            support,
            residual: f64::NAN,
        }
    }

    pub fn exact(position: Vector3<f64>) -> Self {
        Self {
            position,
            valid: true,
            support: 0,
            residual: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSet3D {
    pub topology: Arc<SkeletonTopology>,
    pub frame: i64,
    pub joints: Vec<Joint3D>,
}

impl SkeletonSet3D {
    pub fn new(topology: Arc<SkeletonTopology>, frame: i64, joints: Vec<Joint3D>) -> Result<Self> {
        if joints.len() != topology.len() {
            return Err(Error::TopologyMismatch(format!(
                "{} joints for a topology of {}",
                joints.len(),
                topology.len()
            )));
        }
        Ok(Self {
            topology,
            frame,
            joints,
        })
    }

    pub fn empty(topology: Arc<SkeletonTopology>, frame: i64) -> Self {
        let joints = vec![Joint3D::invalid(0); topology.len()];
        Self {
            topology,
            frame,
            joints,
        }
    }

    pub fn from_positions(
        topology: Arc<SkeletonTopology>,
        frame: i64,
        positions: &[Vector3<f64>],
    ) -> Result<Self> {
        let joints = positions.iter().copied().map(Joint3D::exact).collect();
        Self::new(topology, frame, joints)
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.joints.iter().map(|j| j.position).collect()
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.joints.iter().map(|j| j.valid).collect()
    }

    /// Copy with every joint outside `parts` marked invalid.
    pub fn restricted_to(&self, parts: &[Part]) -> Self {
        let mut out = self.clone();
        for (i, j) in out.joints.iter_mut().enumerate() {
            if !parts.contains(&self.topology.part(i)) {
                *j = Joint3D::invalid(0);
            }
        }
        out
    }

    pub fn to_record(&self) -> AnnotationRecord {
        AnnotationRecord {
            frame: self.frame,
            joints: self
                .joints
                .iter()
                .zip(self.topology.joints())
                .map(|(j, spec)| {
                    let finite = j.position.iter().all(|v| v.is_finite());
                    JointRecord {
                        name: spec.name.clone(),
                        xyz_mm: (j.valid && finite).then(|| {
                            [
                                io::round_sig(j.position.x),
                                io::round_sig(j.position.y),
                                io::round_sig(j.position.z),
                            ]
                        }),
                        valid: j.valid,
                        support: j.support,
                        residual_px: j.residual.is_finite().then(|| io::round_sig(j.residual)),
                    }
                })
                .collect(),
        }
    }

    /// Rebuilds a set from a record, matching joints by name.
    pub fn from_record(topology: Arc<SkeletonTopology>, rec: &AnnotationRecord) -> Result<Self> {
        let mut out = Self::empty(topology.clone(), rec.frame);
        for j in &rec.joints {
            let idx = topology.index_of(&j.name).ok_or_else(|| {
                Error::TopologyMismatch(format!("unknown joint {} in frame {}", j.name, rec.frame))
            })?;
            let position = match j.xyz_mm {
                Some(p) => Vector3::from(p),
                None => Vector3::repeat(f64::NAN),
            };
            out.joints[idx] = Joint3D {
                position,
                valid: j.valid && j.xyz_mm.is_some(),
                support: j.support,
                residual: j.residual_px.unwrap_or(f64::NAN),
            };
        }
        Ok(out)
    }
}

/// One line of an annotation JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub frame: i64,
    pub joints: Vec<JointRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointRecord {
    pub name: String,
    pub xyz_mm: Option<[f64; 3]>,
    pub valid: bool,
    pub support: usize,
    pub residual_px: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_topology_shape() {
        let t = SkeletonTopology::default_upper_body();
        assert_eq!(t.len(), 55);
        assert_eq!(t.body_count(), 13);
        assert_eq!(t.hand_count(), 42);
        let links = t.wrist_links();
        assert_eq!(links.len(), 2);
        assert_eq!(t.joints()[links[0].1].name, "left_wrist");
        assert_eq!(t.joints()[links[1].1].name, "right_wrist");
    }

    #[test]
    fn rejects_unsorted_parents_and_duplicate_names() {
        let j = |name: &str, parent| JointSpec {
            name: name.into(),
            parent,
            part: Part::Body,
        };
        assert!(SkeletonTopology::new(vec![j("a", Some(1)), j("b", None)]).is_err());
        assert!(SkeletonTopology::new(vec![j("a", None), j("a", Some(0))]).is_err());
        assert!(SkeletonTopology::new(vec![j("a", None), j("b", None)]).is_err());
    }

    #[test]
    fn one_root_per_part_is_accepted() {
        let joints = vec![
            JointSpec { name: "a".into(), parent: None, part: Part::Body },
            JointSpec { name: "l".into(), parent: None, part: Part::LeftHand },
            JointSpec { name: "r".into(), parent: None, part: Part::RightHand },
        ];
        assert!(SkeletonTopology::new(joints).is_ok());
    }

    #[test]
    fn record_roundtrip_keeps_invalid_joints_null() {
        let t = Arc::new(SkeletonTopology::default_upper_body());
        let mut set = SkeletonSet3D::empty(t.clone(), 4);
        set.joints[0] = Joint3D {
            position: Vector3::new(1.0, 2.0, 3.0),
            valid: true,
            support: 3,
            residual: 0.25,
        };
        let rec = set.to_record();
        assert!(rec.joints[1].xyz_mm.is_none());
        let text = serde_json::to_string(&rec).unwrap();
        let back: AnnotationRecord = serde_json::from_str(&text).unwrap();
        let again = SkeletonSet3D::from_record(t, &back).unwrap();
        assert_eq!(again.joints[0], set.joints[0]);
        assert!(!again.joints[1].valid);
    }
}
