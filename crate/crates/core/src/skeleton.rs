//! Skeleton topology, pose containers and coordinate-frame semantics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{Real, Vec3};

/// Coordinate frame a [`Pose3D`] is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    /// Root joint at the origin.
    PersonCentric,
    /// Camera coordinates, absolute depth.
    CameraCentric,
}

/// Joint set and bone tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSpec {
    pub joint_names: Vec<String>,
    /// `(parent, child)` joint index pairs.
    pub bones: Vec<(usize, usize)>,
    pub root_index: usize,
    /// Per-joint OKS falloff, unitless.
    pub oks_sigma: Vec<f64>,
}

/// 15-joint layout: pelvis (root), neck, head, then right/left arm and
/// right/left leg chains.
pub const MUPOTS15_JOINTS: [&str; 15] = [
    "pelvis",
    "neck",
    "head",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_hip",
    "l_knee",
    "l_ankle",
];

const MUPOTS15_BONES: [(usize, usize); 14] = [
    (0, 1),
    (1, 2),
    (1, 3),
    (3, 4),
    (4, 5),
    (1, 6),
    (6, 7),
    (7, 8),
    (0, 9),
    (9, 10),
    (10, 11),
    (0, 12),
    (12, 13),
    (13, 14),
];

/// COCO keypoint sigmas assigned by body part. Joints COCO lacks borrow the
/// nearest COCO part: pelvis from the hips, neck from the shoulders, head
/// from the ears.
const MUPOTS15_SIGMAS: [f64; 15] = [
    0.107, 0.079, 0.035, 0.079, 0.072, 0.062, 0.079, 0.072, 0.062, 0.107, 0.087, 0.089, 0.107,
    0.087, 0.089,
];

impl Default for SkeletonSpec {
    fn default() -> Self {
        Self::mupots15()
    }
}

impl SkeletonSpec {
    pub fn mupots15() -> Self {
        Self {
            joint_names: MUPOTS15_JOINTS.iter().map(|s| s.to_string()).collect(),
            bones: MUPOTS15_BONES.to_vec(),
            root_index: 0,
            oks_sigma: MUPOTS15_SIGMAS.to_vec(),
        }
    }

    /// Builds and validates a skeleton.
    pub fn new(
        joint_names: Vec<String>,
        bones: Vec<(usize, usize)>,
        root_index: usize,
        oks_sigma: Vec<f64>,
    ) -> Result<Self> {
        let s = Self {
            joint_names,
            bones,
            root_index,
            oks_sigma,
        };
        s.validate()?;
        Ok(s)
    }

    #[inline]
    pub fn num_joints(&self) -> usize {
        self.joint_names.len()
    }

    #[inline]
    pub fn num_bones(&self) -> usize {
        self.bones.len()
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n == name)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_joints();
        if k == 0 {
            return Err(Error::InvalidSkeleton("no joints".into()));
        }
        if self.root_index >= k {
            return Err(Error::InvalidSkeleton(format!(
                "root index {} out of range for {k} joints",
                self.root_index
            )));
        }
        if self.oks_sigma.len() != k {
            return Err(Error::InvalidSkeleton(format!(
                "{} OKS sigmas for {k} joints",
                self.oks_sigma.len()
            )));
        }
        if let Some(s) = self.oks_sigma.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidSkeleton(format!("non-positive OKS sigma {s}")));
        }
        if self.bones.len() != k - 1 {
            return Err(Error::InvalidSkeleton(format!(
                "a tree over {k} joints needs {} bones, got {}",
                k - 1,
                self.bones.len()
            )));
        }
        let mut adj = vec![Vec::new(); k];
        for &(p, c) in &self.bones {
            if p >= k || c >= k || p == c {
                return Err(Error::InvalidSkeleton(format!("bad bone ({p}, {c})")));
            }
            adj[p].push(c);
            adj[c].push(p);
        }
        let mut seen = vec![false; k];
        let mut stack = vec![self.root_index];
        seen[self.root_index] = true;
        while let Some(j) = stack.pop() {
            for &n in &adj[j] {
                if !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidSkeleton("bone graph is not connected".into()));
        }
        Ok(())
    }
}

fn check_conf<T: Real>(conf: &[T]) -> Result<()> {
    if let Some(c) = conf
        .iter()
        .find(|c| !(**c >= T::zero() && **c <= T::one()))
    {
        return Err(Error::InvalidArgument(format!(
            "confidence {c} outside [0, 1]"
        )));
    }
    Ok(())
}

/// 2D pose in pixels with per-joint confidences.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose2D<T> {
    pub joints: Vec<[T; 2]>,
    pub conf: Vec<T>,
}

impl<T: Real> Pose2D<T> {
    pub fn new(joints: Vec<[T; 2]>, conf: Vec<T>) -> Result<Self> {
        if joints.len() != conf.len() {
            return Err(Error::InvalidArgument(format!(
                "{} joints but {} confidences",
                joints.len(),
                conf.len()
            )));
        }
        check_conf(&conf)?;
        if joints.iter().any(|j| !(j[0].is_finite() && j[1].is_finite())) {
            return Err(Error::InvalidArgument("non-finite 2D joint".into()));
        }
        Ok(Self { joints, conf })
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }
}

/// 3D pose in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose3D<T> {
    pub joints: Vec<Vec3<T>>,
    pub conf: Vec<T>,
    pub frame: Frame,
    pub root: usize,
}

/// Tolerance on the root position of a person-centric pose, mm.
pub const ROOT_TOLERANCE_MM: f64 = 1e-9;

impl<T: Real> Pose3D<T> {
    pub fn new(joints: Vec<Vec3<T>>, conf: Vec<T>, frame: Frame, root: usize) -> Result<Self> {
        if joints.len() != conf.len() {
            return Err(Error::InvalidArgument(format!(
                "{} joints but {} confidences",
                joints.len(),
                conf.len()
            )));
        }
        if root >= joints.len() {
            return Err(Error::IndexOutOfRange {
                index: root,
                len: joints.len(),
            });
        }
        check_conf(&conf)?;
        if joints.iter().any(|j| !j.is_finite()) {
            return Err(Error::InvalidArgument("non-finite 3D joint".into()));
        }
        if frame == Frame::PersonCentric
            && joints[root].norm().as_f64() > ROOT_TOLERANCE_MM
        {
            return Err(Error::InvalidArgument(format!(
                "person-centric pose has root at distance {} from the origin",
                joints[root].norm()
            )));
        }
        Ok(Self {
            joints,
            conf,
            frame,
            root,
        })
    }

    /// Camera-centric pose with unit confidences.
    pub fn camera(joints: Vec<Vec3<T>>, root: usize) -> Result<Self> {
        let conf = vec![T::one(); joints.len()];
        Self::new(joints, conf, Frame::CameraCentric, root)
    }

    #[inline]
    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    #[inline]
    pub fn root_position(&self) -> Vec3<T> {
        self.joints[self.root]
    }

    pub fn mean_confidence(&self) -> T {
        if self.conf.is_empty() {
            return T::zero();
        }
        self.conf.iter().copied().sum::<T>() / T::from_usize_lossy(self.conf.len())
    }

    pub fn expect_frame(&self, expected: Frame) -> Result<()> {
        if self.frame != expected {
            return Err(Error::FrameMismatch {
                expected,
                found: self.frame,
            });
        }
        Ok(())
    }

    pub fn translated(&self, offset: Vec3<T>) -> Self {
        Self {
            joints: self.joints.iter().map(|&j| j + offset).collect(),
            ..self.clone()
        }
    }
}

/// Adds `root_position` to every joint of a person-centric pose.
pub fn to_camera_centric<T: Real>(pose: &Pose3D<T>, root_position: Vec3<T>) -> Result<Pose3D<T>> {
    pose.expect_frame(Frame::PersonCentric)?;
    let mut out = pose.translated(root_position);
    out.frame = Frame::CameraCentric;
    Ok(out)
}

/// Subtracts the root joint from every joint.
pub fn to_person_centric<T: Real>(pose: &Pose3D<T>) -> Result<(Pose3D<T>, Vec3<T>)> {
    pose.expect_frame(Frame::CameraCentric)?;
    let root = pose.root_position();
    let mut out = pose.translated(-root);
    out.joints[out.root] = Vec3::zero();
    out.frame = Frame::PersonCentric;
    Ok((out, root))
}

/// Euclidean length of every bone, in skeleton bone order.
pub fn bone_lengths<T: Real>(pose: &Pose3D<T>, skeleton: &SkeletonSpec) -> Vec<T> {
    skeleton
        .bones
        .iter()
        .map(|&(p, c)| pose.joints[p].distance(pose.joints[c]))
        .collect()
}

/// Time-indexed camera-centric poses of one person.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSequence<T> {
    pub person_id: u64,
    frames: BTreeMap<usize, Pose3D<T>>,
}

impl<T: Real> TrackSequence<T> {
    pub fn new(person_id: u64) -> Self {
        Self {
            person_id,
            frames: BTreeMap::new(),
        }
    }

    pub fn from_poses(
        person_id: u64,
        poses: impl IntoIterator<Item = (usize, Pose3D<T>)>,
    ) -> Result<Self> {
        let mut seq = Self::new(person_id);
        for (t, p) in poses {
            seq.insert(t, p)?;
        }
        Ok(seq)
    }

    /// Inserts a camera-centric pose; all poses must share a joint count.
    pub fn insert(&mut self, frame_index: usize, pose: Pose3D<T>) -> Result<()> {
        pose.expect_frame(Frame::CameraCentric)?;
        if let Some((_, first)) = self.frames.iter().next() {
            if first.num_joints() != pose.num_joints() || first.root != pose.root {
                return Err(Error::InvalidArgument(format!(
                    "pose with {} joints does not match track skeleton with {}",
                    pose.num_joints(),
                    first.num_joints()
                )));
            }
        }
        if self.frames.insert(frame_index, pose).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate frame index {frame_index}"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.frames.keys().copied()
    }

    pub fn poses(&self) -> impl Iterator<Item = &Pose3D<T>> {
        self.frames.values()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Pose3D<T>)> {
        self.frames.iter().map(|(k, v)| (*k, v))
    }

    pub fn get(&self, frame_index: usize) -> Option<&Pose3D<T>> {
        self.frames.get(&frame_index)
    }

    pub fn poses_mut(&mut self) -> impl Iterator<Item = &mut Pose3D<T>> {
        self.frames.values_mut()
    }

    pub fn num_joints(&self) -> Option<usize> {
        self.frames.values().next().map(|p| p.num_joints())
    }
}
