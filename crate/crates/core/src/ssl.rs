//! Consistency losses for pseudo-label fine-tuning and their annealed
//! per-sample weighting.

use crate::camera::{project, rotate_about_y, CameraIntrinsics};
use crate::error::{Error, Result};
use crate::scalar::{Real, Vec3};
use crate::skeleton::{Frame, Pose2D, Pose3D};

/// Maps a 2D pose back to a camera-centric 3D pose.
pub trait Lifter<T> {
    fn lift(&self, pose: &Pose2D<T>, cam: &CameraIntrinsics<T>) -> Result<Pose3D<T>>;
}

/// `(1/K) sum_k C_k |project(X3d_k) - X2d_k|^2`.
pub fn reprojection_loss<T: Real>(
    p3d: &Pose3D<T>,
    p2d: &Pose2D<T>,
    cam: &CameraIntrinsics<T>,
) -> Result<T> {
    p3d.expect_frame(Frame::CameraCentric)?;
    if p3d.num_joints() != p2d.num_joints() {
        return Err(Error::InvalidArgument(format!(
            "3D pose has {} joints, 2D pose has {}",
            p3d.num_joints(),
            p2d.num_joints()
        )));
    }
    let mut acc = T::zero();
    for ((&x, obs), &c) in p3d.joints.iter().zip(&p2d.joints).zip(&p2d.conf) {
        let uv = project(x, cam)?;
        let du = uv[0] - obs[0];
        let dv = uv[1] - obs[1];
        acc += c * (du * du + dv * dv);
    }
    Ok(acc / T::from_usize_lossy(p3d.num_joints()))
}

/// Rotates the pseudo-label about the vertical axis through its root,
/// projects it, re-lifts the projection and returns the mean per-joint
/// squared distance (mm^2) between the re-lifted and rotated poses.
pub fn multi_perspective_loss<T: Real, L: Lifter<T> + ?Sized>(
    pseudo: &Pose3D<T>,
    cam: &CameraIntrinsics<T>,
    angle: T,
    lifter: &L,
) -> Result<T> {
    pseudo.expect_frame(Frame::CameraCentric)?;
    let rotated = rotate_about_y(pseudo, angle, pseudo.root_position())?;
    let joints = rotated
        .joints
        .iter()
        .map(|&j| project(j, cam))
        .collect::<Result<Vec<_>>>()?;
    let view = Pose2D::new(joints, rotated.conf.clone())?;
    let relifted = lifter.lift(&view, cam)?;
    if relifted.num_joints() != rotated.num_joints() {
        return Err(Error::InvalidArgument("lifter changed the joint count".into()));
    }
    let acc: T = relifted
        .joints
        .iter()
        .zip(&rotated.joints)
        .map(|(a, b)| (*a - *b).norm_squared())
        .sum();
    Ok(acc / T::from_usize_lossy(rotated.num_joints()))
}

/// Lifter that knows the true depths of the view it will be asked to lift.
#[derive(Debug, Clone)]
pub struct OracleLifter<T> {
    pub depths: Vec<T>,
    pub root: usize,
}

impl<T: Real> OracleLifter<T> {
    /// Oracle for the rotated view `multi_perspective_loss` builds from
    /// `pseudo` at `angle`.
    pub fn for_rotation(pseudo: &Pose3D<T>, angle: T) -> Result<Self> {
        let rotated = rotate_about_y(pseudo, angle, pseudo.root_position())?;
        Ok(Self {
            depths: rotated.joints.iter().map(|j| j.z).collect(),
            root: pseudo.root,
        })
    }
}

impl<T: Real> Lifter<T> for OracleLifter<T> {
    fn lift(&self, pose: &Pose2D<T>, cam: &CameraIntrinsics<T>) -> Result<Pose3D<T>> {
        if pose.num_joints() != self.depths.len() {
            return Err(Error::InvalidArgument("oracle depth count mismatch".into()));
        }
        let joints = pose
            .joints
            .iter()
            .zip(&self.depths)
            .map(|(&uv, &z)| crate::camera::back_project(uv, z, cam))
            .collect::<Result<Vec<_>>>()?;
        Pose3D::new(joints, pose.conf.clone(), Frame::CameraCentric, self.root)
    }
}

/// Wraps a lifter and adds a constant offset to every joint.
#[derive(Debug, Clone)]
pub struct OffsetLifter<L, T> {
    pub inner: L,
    pub offset: Vec3<T>,
}

impl<T: Real, L: Lifter<T>> Lifter<T> for OffsetLifter<L, T> {
    fn lift(&self, pose: &Pose2D<T>, cam: &CameraIntrinsics<T>) -> Result<Pose3D<T>> {
        Ok(self.inner.lift(pose, cam)?.translated(self.offset))
    }
}

/// Per-sample reprojection and multi-perspective errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleErrors<T> {
    pub rep: T,
    pub mp: T,
}

fn softmax_neg<T: Real>(values: impl Iterator<Item = T> + Clone, temperature: T) -> Vec<T> {
    let scaled: Vec<T> = values.map(|e| -e / temperature).collect();
    let max = scaled.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = scaled.iter().map(|&s| (s - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Per-sample weights `softmax(-E_rep / r) + softmax(-E_mp / r)` over the
/// batch, where `r` is the epoch counter. Low-error samples get high weight
/// early; weights flatten toward `2/N` as `r` grows.
pub fn ssl_weights<T: Real>(batch: &[SampleErrors<T>], epoch: T) -> Result<Vec<T>> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("SSL weight batch".into()));
    }
    if !(epoch >= T::one()) {
        return Err(Error::InvalidArgument(format!("epoch counter {epoch} must be >= 1")));
    }
    if batch.iter().any(|e| !(e.rep >= T::zero() && e.mp >= T::zero())) {
        return Err(Error::InvalidArgument("errors must be non-negative".into()));
    }
    let a = softmax_neg(batch.iter().map(|e| e.rep), epoch);
    let b = softmax_neg(batch.iter().map(|e| e.mp), epoch);
    Ok(a.into_iter().zip(b).map(|(x, y)| x + y).collect())
}

/// `w (L_rep + L_mp) + L_dis`.
#[inline]
pub fn ssl_total<T: Real>(rep: T, mp: T, dis: T, w: T) -> T {
    w * (rep + mp) + dis
}
