//! Ideal pinhole camera: projection, back-projection and rotation about the
//! vertical axis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{Real, Vec3};
use crate::skeleton::Pose3D;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
}

impl<T: Real> CameraIntrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T) -> Result<Self> {
        let cam = Self { fx, fy, cx, cy };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > T::zero() && self.fy > T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::InvalidArgument("non-finite principal point".into()));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> CameraIntrinsics<U> {
        CameraIntrinsics {
            fx: U::lit(self.fx.as_f64()),
            fy: U::lit(self.fy.as_f64()),
            cx: U::lit(self.cx.as_f64()),
            cy: U::lit(self.cy.as_f64()),
        }
    }
}

impl Default for CameraIntrinsics<f64> {
    fn default() -> Self {
        Self {
            fx: 1000.0,
            fy: 1000.0,
            cx: 500.0,
            cy: 500.0,
        }
    }
}

/// Projects a camera-frame point (mm) to pixels.
#[inline]
pub fn project<T: Real>(point: Vec3<T>, cam: &CameraIntrinsics<T>) -> Result<[T; 2]> {
    if !(point.z > T::zero()) {
        return Err(Error::BehindCamera { z: point.z.as_f64() });
    }
    Ok([
        cam.fx * point.x / point.z + cam.cx,
        cam.fy * point.y / point.z + cam.cy,
    ])
}

/// Projection together with its 2x3 Jacobian with respect to the point.
pub fn project_with_jacobian<T: Real>(
    point: Vec3<T>,
    cam: &CameraIntrinsics<T>,
) -> Result<([T; 2], [[T; 3]; 2])> {
    let uv = project(point, cam)?;
    let iz = T::one() / point.z;
    let jac = [
        [cam.fx * iz, T::zero(), -cam.fx * point.x * iz * iz],
        [T::zero(), cam.fy * iz, -cam.fy * point.y * iz * iz],
    ];
    Ok((uv, jac))
}

/// Lifts a pixel at the given depth back into the camera frame.
pub fn back_project<T: Real>(pixel: [T; 2], depth: T, cam: &CameraIntrinsics<T>) -> Result<Vec3<T>> {
    if !(depth > T::zero()) {
        return Err(Error::BehindCamera { z: depth.as_f64() });
    }
    Ok(Vec3::new(
        (pixel[0] - cam.cx) * depth / cam.fx,
        (pixel[1] - cam.cy) * depth / cam.fy,
        depth,
    ))
}

/// Rotates a point about the vertical (y) axis through `pivot`.
#[inline]
pub fn rotate_point_about_y<T: Real>(p: Vec3<T>, angle: T, pivot: Vec3<T>) -> Vec3<T> {
    let (s, c) = angle.sin_cos();
    let d = p - pivot;
    pivot + Vec3::new(c * d.x + s * d.z, d.y, -s * d.x + c * d.z)
}

/// Rigid rotation of every joint about the vertical axis through `pivot`.
pub fn rotate_about_y<T: Real>(pose: &Pose3D<T>, angle: T, pivot: Vec3<T>) -> Result<Pose3D<T>> {
    if !angle.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite angle {angle}")));
    }
    Ok(Pose3D {
        joints: pose
            .joints
            .iter()
            .map(|&j| rotate_point_about_y(j, angle, pivot))
            .collect(),
        ..pose.clone()
    })
}
