//! Pinhole cameras and rigid poses.
//!
//! The reference camera frame is the world frame. A [`RigidPose`] maps
//! reference-camera coordinates into another camera's coordinates, so the
//! reference camera itself has the identity pose.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat3, Vec3};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
}

impl<T: Real> CameraIntrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: usize, height: usize) -> Result<Self> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    /// Square pixels, principal point at the image center.
    pub fn centered(focal: T, width: usize, height: usize) -> Result<Self> {
        let half = T::lit(0.5);
        Self::new(
            focal,
            focal,
            (T::from_usize_lossy(width) - T::one()) * half,
            (T::from_usize_lossy(height) - T::one()) * half,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let ok_focal = self.fx > T::zero() && self.fy > T::zero() && self.fx.is_finite() && self.fy.is_finite();
        if !ok_focal {
            return Err(Error::InvalidIntrinsics(format!("focal lengths must be positive, got fx={}, fy={}", self.fx, self.fy)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidIntrinsics("empty sensor".into()));
        }
        let in_sensor = |c: T, n: usize| c >= T::zero() && c < T::from_usize_lossy(n);
        if !in_sensor(self.cx, self.width) || !in_sensor(self.cy, self.height) {
            return Err(Error::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} sensor",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Ray direction with unit z through pixel `(x, y)`.
    #[inline]
    pub fn ray(&self, x: T, y: T) -> Vec3<T> {
        Vec3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, T::one())
    }

    pub fn matrix(&self) -> Mat3<T> {
        let (z, o) = (T::zero(), T::one());
        Mat3::from_rows([[self.fx, z, self.cx], [z, self.fy, self.cy], [z, z, o]])
    }

    pub fn cast<U: Real>(&self) -> CameraIntrinsics<U> {
        CameraIntrinsics {
            fx: U::lit(self.fx.as_f64()),
            fy: U::lit(self.fy.as_f64()),
            cx: U::lit(self.cx.as_f64()),
            cy: U::lit(self.cy.as_f64()),
            width: self.width,
            height: self.height,
        }
    }
}

/// Projects a camera-space point to pixel coordinates `(x, y)`.
pub fn project<T: Real>(point: Vec3<T>, k: &CameraIntrinsics<T>) -> Result<[T; 2]> {
    if !(point.z > T::zero()) {
        return Err(Error::NonPositiveDepth(point.z.as_f64()));
    }
    Ok([k.fx * point.x / point.z + k.cx, k.fy * point.y / point.z + k.cy])
}

/// Lifts pixel `(x, y)` to the camera-space point at z = `depth`.
pub fn backproject<T: Real>(pixel: [T; 2], depth: T, k: &CameraIntrinsics<T>) -> Result<Vec3<T>> {
    if !(depth > T::zero()) {
        return Err(Error::NonPositiveDepth(depth.as_f64()));
    }
    Ok(k.ray(pixel[0], pixel[1]) * depth)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidPose<T> {
    pub rotation: Mat3<T>,
    pub translation: Vec3<T>,
}

impl<T: Real> RigidPose<T> {
    pub fn new(rotation: Mat3<T>, translation: Vec3<T>) -> Result<Self> {
        let tol = T::geometric_tolerance();
        let ortho = rotation.orthonormality_error();
        let det = rotation.determinant();
        let dev = ortho.max((det - T::one()).abs());
        if !(dev <= tol) || !translation.dot(translation).is_finite() {
            return Err(Error::InvalidPose(dev.as_f64()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zero() }
    }

    pub fn from_translation(t: Vec3<T>) -> Self {
        Self { rotation: Mat3::identity(), translation: t }
    }

    /// Parses a 3x4 row-major `[R | t]` matrix.
    pub fn from_3x4(m: &[T]) -> Result<Self> {
        if m.len() != 12 {
            return Err(Error::ShapeMismatch(format!("pose needs 12 values, got {}", m.len())));
        }
        let r = Mat3::from_rows([[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]]);
        Self::new(r, Vec3::new(m[3], m[7], m[11]))
    }

    pub fn to_3x4(&self) -> [T; 12] {
        let r = &self.rotation.rows;
        let t = self.translation;
        [r[0][0], r[0][1], r[0][2], t.x, r[1][0], r[1][1], r[1][2], t.y, r[2][0], r[2][1], r[2][2], t.z]
    }

    #[inline]
    pub fn transform(&self, p: Vec3<T>) -> Vec3<T> {
        self.rotation.mul_vec(p) + self.translation
    }

    /// `self ∘ inner`: apply `inner` first.
    pub fn compose(&self, inner: &Self) -> Self {
        Self {
            rotation: self.rotation * inner.rotation,
            translation: self.rotation.mul_vec(inner.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -rt.mul_vec(self.translation) }
    }

    /// Camera center expressed in the source (reference) frame.
    pub fn center(&self) -> Vec3<T> {
        -self.rotation.transpose().mul_vec(self.translation)
    }

    pub fn cast<U: Real>(&self) -> RigidPose<U> {
        RigidPose { rotation: self.rotation.cast(), translation: self.translation.cast() }
    }
}

/// Intrinsics plus the pose mapping reference coordinates into this camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera<T> {
    pub intrinsics: CameraIntrinsics<T>,
    pub pose: RigidPose<T>,
}

impl<T: Real> Camera<T> {
    pub fn new(intrinsics: CameraIntrinsics<T>, pose: RigidPose<T>) -> Self {
        Self { intrinsics, pose }
    }

    pub fn reference(intrinsics: CameraIntrinsics<T>) -> Self {
        Self { intrinsics, pose: RigidPose::identity() }
    }

    /// Projects a reference-frame point into this camera.
    pub fn project_world(&self, p: Vec3<T>) -> Result<[T; 2]> {
        project(self.pose.transform(p), &self.intrinsics)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRig<T> {
    pub reference: CameraIntrinsics<T>,
    pub side: Camera<T>,
    pub novel: Camera<T>,
}

impl<T: Real> CameraRig<T> {
    pub fn new(reference: CameraIntrinsics<T>, side: Camera<T>, novel: Camera<T>) -> Result<Self> {
        reference.validate()?;
        side.intrinsics.validate()?;
        novel.intrinsics.validate()?;
        for pose in [&side.pose, &novel.pose] {
            RigidPose::new(pose.rotation, pose.translation)?;
        }
        Ok(Self { reference, side, novel })
    }

    pub fn reference_camera(&self) -> Camera<T> {
        Camera::reference(self.reference)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn k(fx: f64, cx: f64, cy: f64) -> CameraIntrinsics<f64> {
        CameraIntrinsics::new(fx, fx, cx, cy, 200, 200).unwrap()
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let kk = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 4, 4).unwrap();
        assert_eq!(project(Vec3::new(0.0, 0.0, 1.0), &kk).unwrap(), [0.0, 0.0]);
    }

    #[test]
    fn project_hand_example() {
        let kk = k(100.0, 50.0, 20.0);
        let p = project(Vec3::new(1.0, 0.0, 10.0), &kk).unwrap();
        assert!((p[0] - 60.0).abs() < 1e-12);
        assert!((p[1] - 20.0).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_rejected() {
        let kk = k(100.0, 50.0, 20.0);
        assert!(matches!(project(Vec3::new(0.0, 0.0, -1.0), &kk), Err(Error::NonPositiveDepth(_))));
        assert!(matches!(backproject([1.0, 1.0], 0.0, &kk), Err(Error::NonPositiveDepth(_))));
    }

    #[test]
    fn backproject_examples() {
        let kk = k(100.0, 50.0, 20.0);
        let p = backproject([50.0, 20.0], 5.0, &kk).unwrap();
        assert_eq!(p, Vec3::new(0.0, 0.0, 5.0));
        let q = backproject([60.0, 20.0], 10.0, &kk).unwrap();
        assert!((q.x - 1.0).abs() < 1e-12 && q.y.abs() < 1e-12 && q.z == 10.0);
    }

    #[test]
    fn intrinsics_invariants() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 0.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, -0.1, 0.0, 4, 4).is_err());
    }

    #[test]
    fn pose_rejects_non_rotation() {
        let m = Mat3::from_rows([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]]);
        assert!(RigidPose::new(m, Vec3::zero()).is_err());
        let s = Mat3::from_rows([[1.01, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert!(RigidPose::new(s, Vec3::zero()).is_err());
    }

    #[test]
    fn pose_3x4_roundtrip_and_inverse() {
        let r = Mat3::from_axis_angle(Vec3::new(0.1, 0.9, 0.2), 0.3);
        let pose = RigidPose::new(r, Vec3::new(0.5, -0.2, 1.0)).unwrap();
        let back = RigidPose::from_3x4(&pose.to_3x4()).unwrap();
        assert_eq!(pose, back);
        let p = Vec3::new(0.3, 0.4, 5.0);
        let q = pose.inverse().transform(pose.transform(p));
        assert!((q - p).norm() < 1e-12);
        assert!(pose.transform(pose.center()).norm() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn project_inverts_backproject(
            fx in 10.0f64..2000.0, fy in 10.0f64..2000.0,
            cx in 0.0f64..639.0, cy in 0.0f64..479.0,
            x in -100.0f64..740.0, y in -100.0f64..580.0,
            d in 0.01f64..1000.0,
        ) {
            let kk = CameraIntrinsics::new(fx, fy, cx, cy, 640, 480).unwrap();
            let p = backproject([x, y], d, &kk).unwrap();
            prop_assert_eq!(p.z, d);
            let q = project(p, &kk).unwrap();
            prop_assert!((q[0] - x).abs() < 1e-9 && (q[1] - y).abs() < 1e-9);
        }

        #[test]
        fn composition_stays_orthonormal(
            a in proptest::array::uniform3(-1.0f64..1.0), ta in -3.0f64..3.0,
            b in proptest::array::uniform3(-1.0f64..1.0), tb in -3.0f64..3.0,
        ) {
            let p1 = RigidPose::new(Mat3::from_axis_angle(Vec3::from(a), ta), Vec3::from(a)).unwrap();
            let p2 = RigidPose::new(Mat3::from_axis_angle(Vec3::from(b), tb), Vec3::from(b)).unwrap();
            let c = p1.compose(&p2);
            prop_assert!(c.rotation.orthonormality_error() < 1e-9);
            prop_assert!((c.rotation.determinant() - 1.0).abs() < 1e-9);
            prop_assert!(RigidPose::new(c.rotation, c.translation).is_ok());
        }
    }
}
