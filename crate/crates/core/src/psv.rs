//! Plane sweep volume: fronto-parallel planes uniform in inverse depth,
//! with the side view warped onto each of them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{backproject, project, CameraRig};
use crate::error::{Error, Result};
use crate::image::{ImageBuffer, Mask};
use crate::linalg::{Mat3, Vec3};
use crate::scalar::Real;

/// Plane depths ordered front to back (`depths[0]` is nearest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneStack<T> {
    depths: Vec<T>,
}

impl<T: Real> PlaneStack<T> {
    pub fn new(depths: Vec<T>) -> Result<Self> {
        if depths.is_empty() {
            return Err(Error::TooFewPlanes(0));
        }
        if !(depths[0] > T::zero()) {
            return Err(Error::InvalidRange { near: depths[0].as_f64(), far: depths[depths.len() - 1].as_f64() });
        }
        if depths.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidRange { near: depths[0].as_f64(), far: depths[depths.len() - 1].as_f64() });
        }
        Ok(Self { depths })
    }

    pub fn depths(&self) -> &[T] {
        &self.depths
    }

    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }

    pub fn nearest(&self) -> T {
        self.depths[0]
    }

    pub fn farthest(&self) -> T {
        self.depths[self.depths.len() - 1]
    }

    /// Distance to the closest neighboring plane of plane `k`.
    pub fn local_spacing(&self, k: usize) -> T {
        let d = &self.depths;
        let mut s = T::infinity();
        if k > 0 {
            s = s.min(d[k] - d[k - 1]);
        }
        if k + 1 < d.len() {
            s = s.min(d[k + 1] - d[k]);
        }
        s
    }
}

/// Places `count` planes with inverse depths evenly spaced from `1/near` to `1/far`, both inclusive.
pub fn place_planes<T: Real>(near: T, far: T, count: usize) -> Result<PlaneStack<T>> {
    if !(near > T::zero()) || !(near < far) || !far.is_finite() {
        return Err(Error::InvalidRange { near: near.as_f64(), far: far.as_f64() });
    }
    if count < 2 {
        return Err(Error::TooFewPlanes(count));
    }
    let (inv_near, inv_far) = (T::one() / near, T::one() / far);
    let last = T::from_usize_lossy(count - 1);
    let mut depths: Vec<T> = (0..count)
        .map(|k| {
            let t = T::from_usize_lossy(k) / last;
            T::one() / (inv_near + (inv_far - inv_near) * t)
        })
        .collect();
    depths[0] = near;
    depths[count - 1] = far;
    PlaneStack::new(depths)
}

/// Homography taking reference pixels to side pixels for the plane `z = depth`:
/// `K_s (R + t nᵀ / depth) K_r⁻¹` with `n = (0, 0, 1)`.
///
/// Points on the plane satisfy `nᵀX = depth`, so `R X + t = (R + t nᵀ/depth) X`.
pub fn plane_homography<T: Real>(rig: &CameraRig<T>, depth: T) -> Result<Mat3<T>> {
    if !(depth > T::zero()) {
        return Err(Error::NonPositiveDepth(depth.as_f64()));
    }
    let pose = &rig.side.pose;
    let mut m = pose.rotation;
    for i in 0..3 {
        let t = [pose.translation.x, pose.translation.y, pose.translation.z][i];
        m.rows[i][2] += t / depth;
    }
    let k_inv = rig.reference.matrix().inverse().ok_or_else(|| Error::DegenerateCamera("singular K_r".into()))?;
    Ok(rig.side.intrinsics.matrix() * m * k_inv)
}

/// Applies a homography to pixel `(x, y)`; `None` when the point maps behind the camera.
pub fn apply_homography<T: Real>(h: &Mat3<T>, p: [T; 2]) -> Option<[T; 2]> {
    let v = h.mul_vec(Vec3::new(p[0], p[1], T::one()));
    if !(v.z > T::zero()) {
        return None;
    }
    Some([v.x / v.z, v.y / v.z])
}

/// Side-view pixel seen by reference pixel `p` through the plane `z = depth`.
pub fn reference_to_side<T: Real>(rig: &CameraRig<T>, p: [T; 2], depth: T) -> Result<[T; 2]> {
    let world = backproject(p, depth, &rig.reference)?;
    project(rig.side.pose.transform(world), &rig.side.intrinsics)
}

/// Warps the side view onto the plane `z = depth`, sampled on the `height x width` reference grid.
pub fn warp_side_to_plane<T: Real>(
    side: &ImageBuffer<T>,
    rig: &CameraRig<T>,
    depth: T,
    out_size: (usize, usize),
) -> Result<(ImageBuffer<T>, Mask)> {
    if !(depth > T::zero()) {
        return Err(Error::NonPositiveDepth(depth.as_f64()));
    }
    let (h, w) = out_size;
    let c = side.channels();
    let mut out = ImageBuffer::zeros(h, w, c);
    let mut valid = Mask::new(h, w, false);
    for y in 0..h {
        for x in 0..w {
            let p = [T::from_usize_lossy(x), T::from_usize_lossy(y)];
            let Ok(q) = reference_to_side(rig, p, depth) else { continue };
            let ok = side.sample_snapped_into(q[0], q[1], T::geometric_tolerance(), out.pixel_mut(y, x));
            valid.set(y, x, ok);
        }
    }
    Ok((out, valid))
}

#[derive(Debug, Clone)]
pub struct PlaneSweepVolume<T> {
    pub planes: PlaneStack<T>,
    pub slabs: Vec<ImageBuffer<T>>,
    pub validity: Vec<Mask>,
    pub reference: ImageBuffer<T>,
}

impl<T: Real> PlaneSweepVolume<T> {
    pub fn height(&self) -> usize {
        self.reference.height()
    }

    pub fn width(&self) -> usize {
        self.reference.width()
    }

    /// Channel count of the packed `H x W x (3P + 3)` layout.
    pub fn packed_channels(&self) -> usize {
        3 * self.slabs.len() + 3
    }

    /// Packs slabs then the reference view along channels.
    pub fn packed(&self) -> ImageBuffer<T> {
        let p = self.slabs.len();
        ImageBuffer::from_fn(self.height(), self.width(), 3 * p + 3, |y, x, c| {
            let (k, ch) = (c / 3, c % 3);
            if k < p {
                self.slabs[k].get(y, x, ch)
            } else {
                self.reference.get(y, x, ch)
            }
        })
    }
}

/// Warps the side view onto every plane; the reference view is attached unmodified.
pub fn build_psv<T: Real>(
    reference: &ImageBuffer<T>,
    side: &ImageBuffer<T>,
    rig: &CameraRig<T>,
    planes: &PlaneStack<T>,
) -> Result<PlaneSweepVolume<T>> {
    if reference.channels() != 3 || side.channels() != 3 {
        return Err(Error::ShapeMismatch("plane sweep expects RGB images".into()));
    }
    let size = (reference.height(), reference.width());
    let warped: Vec<(ImageBuffer<T>, Mask)> = planes
        .depths()
        .par_iter()
        .map(|&d| warp_side_to_plane(side, rig, d, size))
        .collect::<Result<_>>()?;
    let (slabs, validity) = warped.into_iter().unzip();
    Ok(PlaneSweepVolume { planes: planes.clone(), slabs, validity, reference: reference.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{Camera, CameraIntrinsics, RigidPose};
    use proptest::prelude::*;

    fn rig_with(side_pose: RigidPose<f64>, k: CameraIntrinsics<f64>) -> CameraRig<f64> {
        CameraRig::new(k, Camera::new(k, side_pose), Camera::reference(k)).unwrap()
    }

    fn noise_image(h: usize, w: usize) -> ImageBuffer<f64> {
        ImageBuffer::from_fn(h, w, 3, |y, x, c| {
            let v = ((x * 7 + y * 13 + c * 3) % 17) as f64 / 16.0;
            0.5 * v + 0.25 * ((x as f64 * 0.7).sin() + 1.0) * 0.5
        })
    }

    #[test]
    fn place_planes_examples() {
        assert_eq!(place_planes(1.0, 100.0, 2).unwrap().depths(), &[1.0, 100.0]);
        let p = place_planes(1.0f64, 8.0, 3).unwrap();
        assert!((p.depths()[1] - 1.0 / 0.5625).abs() < 1e-12);
        assert!((p.depths()[1] - 1.7778).abs() < 1e-4);
        assert!(matches!(place_planes(2.0, 2.0, 4), Err(Error::InvalidRange { .. })));
        assert!(matches!(place_planes(0.0, 2.0, 4), Err(Error::InvalidRange { .. })));
        assert!(matches!(place_planes(1.0, 2.0, 1), Err(Error::TooFewPlanes(1))));
    }

    proptest! {
        #[test]
        fn inverse_depths_are_arithmetic(near in 0.1f64..10.0, span in 0.01f64..500.0, count in 2usize..70) {
            let p = place_planes(near, near + span, count).unwrap();
            let inv: Vec<f64> = p.depths().iter().map(|d| 1.0 / d).collect();
            let step = (inv[count - 1] - inv[0]) / (count - 1) as f64;
            for (k, v) in inv.iter().enumerate() {
                prop_assert!((v - (inv[0] + step * k as f64)).abs() < 1e-9);
            }
            prop_assert!(p.depths().windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn homography_matches_reprojection(
            axis in proptest::array::uniform3(-1.0f64..1.0), angle in -0.2f64..0.2,
            t in proptest::array::uniform3(-0.5f64..0.5), depth in 0.5f64..50.0,
            f in 50.0f64..500.0, x in 0.0f64..63.0, y in 0.0f64..47.0,
        ) {
            let k = CameraIntrinsics::new(f, f * 1.1, 31.5, 23.5, 64, 48).unwrap();
            let pose = RigidPose::new(Mat3::from_axis_angle(Vec3::from(axis), angle), Vec3::from(t)).unwrap();
            let rig = rig_with(pose, k);
            let hm = plane_homography(&rig, depth).unwrap();
            if let Ok(q) = reference_to_side(&rig, [x, y], depth) {
                let qh = apply_homography(&hm, [x, y]).unwrap();
                prop_assert!((q[0] - qh[0]).abs() < 1e-6 && (q[1] - qh[1]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identity_rig_resamples_exactly() {
        let k = CameraIntrinsics::centered(40.0, 12, 10).unwrap();
        let rig = rig_with(RigidPose::identity(), k);
        let side = noise_image(10, 12);
        for d in [1.0, 3.0, 77.0] {
            let (img, valid) = warp_side_to_plane(&side, &rig, d, (10, 12)).unwrap();
            assert_eq!(valid.count(), 120);
            for (a, b) in img.data().iter().zip(side.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lateral_translation_gives_pinhole_disparity() {
        let k = CameraIntrinsics::new(100.0, 100.0, 15.5, 7.5, 32, 16).unwrap();
        // side camera center at +0.1 x in the reference frame
        let rig = rig_with(RigidPose::from_translation(Vec3::new(-0.1, 0.0, 0.0)), k);
        let side = ImageBuffer::from_fn(16, 32, 3, |_, x, c| x as f64 * 0.01 + c as f64 * 0.1);
        let (img, valid) = warp_side_to_plane(&side, &rig, 10.0, (16, 32)).unwrap();
        // disparity fx * t / depth = 1 px, reference x maps to side x - 1
        assert!(!valid.get(3, 0));
        for y in 0..16 {
            for x in 1..32 {
                assert!(valid.get(y, x));
                assert!((img.get(y, x, 0) - side.get(y, x - 1, 0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nonpositive_depth_rejected() {
        let k = CameraIntrinsics::centered(40.0, 8, 8).unwrap();
        let rig = rig_with(RigidPose::identity(), k);
        let side = noise_image(8, 8);
        assert!(matches!(warp_side_to_plane(&side, &rig, -1.0, (8, 8)), Err(Error::NonPositiveDepth(_))));
    }

    #[test]
    fn zero_baseline_is_fully_valid_and_slabs_ordered() {
        let k = CameraIntrinsics::centered(40.0, 12, 10).unwrap();
        let rig = rig_with(RigidPose::identity(), k);
        let side = noise_image(10, 12);
        let planes = place_planes(1.0, 100.0, 2).unwrap();
        let psv = build_psv(&side, &side, &rig, &planes).unwrap();
        assert_eq!(psv.slabs.len(), 2);
        assert_eq!(psv.packed_channels(), 9);
        assert!(psv.validity.iter().all(|m| m.count() == 120));
        assert_eq!(psv.slabs[0], psv.slabs[1]);
        assert_eq!(psv.reference, side);
        let packed = psv.packed();
        assert_eq!(packed.get(2, 3, 7), side.get(2, 3, 1));
    }

    #[test]
    fn validity_shrinks_with_baseline() {
        let k = CameraIntrinsics::centered(60.0, 24, 16).unwrap();
        let side = noise_image(16, 24);
        let mut last = usize::MAX;
        for b in [0.0, 0.05, 0.2, 0.5] {
            let rig = rig_with(RigidPose::from_translation(Vec3::new(-b, 0.0, 0.0)), k);
            let (_, valid) = warp_side_to_plane(&side, &rig, 2.0, (16, 24)).unwrap();
            assert!(valid.count() <= last);
            last = valid.count();
        }
    }
}
