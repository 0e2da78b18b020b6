//! Rigid transforms, pinhole cameras and ray generation.
//!
//! Conventions used everywhere in the crate:
//! - right-handed frames, distances in meters;
//! - a camera pose maps camera coordinates to world coordinates;
//! - cameras look down their local −Z axis with +Y pointing image-up;
//! - pixel rows are emitted top to bottom, columns left to right.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Unit quaternion, canonicalized so that `w >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes and canonicalizes the given components.
    ///
    /// A zero-norm input collapses to the identity rotation.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Quat {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if n == 0.0 || !n.is_finite() {
            return Quat::IDENTITY;
        }
        let s = if w < 0.0 { -1.0 / n } else { 1.0 / n };
        Quat {
            w: w * s,
            x: x * s,
            y: y * s,
            z: z * s,
        }
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Quat {
        let n = axis.norm();
        if n == 0.0 {
            return Quat::IDENTITY;
        }
        let a = axis / n;
        let (s, c) = (0.5 * angle).sin_cos();
        Quat::new(c, a.x * s, a.y * s, a.z * s)
    }

    /// Rotation vector (axis times angle in radians) to quaternion.
    pub fn from_rotvec(v: &Vec3) -> Quat {
        let angle = v.norm();
        if angle < 1e-12 {
            // first-order expansion keeps tiny rotations exact to rounding
            return Quat::new(1.0, 0.5 * v.x, 0.5 * v.y, 0.5 * v.z);
        }
        Quat::from_axis_angle(v, angle)
    }

    /// Canonical rotation vector with norm in `[0, π]`.
    pub fn to_rotvec(&self) -> Vec3 {
        let v = Vec3::new(self.x, self.y, self.z);
        let s = v.norm();
        if s < 1e-12 {
            return 2.0 * v;
        }
        // w >= 0 by construction, so the angle lands in [0, π]
        let angle = 2.0 * s.atan2(self.w);
        v * (angle / s)
    }

    pub fn angle(&self) -> f64 {
        self.to_rotvec().norm()
    }

    pub fn dot(&self, other: &Quat) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn conjugate(&self) -> Quat {
        Quat::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product `self * other` (apply `other` first).
    pub fn mul(&self, o: &Quat) -> Quat {
        Quat::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        let u = Vec3::new(self.x, self.y, self.z);
        let t = 2.0 * u.cross(v);
        v + self.w * t + u.cross(&t)
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Quaternion of a proper rotation matrix (Shepperd's method).
    pub fn from_matrix(m: &Matrix3<f64>) -> Quat {
        let tr = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            Quat::new(
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            Quat::new(
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            Quat::new(
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            Quat::new(
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        }
    }
}

/// `|<q1, q2>|`: 1 for the same rotation, 0 for rotations 180° apart.
pub fn quat_distance(q1: &Quat, q2: &Quat) -> f64 {
    q1.dot(q2).abs().min(1.0)
}

/// Rigid transform `x ↦ q·x + r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub r: Vec3,
    pub q: Quat,
}

impl Default for Pose {
    fn default() -> Self {
        Pose::IDENTITY
    }
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        r: Vector3::new(0.0, 0.0, 0.0),
        q: Quat::IDENTITY,
    };

    pub fn new(r: Vec3, q: Quat) -> Pose {
        Pose { r, q }
    }

    pub fn from_translation(r: Vec3) -> Pose {
        Pose { r, q: Quat::IDENTITY }
    }

    /// Rotation by `q` about the fixed point `pivot`.
    pub fn rotation_about(pivot: &Vec3, q: Quat) -> Pose {
        Pose {
            r: pivot - q.rotate(pivot),
            q,
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            r: self.q.rotate(&other.r) + self.r,
            q: self.q.mul(&other.q),
        }
    }

    pub fn inverse(&self) -> Pose {
        let qi = self.q.conjugate();
        Pose {
            r: -qi.rotate(&self.r),
            q: qi,
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.q.rotate(p) + self.r
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.q.rotate(v)
    }

    /// Camera viewing direction (local −Z) in the parent frame.
    pub fn forward(&self) -> Vec3 {
        self.q.rotate(&Vec3::new(0.0, 0.0, -1.0))
    }

    pub fn translation_distance(&self, other: &Pose) -> f64 {
        (self.r - other.r).norm()
    }

    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        self.q.conjugate().mul(&other.q).angle()
    }
}

/// Camera pose at `eye` whose −Z axis points at `target`, with +Y as close to `up` as possible.
pub fn look_at(eye: &Vec3, target: &Vec3, up: &Vec3) -> Result<Pose> {
    let fwd = target - eye;
    let len = fwd.norm();
    if !(len > 1e-12) {
        return Err(Error::Degenerate("look_at eye coincides with target".into()));
    }
    let f = fwd / len;
    let side = f.cross(up);
    let sn = side.norm();
    if !(sn > 1e-9 * up.norm().max(1e-300)) || up.norm() == 0.0 {
        return Err(Error::Degenerate("look_at up vector parallel to view direction".into()));
    }
    let x = side / sn;
    let y = x.cross(&f);
    let z = -f;
    let m = Matrix3::from_columns(&[x, y, z]);
    Ok(Pose {
        r: *eye,
        q: Quat::from_matrix(&m),
    })
}

/// Point on a sphere around `center` from azimuth (about +Z, from +X) and elevation (from the XY plane).
pub fn spherical_point(center: &Vec3, radius: f64, azimuth: f64, elevation: f64) -> Vec3 {
    let (se, ce) = elevation.sin_cos();
    let (sa, ca) = azimuth.sin_cos();
    center + radius * Vec3::new(ce * ca, ce * sa, se)
}

/// Camera on a sphere around `center`, looking at it with world +Z as up.
pub fn orbit_pose(center: &Vec3, radius: f64, azimuth: f64, elevation: f64) -> Result<Pose> {
    let eye = spherical_point(center, radius, azimuth, elevation);
    let up = if elevation.cos().abs() < 1e-3 {
        Vec3::new(-azimuth.cos(), -azimuth.sin(), 0.0) * elevation.signum()
    } else {
        Vec3::z()
    };
    look_at(&eye, center, &up)
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Aabb> {
        if !(0..3).all(|i| min[i].is_finite() && max[i].is_finite() && max[i] > min[i]) {
            return Err(Error::InvalidArgument(format!(
                "degenerate bounds {min:?} .. {max:?}"
            )));
        }
        Ok(Aabb { min, max })
    }

    pub fn cube(center: Vec3, half: f64) -> Result<Aabb> {
        let h = Vec3::repeat(half);
        Aabb::new(center - h, center + h)
    }

    pub fn center(&self) -> Vec3 {
        0.5 * (self.min + self.max)
    }

    pub fn size(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Slab intersection of `o + t d` for `t >= 0`.
    pub fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<(f64, f64)> {
        let mut t0: f64 = 0.0;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if d[i].abs() < 1e-300 {
                if o[i] < self.min[i] || o[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[i];
            let (mut a, mut b) = ((self.min[i] - o[i]) * inv, (self.max[i] - o[i]) * inv);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        (t0 < t1).then_some((t0, t1))
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(width: usize, height: usize, fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if width == 0 || height == 0 || !(fx > 0.0) || !(fy > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "invalid intrinsics {width}x{height} f=({fx},{fy})"
            )));
        }
        Ok(CameraIntrinsics {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
        })
    }

    /// Square pixels, centered principal point, given horizontal half field of view.
    pub fn from_half_fov(width: usize, height: usize, half_fov: f64) -> Result<Self> {
        let f = 0.5 * width as f64 / half_fov.tan();
        Self::new(width, height, f, f, 0.5 * width as f64, 0.5 * height as f64)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Unit direction through the center of pixel (`col`, `row`) in camera coordinates.
    pub fn pixel_direction(&self, col: usize, row: usize) -> Vec3 {
        let x = (col as f64 + 0.5 - self.cx) / self.fx;
        let y = -(row as f64 + 0.5 - self.cy) / self.fy;
        Vec3::new(x, y, -1.0).normalize()
    }

    /// Pixel (col, row) containing the camera-frame point, if it is in front of the camera and on the image.
    pub fn project(&self, p_cam: &Vec3) -> Option<(usize, usize)> {
        if p_cam.z >= 0.0 {
            return None;
        }
        let u = self.cx + self.fx * p_cam.x / -p_cam.z;
        let v = self.cy - self.fy * p_cam.y / -p_cam.z;
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            return None;
        }
        Some((u as usize, v as usize))
    }
}

/// Ray segment `o + t d` for `t in [t_near, t_far]`; `t_near == t_far` marks a ray that misses the volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub o: Vec3,
    pub d: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn clipped(o: Vec3, d: Vec3, bounds: &Aabb) -> Ray {
        match bounds.intersect(&o, &d) {
            Some((t0, t1)) => Ray {
                o,
                d,
                t_near: t0,
                t_far: t1,
            },
            None => Ray {
                o,
                d,
                t_near: 0.0,
                t_far: 0.0,
            },
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.t_far > self.t_near)
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.o + t * self.d
    }
}

/// One ray per pixel, row-major, clipped to `bounds`.
pub fn generate_rays(pose: &Pose, intr: &CameraIntrinsics, bounds: &Aabb) -> Vec<Ray> {
    let mut rays = Vec::with_capacity(intr.pixel_count());
    for row in 0..intr.height {
        for col in 0..intr.width {
            rays.push(pixel_ray(pose, intr, bounds, col, row));
        }
    }
    rays
}

pub fn pixel_ray(pose: &Pose, intr: &CameraIntrinsics, bounds: &Aabb, col: usize, row: usize) -> Ray {
    let d = pose.transform_vector(&intr.pixel_direction(col, row));
    Ray::clipped(pose.r, d, bounds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn arb_quat() -> impl Strategy<Value = Quat> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("nonzero", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-3)
            .prop_map(|(w, x, y, z)| Quat::new(w, x, y, z))
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (arb_quat(), -2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64)
            .prop_map(|(q, x, y, z)| Pose::new(Vec3::new(x, y, z), q))
    }

    fn pose_close(a: &Pose, b: &Pose, tol: f64) -> bool {
        (a.r - b.r).amax() < tol && quat_distance(&a.q, &b.q) > 1.0 - tol
    }

    #[test]
    fn look_at_axis_aligned() {
        let p = look_at(&Vec3::new(0.0, 0.0, 1.0), &Vec3::zeros(), &Vec3::y()).unwrap();
        assert!((p.forward() - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        let n = p.q.w.powi(2) + p.q.x.powi(2) + p.q.y.powi(2) + p.q.z.powi(2);
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn look_at_degenerate() {
        let e = Vec3::new(1.0, 2.0, 3.0);
        assert!(matches!(look_at(&e, &e, &Vec3::z()), Err(Error::Degenerate(_))));
        assert!(matches!(
            look_at(&Vec3::new(0.0, 0.0, 1.0), &Vec3::zeros(), &Vec3::z()),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn generate_rays_center_and_behind() {
        let bounds = Aabb::cube(Vec3::zeros(), 0.5).unwrap();
        let intr = CameraIntrinsics::from_half_fov(5, 5, 0.3).unwrap();
        let pose = look_at(&Vec3::new(0.0, -2.0, 0.0), &Vec3::zeros(), &Vec3::z()).unwrap();
        let rays = generate_rays(&pose, &intr, &bounds);
        let c = rays[2 * 5 + 2];
        assert!(c.t_near < c.t_far);
        assert!((c.t_near - 1.5).abs() < 1e-9 && (c.t_far - 2.5).abs() < 1e-9);

        let away = look_at(&Vec3::new(0.0, -2.0, 0.0), &Vec3::new(0.0, -3.0, 0.0), &Vec3::z()).unwrap();
        assert!(generate_rays(&away, &intr, &bounds).iter().all(|r| r.is_empty()));
    }

    #[test]
    fn three_by_three_rays_are_symmetric() {
        // hand-computed pinhole directions: corners at (±1, ±1, -1)/√3 for f = 1, c = 1.5
        let intr = CameraIntrinsics::new(3, 3, 1.0, 1.0, 1.5, 1.5).unwrap();
        let bounds = Aabb::cube(Vec3::zeros(), 10.0).unwrap();
        let rays = generate_rays(&Pose::IDENTITY, &intr, &bounds);
        assert_eq!(rays.len(), 9);
        let s = 1.0 / 3f64.sqrt();
        let expect = [
            Vec3::new(-s, s, -s),
            Vec3::new(s, s, -s),
            Vec3::new(-s, -s, -s),
            Vec3::new(s, -s, -s),
        ];
        for (idx, e) in [0usize, 2, 6, 8].iter().zip(expect.iter()) {
            assert!((rays[*idx].d - e).norm() < 1e-12, "ray {idx}: {:?}", rays[*idx].d);
        }
        assert!((rays[4].d - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        // second ray of the first row is the top-center pixel
        assert!(rays[1].d.y > 0.0 && rays[1].d.x.abs() < 1e-12);
    }

    #[test]
    fn quat_distance_cases() {
        let q = Quat::from_axis_angle(&Vec3::new(1.0, 2.0, 3.0), 0.7);
        assert!((quat_distance(&q, &q) - 1.0).abs() < 1e-12);
        let r = Quat::from_axis_angle(&Vec3::new(-0.3, 1.0, 0.2), PI).mul(&q);
        assert!(quat_distance(&q, &r) < 1e-12);
        let neg = Quat { w: -q.w, x: -q.x, y: -q.y, z: -q.z };
        assert!((quat_distance(&q, &neg) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rotvec_roundtrip_near_pi() {
        let v = Vec3::new(0.0, PI, 0.0);
        let q = Quat::from_rotvec(&v);
        let back = q.to_rotvec();
        assert!((back.norm() - PI).abs() < 1e-9);
        assert!(quat_distance(&Quat::from_rotvec(&back), &q) > 1.0 - 1e-12);
    }

    proptest! {
        #[test]
        fn compose_with_inverse_is_identity(a in arb_pose(), b in arb_pose()) {
            let c = a.compose(&b.compose(&b.inverse()));
            prop_assert!(pose_close(&c, &a, 1e-8));
            prop_assert!(pose_close(&a.compose(&a.inverse()), &Pose::IDENTITY, 1e-9));
        }

        #[test]
        fn compose_is_associative(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!(pose_close(&l, &r, 1e-9));
        }

        #[test]
        fn quaternions_stay_unit_and_canonical(a in arb_quat(), b in arb_quat()) {
            let c = a.mul(&b);
            let n = (c.w * c.w + c.x * c.x + c.y * c.y + c.z * c.z).sqrt();
            prop_assert!((n - 1.0).abs() < 1e-9);
            prop_assert!(c.w >= 0.0);
        }

        #[test]
        fn quat_distance_symmetric_and_sign_invariant(a in arb_quat(), b in arb_quat()) {
            let d = quat_distance(&a, &b);
            prop_assert!((d - quat_distance(&b, &a)).abs() < 1e-15);
            let nb = Quat { w: -b.w, x: -b.x, y: -b.y, z: -b.z };
            prop_assert!((d - quat_distance(&a, &nb)).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&d));
        }

        #[test]
        fn look_at_is_orthonormal(
            ex in -3.0..3.0f64, ey in -3.0..3.0f64, ez in -3.0..3.0f64,
            tx in -1.0..1.0f64, ty in -1.0..1.0f64, tz in -1.0..1.0f64,
        ) {
            let eye = Vec3::new(ex, ey, ez);
            let target = Vec3::new(tx, ty, tz);
            prop_assume!((eye - target).norm() > 1e-3);
            prop_assume!((eye - target).normalize().cross(&Vec3::z()).norm() > 1e-3);
            let p = look_at(&eye, &target, &Vec3::z()).unwrap();
            let m = p.q.to_matrix();
            prop_assert!((m * m.transpose() - Matrix3::identity()).amax() < 1e-9);
            prop_assert!((m.determinant() - 1.0).abs() < 1e-9);
            prop_assert!((p.forward() - (target - eye).normalize()).norm() < 1e-9);
        }

        #[test]
        fn ray_count_matches_pixels(w in 1usize..12, h in 1usize..12) {
            let intr = CameraIntrinsics::from_half_fov(w, h, 0.4).unwrap();
            let bounds = Aabb::cube(Vec3::zeros(), 1.0).unwrap();
            let pose = orbit_pose(&Vec3::zeros(), 3.0, 0.3, 0.2).unwrap();
            let rays = generate_rays(&pose, &intr, &bounds);
            prop_assert_eq!(rays.len(), w * h);
            for r in &rays {
                prop_assert!((r.d.norm() - 1.0).abs() < 1e-9);
                prop_assert!(r.t_near >= 0.0 && r.t_near <= r.t_far);
            }
        }
    }
}
