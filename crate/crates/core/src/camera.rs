//! Pinhole cameras and rigid/similarity transforms.
//!
//! Convention used throughout the workspace: a [`RigidTransform`] `T_ab`
//! maps points expressed in frame `b` into frame `a` as `x_a = R x_b + t`.
//! Camera extrinsics are world-to-camera (`a` = camera, `b` = world), the
//! camera looks down `+z` with `x` right and `y` down, and the continuous
//! pixel coordinate of the pixel in row `r`, column `c` is `(c + 0.5, r + 0.5)`.

use alloc::vec::Vec;
use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type Mat3 = Matrix3<f64>;
pub type Mat4 = Matrix4<f64>;
pub type Vec3 = Vector3<f64>;

const ORTHO_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn to_homogeneous(&self) -> Mat4 {
        let mut m = Mat4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Geodesic rotation angle in radians.
    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    pub fn is_rotation_valid(&self) -> bool {
        is_rotation(&self.rotation)
    }
}

/// Geodesic angle of a rotation matrix, via `atan2` of the skew and trace
/// parts so that small angles keep full precision.
pub fn rotation_angle(r: &Mat3) -> f64 {
    let c = (r.trace() - 1.0) * 0.5;
    let w = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    libm::atan2(0.5 * w.norm(), c)
}

pub fn is_rotation(r: &Mat3) -> bool {
    let rtr = r.transpose() * r;
    (rtr - Mat3::identity()).abs().max() < ORTHO_TOL && (r.determinant() - 1.0).abs() < ORTHO_TOL
}

/// Rotation about `axis` (need not be unit) by `angle` radians.
pub fn axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    let n = axis.norm();
    if n == 0.0 {
        return Mat3::identity();
    }
    let k = axis / n;
    let kx = Mat3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    Mat3::identity() + kx * libm::sin(angle) + kx * kx * (1.0 - libm::cos(angle))
}

/// A similarity `x -> s R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sim3 {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Sim3 {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p * self.scale + self.translation
    }

    /// Re-expresses a camera after the world frame is moved by `self`.
    ///
    /// The image seen by the camera is unchanged; translation scales with the
    /// world.
    pub fn transform_camera(&self, cam: &CameraPose) -> CameraPose {
        let r = cam.rotation * self.rotation.transpose();
        let t = cam.translation * self.scale - r * self.translation;
        CameraPose {
            rotation: r,
            translation: t,
            intrinsics: cam.intrinsics,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    /// World-to-camera rotation.
    pub rotation: Mat3,
    /// World-to-camera translation.
    pub translation: Vec3,
    pub intrinsics: Mat3,
}

impl CameraPose {
    pub fn new(extrinsics: RigidTransform, intrinsics: Mat3) -> Self {
        Self {
            rotation: extrinsics.rotation,
            translation: extrinsics.translation,
            intrinsics,
        }
    }

    pub fn extrinsics(&self) -> RigidTransform {
        RigidTransform::new(self.rotation, self.translation)
    }

    pub fn with_extrinsics(&self, e: RigidTransform) -> Self {
        Self::new(e, self.intrinsics)
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn validate(&self) -> Result<()> {
        if !is_rotation(&self.rotation) {
            return Err(Error::InvalidPose("rotation is not orthonormal with det +1"));
        }
        let k = &self.intrinsics;
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
            return Err(Error::InvalidPose("intrinsics must be upper-triangular"));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(Error::InvalidPose("focal lengths must be positive"));
        }
        Ok(())
    }

    pub fn intrinsics_inverse(&self) -> Result<Mat3> {
        let det = self.intrinsics.determinant();
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(Error::SingularIntrinsics);
        }
        self.intrinsics
            .try_inverse()
            .ok_or(Error::SingularIntrinsics)
    }

    /// World point to `(u, v, z)` with `z` the camera-frame depth.
    pub fn project(&self, p: &Vec3) -> (f64, f64, f64) {
        let pc = self.rotation * p + self.translation;
        let q = self.intrinsics * pc;
        (q.x / q.z, q.y / q.z, pc.z)
    }

    /// Pixel `(u, v)` at camera-frame depth `z` to a world point.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Result<Vec3> {
        let kinv = self.intrinsics_inverse()?;
        let d = kinv * Vec3::new(u, v, 1.0);
        let pc = d * (z / d.z);
        Ok(self.rotation.transpose() * (pc - self.translation))
    }

    /// Unnormalized world-frame direction of the ray through `(u, v)`, scaled so
    /// that its camera-frame `z` component is 1.
    pub fn ray_direction(&self, u: f64, v: f64) -> Result<Vec3> {
        let kinv = self.intrinsics_inverse()?;
        let d = kinv * Vec3::new(u, v, 1.0);
        Ok(self.rotation.transpose() * (d / d.z))
    }
}

/// Pinhole intrinsics with square pixels and a centred principal point.
pub fn intrinsics_from_fov(width: usize, height: usize, horizontal_fov_deg: f64) -> Mat3 {
    let f = (width as f64 * 0.5) / libm::tan(horizontal_fov_deg.to_radians() * 0.5);
    Mat3::new(
        f,
        0.0,
        width as f64 * 0.5,
        0.0,
        f,
        height as f64 * 0.5,
        0.0,
        0.0,
        1.0,
    )
}

/// World-to-camera extrinsics for a camera at `eye` looking at `target`,
/// with `up` pointing roughly toward world `+y`.
pub fn look_at(eye: &Vec3, target: &Vec3, up: &Vec3) -> Result<RigidTransform> {
    let fwd = target - eye;
    if fwd.norm() < 1e-12 {
        return Err(Error::InvalidPose("look_at target coincides with eye"));
    }
    let z = fwd.normalize();
    // Image y points down, so the camera x axis is forward × up.
    let x = z.cross(up);
    if x.norm() < 1e-9 {
        return Err(Error::InvalidPose("look_at up vector parallel to view direction"));
    }
    let x = x.normalize();
    let y = z.cross(&x);
    let r = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    Ok(RigidTransform::new(r, -(r * eye)))
}

/// Re-expresses every pose relative to the last one and rescales so that the
/// farthest camera center lies at distance 1 from the origin.
///
/// Intrinsics pass through. A set whose centers all coincide keeps scale 1.
pub fn normalize_poses(poses: &[CameraPose]) -> Vec<CameraPose> {
    let Some(last) = poses.last() else {
        return Vec::new();
    };
    let to_world = last.extrinsics().inverse();
    let mut out: Vec<CameraPose> = poses
        .iter()
        .map(|p| p.with_extrinsics(p.extrinsics().compose(&to_world)))
        .collect();
    let max_dist = out.iter().map(|p| p.center().norm()).fold(0.0, f64::max);
    if max_dist > 1e-12 {
        for p in &mut out {
            p.translation /= max_dist;
        }
    }
    // The reference camera is exactly the identity after normalization.
    if let Some(l) = out.last_mut() {
        l.rotation = Mat3::identity();
        l.translation = Vec3::zeros();
    }
    out
}

/// `T_ab`: maps camera-`b` coordinates into camera-`a` coordinates.
///
/// Its translation is the position of `b`'s optical center in `a`'s frame.
pub fn relative_pose(a: &CameraPose, b: &CameraPose) -> RigidTransform {
    a.extrinsics().compose(&b.extrinsics().inverse())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PluckerRay {
    pub direction: Vec3,
    pub moment: Vec3,
}

/// Plücker rays through the token-center pixels of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct PluckerMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub rays: Vec<PluckerRay>,
}

impl PluckerMap {
    /// Row-major `tokens × 6` channels `(d, m)`.
    pub fn to_channels(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.rays.len() * 6);
        for r in &self.rays {
            out.extend(r.direction.iter().map(|&x| x as f32));
            out.extend(r.moment.iter().map(|&x| x as f32));
        }
        out
    }
}

/// Token `(row, col)` center in pixel coordinates for an image of the given
/// size split into a `grid_h × grid_w` token grid.
pub fn token_center(
    image_h: usize,
    image_w: usize,
    grid_h: usize,
    grid_w: usize,
    row: usize,
    col: usize,
) -> (f64, f64) {
    let sx = image_w as f64 / grid_w as f64;
    let sy = image_h as f64 / grid_h as f64;
    ((col as f64 + 0.5) * sx, (row as f64 + 0.5) * sy)
}

pub fn plucker_embedding(
    pose: &CameraPose,
    image_h: usize,
    image_w: usize,
    grid_h: usize,
    grid_w: usize,
) -> Result<PluckerMap> {
    if grid_h == 0 || grid_w == 0 {
        return Err(Error::InvalidArgument("token grid must be non-empty".into()));
    }
    let kinv = pose.intrinsics_inverse()?;
    let rt = pose.rotation.transpose();
    let origin = pose.center();
    let mut rays = Vec::with_capacity(grid_h * grid_w);
    for row in 0..grid_h {
        for col in 0..grid_w {
            let (u, v) = token_center(image_h, image_w, grid_h, grid_w, row, col);
            let d = (rt * (kinv * Vec3::new(u, v, 1.0))).normalize();
            rays.push(PluckerRay {
                direction: d,
                moment: origin.cross(&d),
            });
        }
    }
    Ok(PluckerMap {
        grid_h,
        grid_w,
        rays,
    })
}

/// Rotation from the continuous 6D parameterization (two columns,
/// Gram–Schmidt orthonormalized).
pub fn rotation_from_6d(a: &Vec3, b: &Vec3) -> Mat3 {
    let c1 = a.normalize();
    let b2 = b - c1 * c1.dot(b);
    let c2 = b2.normalize();
    let c3 = c1.cross(&c2);
    Mat3::from_columns(&[c1, c2, c3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cam(eye: Vec3) -> CameraPose {
        let e = look_at(&eye, &Vec3::new(0.0, 0.3, 0.0), &Vec3::y()).unwrap();
        CameraPose::new(e, intrinsics_from_fov(32, 32, 60.0))
    }

    #[test]
    fn look_at_projects_target_to_center() {
        let c = cam(Vec3::new(3.0, 1.0, -2.0));
        c.validate().unwrap();
        let (u, v, z) = c.project(&Vec3::new(0.0, 0.3, 0.0));
        assert_abs_diff_eq!(u, 16.0, epsilon = 1e-9);
        assert_abs_diff_eq!(v, 16.0, epsilon = 1e-9);
        assert!(z > 0.0);
        assert_abs_diff_eq!(c.center(), Vec3::new(3.0, 1.0, -2.0), epsilon = 1e-12);
    }

    #[test]
    fn world_up_is_image_up() {
        let c = cam(Vec3::new(0.0, 0.3, -3.0));
        let (_, v_hi, _) = c.project(&Vec3::new(0.0, 1.0, 0.0));
        assert!(v_hi < 16.0);
    }

    #[test]
    fn project_unproject_round_trip() {
        let c = cam(Vec3::new(-2.0, 1.5, 2.5));
        let p = Vec3::new(0.4, -0.2, 0.7);
        let (u, v, z) = c.project(&p);
        let q = c.unproject(u, v, z).unwrap();
        assert_abs_diff_eq!(p, q, epsilon = 1e-12);
    }

    #[test]
    fn single_pose_normalizes_to_identity() {
        let out = normalize_poses(&[cam(Vec3::new(1.0, 2.0, 3.0))]);
        assert_eq!(out[0].rotation, Mat3::identity());
        assert_eq!(out[0].translation, Vec3::zeros());
    }

    #[test]
    fn two_cameras_two_units_apart() {
        let a = cam(Vec3::new(2.0, 0.3, 0.0));
        let b = cam(Vec3::new(2.0, 0.3, 2.0));
        let d = (a.center() - b.center()).norm();
        assert_abs_diff_eq!(d, 2.0, epsilon = 1e-12);
        let out = normalize_poses(&[a, b]);
        assert_abs_diff_eq!(out[0].center().norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn relative_pose_translation_convention() {
        let a = cam(Vec3::new(0.0, 0.3, -3.0));
        let t = Vec3::new(0.5, -0.25, 0.1);
        // b: same orientation, optical center displaced by t in a's frame.
        let b_center = a.center() + a.rotation.transpose() * t;
        let b = CameraPose {
            rotation: a.rotation,
            translation: -(a.rotation * b_center),
            intrinsics: a.intrinsics,
        };
        let rel = relative_pose(&a, &b);
        assert_abs_diff_eq!(rel.translation, t, epsilon = 1e-12);
        assert_abs_diff_eq!(rel.rotation, Mat3::identity(), epsilon = 1e-12);
        let self_rel = relative_pose(&a, &a);
        assert_abs_diff_eq!(self_rel.rotation, Mat3::identity(), epsilon = 1e-12);
        assert_abs_diff_eq!(self_rel.translation, Vec3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn plucker_hand_cases() {
        let o = Vec3::new(1.0, 0.0, 0.0);
        let d = Vec3::new(0.0, 0.0, 1.0);
        assert_eq!(o.cross(&d), Vec3::new(0.0, -1.0, 0.0));

        let at_origin = CameraPose {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
            intrinsics: intrinsics_from_fov(16, 16, 50.0),
        };
        let map = plucker_embedding(&at_origin, 16, 16, 4, 4).unwrap();
        assert_eq!(map.rays.len(), 16);
        for r in &map.rays {
            assert_eq!(r.moment, Vec3::zeros());
            assert_abs_diff_eq!(r.direction.norm(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn singular_intrinsics_rejected() {
        let mut c = cam(Vec3::new(1.0, 1.0, 1.0));
        c.intrinsics[(0, 0)] = 0.0;
        assert_eq!(
            plucker_embedding(&c, 8, 8, 2, 2).unwrap_err(),
            Error::SingularIntrinsics
        );
    }

    #[test]
    fn rotation_6d_is_orthonormal() {
        let r = rotation_from_6d(&Vec3::new(0.3, -1.0, 2.0), &Vec3::new(1.0, 0.2, 0.1));
        assert!(is_rotation(&r));
    }
}
