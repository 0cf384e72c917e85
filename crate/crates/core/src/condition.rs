//! Camera conditioning shared by the diffusion models: Plücker ray maps, the
//! source/target indicator, and the per-view projective matrices used by the
//! relative-pose attention encoding.

use alloc::vec::Vec;
use rand::Rng;

use crate::camera::{normalize_poses, plucker_embedding, CameraPose, Mat4, RigidTransform};
use crate::{Error, Result};

/// Probability that a training sample has its camera embeddings dropped.
pub const CAMERA_DROPOUT_P: f64 = 0.10;

/// Per-view camera conditioning over a `grid_h × grid_w` token grid. All
/// cameras are normalized relative to the last view before anything is
/// derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraConditioning {
    pub views: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// `(height, width)` of the images in pixels.
    pub image_size: (usize, usize),
    /// `views × tokens × 6`, row-major.
    pub plucker: Vec<f32>,
    /// `views × tokens`; 0 = source, 1 = target.
    pub indicator: Vec<f32>,
    /// Normalized cameras the maps were computed from.
    pub cameras: Vec<CameraPose>,
    /// Per-view projective matrix `K̃ E` (row-major 4×4).
    pub projective: Vec<[f64; 16]>,
    pub camera_dropped: bool,
}

impl CameraConditioning {
    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Plücker and indicator channels per token: `views × tokens × 7`.
    pub fn channels7(&self) -> Vec<f32> {
        let t = self.tokens();
        let mut out = Vec::with_capacity(self.views * t * 7);
        for i in 0..self.views * t {
            out.extend_from_slice(&self.plucker[i * 6..i * 6 + 6]);
            out.push(self.indicator[i]);
        }
        out
    }

    /// A copy with camera information removed: Plücker rays zeroed and all
    /// extrinsics replaced by the identity. The indicator is kept.
    pub fn dropped(&self) -> Self {
        let mut out = self.clone();
        out.plucker.iter_mut().for_each(|x| *x = 0.0);
        for (cam, p) in out.cameras.iter_mut().zip(out.projective.iter_mut()) {
            *cam = cam.with_extrinsics(RigidTransform::identity());
            *p = flatten(&projective_matrix(cam, self.image_size.0, self.image_size.1));
        }
        out.camera_dropped = true;
        out
    }

    /// Drops cameras with probability `p`; returns whether it did.
    pub fn maybe_drop<R: Rng + ?Sized>(&mut self, rng: &mut R, p: f64) -> bool {
        if rng.random::<f64>() < p {
            *self = self.dropped();
            true
        } else {
            false
        }
    }
}

fn flatten(m: &Mat4) -> [f64; 16] {
    let mut out = [0.0; 16];
    for r in 0..4 {
        for c in 0..4 {
            out[r * 4 + c] = m[(r, c)];
        }
    }
    out
}

/// `K̃ E`: intrinsics normalized by image size, lifted to 4×4, times the
/// homogeneous world-to-camera transform.
pub fn projective_matrix(cam: &CameraPose, image_h: usize, image_w: usize) -> Mat4 {
    let mut k = Mat4::identity();
    let sx = 1.0 / image_w as f64;
    let sy = 1.0 / image_h as f64;
    for c in 0..3 {
        k[(0, c)] = cam.intrinsics[(0, c)] * sx;
        k[(1, c)] = cam.intrinsics[(1, c)] * sy;
        k[(2, c)] = cam.intrinsics[(2, c)];
    }
    k * cam.extrinsics().to_homogeneous()
}

/// Builds the camera conditioning for `poses` with `is_target[i]` marking the
/// views to be generated.
pub fn camera_conditioning(
    poses: &[CameraPose],
    is_target: &[bool],
    image_h: usize,
    image_w: usize,
    grid_h: usize,
    grid_w: usize,
) -> Result<CameraConditioning> {
    if poses.is_empty() {
        return Err(Error::InvalidArgument("camera conditioning needs at least one view".into()));
    }
    if poses.len() != is_target.len() {
        return Err(Error::ShapeMismatch {
            expected: poses.len(),
            actual: is_target.len(),
        });
    }
    for p in poses {
        p.validate()?;
    }
    let cameras = normalize_poses(poses);
    let t = grid_h * grid_w;
    let mut plucker = Vec::with_capacity(poses.len() * t * 6);
    let mut indicator = Vec::with_capacity(poses.len() * t);
    let mut projective = Vec::with_capacity(poses.len());
    for (cam, &tgt) in cameras.iter().zip(is_target) {
        plucker.extend(plucker_embedding(cam, image_h, image_w, grid_h, grid_w)?.to_channels());
        indicator.extend(core::iter::repeat_n(if tgt { 1.0 } else { 0.0 }, t));
        let m = projective_matrix(cam, image_h, image_w);
        if m.try_inverse().is_none() {
            return Err(Error::SingularIntrinsics);
        }
        projective.push(flatten(&m));
    }
    Ok(CameraConditioning {
        views: poses.len(),
        grid_h,
        grid_w,
        image_size: (image_h, image_w),
        plucker,
        indicator,
        cameras,
        projective,
        camera_dropped: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{intrinsics_from_fov, look_at, Vec3};
    use rand::SeedableRng;

    fn poses() -> Vec<CameraPose> {
        [Vec3::new(2.0, 1.0, 0.5), Vec3::new(0.0, 1.2, 2.5), Vec3::new(-2.0, 0.8, 1.0)]
            .iter()
            .map(|e| {
                let ex = look_at(e, &Vec3::zeros(), &Vec3::y()).unwrap();
                CameraPose::new(ex, intrinsics_from_fov(32, 32, 60.0))
            })
            .collect()
    }

    #[test]
    fn indicator_and_shapes() {
        let c = camera_conditioning(&poses(), &[false, true, false], 32, 32, 8, 8).unwrap();
        assert_eq!(c.plucker.len(), 3 * 64 * 6);
        assert!(c.indicator[..64].iter().all(|&x| x == 0.0));
        assert!(c.indicator[64..128].iter().all(|&x| x == 1.0));
        assert_eq!(c.channels7().len(), 3 * 64 * 7);
    }

    #[test]
    fn drop_zeroes_rays_and_keeps_indicator() {
        let c = camera_conditioning(&poses(), &[false, true, false], 32, 32, 8, 8).unwrap();
        let d = c.dropped();
        assert!(d.plucker.iter().all(|&x| x == 0.0));
        assert_eq!(d.indicator, c.indicator);
        assert!(d.camera_dropped);
        // With identical extrinsics every relative transform is the identity.
        assert_eq!(d.projective[0], d.projective[1]);
        for cam in &d.cameras {
            assert_eq!(cam.extrinsics(), RigidTransform::identity());
        }
    }

    #[test]
    fn dropout_rate() {
        let c = camera_conditioning(&poses(), &[false, true, false], 32, 32, 2, 2).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| c.clone().maybe_drop(&mut rng, CAMERA_DROPOUT_P))
            .count();
        let rate = hits as f64 / n as f64;
        assert!((rate - 0.10).abs() <= 0.01, "rate {rate}");
    }
}
