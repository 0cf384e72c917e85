//! Trajectory alignment and camera-trajectory error metrics.

use alloc::format;
use alloc::vec::Vec;
use nalgebra::SVD;
use serde::{Deserialize, Serialize};

use crate::camera::{normalize_poses, relative_pose, CameraPose, Mat3, Sim3, Vec3};
use crate::{Error, Result};

/// Closed-form least-squares similarity aligning `est` onto `gt`:
/// minimizes `Σ ‖gt_i − (s R est_i + t)‖²`.
pub fn umeyama_align(est: &[Vec3], gt: &[Vec3]) -> Result<Sim3> {
    if est.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            expected: gt.len(),
            actual: est.len(),
        });
    }
    let n = est.len();
    if n < 3 {
        return Err(Error::DegenerateTrajectory(format!(
            "need at least 3 camera centers for Sim(3) alignment, got {n}"
        )));
    }
    let inv_n = 1.0 / n as f64;
    let mu_e = est.iter().fold(Vec3::zeros(), |a, p| a + p) * inv_n;
    let mu_g = gt.iter().fold(Vec3::zeros(), |a, p| a + p) * inv_n;

    let mut cov = Mat3::zeros();
    let mut var_e = 0.0;
    for (e, g) in est.iter().zip(gt) {
        let de = e - mu_e;
        let dg = g - mu_g;
        cov += dg * de.transpose();
        var_e += de.norm_squared();
    }
    cov *= inv_n;
    var_e *= inv_n;

    let spread = |pts: &[Vec3], mu: &Vec3| {
        let mut m = Mat3::zeros();
        for p in pts {
            let d = p - mu;
            m += d * d.transpose();
        }
        SVD::new(m, false, false).singular_values
    };
    for (name, pts, mu) in [("estimated", est, &mu_e), ("reference", gt, &mu_g)] {
        let sv = spread(pts, mu);
        if sv[0] < 1e-18 {
            return Err(Error::DegenerateTrajectory(format!(
                "{name} camera centers are coincident"
            )));
        }
        if sv[1] <= 1e-12 * sv[0] {
            return Err(Error::DegenerateTrajectory(format!(
                "{name} camera centers are collinear"
            )));
        }
    }

    let svd = SVD::new(cov, true, true);
    let u = svd.u.ok_or_else(|| Error::DegenerateTrajectory("svd failed".into()))?;
    let vt = svd
        .v_t
        .ok_or_else(|| Error::DegenerateTrajectory("svd failed".into()))?;
    let d = svd.singular_values;
    let mut sign = Mat3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let rotation = u * sign * vt;
    let trace_ds = d[0] * sign[(0, 0)] + d[1] * sign[(1, 1)] + d[2] * sign[(2, 2)];
    let scale = trace_ds / var_e;
    let translation = mu_g - rotation * mu_e * scale;
    Ok(Sim3 {
        scale,
        rotation,
        translation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseErrors {
    /// RMSE of camera centers after Sim(3) alignment (normalized frame).
    pub ate: f64,
    /// Mean geodesic rotation error of consecutive relative poses, degrees.
    pub rpe_r_deg: f64,
    /// Mean translation error of consecutive relative poses (normalized frame).
    pub rpe_t: f64,
}

/// ATE / RPE between an estimated and a reference trajectory.
///
/// Both trajectories are first normalized (last view at the origin, farthest
/// camera at unit distance), so the metrics ignore the world frame and scale
/// of either input.
pub fn pose_errors(est: &[CameraPose], gt: &[CameraPose]) -> Result<PoseErrors> {
    if est.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            expected: gt.len(),
            actual: est.len(),
        });
    }
    let est = normalize_poses(est);
    let gt = normalize_poses(gt);
    let ce: Vec<Vec3> = est.iter().map(CameraPose::center).collect();
    let cg: Vec<Vec3> = gt.iter().map(CameraPose::center).collect();
    let sim = umeyama_align(&ce, &cg)?;
    let sq: f64 = ce
        .iter()
        .zip(&cg)
        .map(|(e, g)| (g - sim.apply(e)).norm_squared())
        .sum();
    let ate = libm::sqrt(sq / ce.len() as f64);

    let pairs = est.len() - 1;
    let mut rot = 0.0;
    let mut trans = 0.0;
    for i in 0..pairs {
        let re = relative_pose(&est[i], &est[i + 1]);
        let rg = relative_pose(&gt[i], &gt[i + 1]);
        let err = rg.inverse().compose(&re);
        rot += err.rotation_angle().to_degrees();
        trans += err.translation.norm();
    }
    Ok(PoseErrors {
        ate,
        rpe_r_deg: rot / pairs as f64,
        rpe_t: trans / pairs as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::axis_angle;
    use approx::assert_abs_diff_eq;

    fn pts() -> Vec<Vec3> {
        alloc::vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.2, -0.3),
            Vec3::new(0.4, 1.1, 0.5),
            Vec3::new(-0.7, 0.3, 0.9),
        ]
    }

    #[test]
    fn identity_alignment() {
        let p = pts();
        let s = umeyama_align(&p, &p).unwrap();
        assert_abs_diff_eq!(s.scale, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.rotation, Mat3::identity(), epsilon = 1e-12);
        assert_abs_diff_eq!(s.translation, Vec3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn recovers_injected_similarity() {
        let p = pts();
        let truth = Sim3 {
            scale: 2.7,
            rotation: axis_angle(&Vec3::new(0.2, 1.0, -0.4), 1.1),
            translation: Vec3::new(3.0, -1.0, 0.5),
        };
        let q: Vec<Vec3> = p.iter().map(|x| truth.apply(x)).collect();
        let s = umeyama_align(&p, &q).unwrap();
        assert_abs_diff_eq!(s.scale, truth.scale, epsilon = 1e-9);
        assert_abs_diff_eq!(s.rotation, truth.rotation, epsilon = 1e-9);
        assert_abs_diff_eq!(s.translation, truth.translation, epsilon = 1e-9);
    }

    #[test]
    fn degenerate_inputs() {
        let p = pts();
        assert!(matches!(
            umeyama_align(&p[..2], &p[..2]),
            Err(Error::DegenerateTrajectory(_))
        ));
        let line: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        let err = umeyama_align(&line, &line).unwrap_err();
        assert!(matches!(err, Error::DegenerateTrajectory(ref m) if m.contains("collinear")));
    }
}
