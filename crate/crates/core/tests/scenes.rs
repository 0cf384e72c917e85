use gld_core::camera::{intrinsics_from_fov, CameraPose, Mat3, RigidTransform, Vec3};
use gld_core::metrics::reprojection_error;
use gld_core::raster::{DepthMap, Image};
use gld_core::scene::{generate_scene, gt_correspondences, MIN_COVERAGE};
use gld_core::{MultiViewSequence, SceneSpec, TrajectoryKind, ViewSample};

fn spec(seed: u64, trajectory: TrajectoryKind) -> SceneSpec {
    SceneSpec {
        seed,
        trajectory,
        image_width: 32,
        image_height: 32,
        ..SceneSpec::default()
    }
}

fn flat_view(camera: CameraPose, w: usize, h: usize, depth: f32) -> ViewSample {
    ViewSample {
        image: Image::new(w, h),
        depth: DepthMap::from_data(w, h, vec![depth; w * h]).unwrap(),
        camera,
    }
}

#[test]
fn generation_is_deterministic() {
    for kind in [TrajectoryKind::Orbit, TrajectoryKind::Dolly, TrajectoryKind::RandomWalk] {
        let a = generate_scene(&spec(11, kind)).unwrap();
        let b = generate_scene(&spec(11, kind)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
    }
}

#[test]
fn coverage_and_valid_rotations() {
    for seed in 0..12 {
        let kind = [TrajectoryKind::Orbit, TrajectoryKind::Dolly, TrajectoryKind::RandomWalk][seed as usize % 3];
        let seq = generate_scene(&spec(seed, kind)).unwrap();
        for v in &seq.views {
            assert!(v.depth.coverage() >= MIN_COVERAGE);
            v.camera.validate().unwrap();
            assert!(v.image.data.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }
}

#[test]
fn two_view_orbit_has_distinct_cameras() {
    let s = SceneSpec {
        n_views: 2,
        ..spec(3, TrajectoryKind::Orbit)
    };
    let seq = generate_scene(&s).unwrap();
    assert_eq!(seq.len(), 2);
    assert_ne!(seq.views[0].camera, seq.views[1].camera);
}

#[test]
fn center_pixel_round_trip_in_same_view() {
    let seq = generate_scene(&spec(5, TrajectoryKind::Orbit)).unwrap();
    let v = &seq.views[0];
    let (u, vv) = (16.5, 16.5);
    let z = v.depth.get(16, 16) as f64;
    let p = v.camera.unproject(u, vv, z).unwrap();
    let (u2, v2, z2) = v.camera.project(&p);
    assert!((u2 - u).abs() < 1e-9 && (v2 - vv).abs() < 1e-9 && (z2 - z).abs() < 1e-9);
}

#[test]
fn degenerate_trajectory_rejected() {
    let s = SceneSpec {
        frame_interval_deg: [0.0, 0.0],
        ..spec(1, TrajectoryKind::Orbit)
    };
    let err = generate_scene(&s).unwrap_err();
    assert!(err.to_string().contains("coincide"), "{err}");
}

#[test]
fn correspondences_reproject_and_pass_occlusion_test() {
    for seed in 0..6 {
        let seq = generate_scene(&spec(seed, TrajectoryKind::Orbit)).unwrap();
        let c = gt_correspondences(&seq, 0, 2, 200).unwrap();
        assert!(!c.pairs.is_empty());
        for p in &c.pairs {
            let (va, vb) = (&seq.views[0], &seq.views[2]);
            let z = va.depth.get(p.a.1 as usize, p.a.0 as usize) as f64;
            let x = va.camera.unproject(p.a.0, p.a.1, z).unwrap();
            let (u, v, zb) = vb.camera.project(&x);
            assert!(((u - p.b.0).powi(2) + (v - p.b.1).powi(2)).sqrt() <= 0.5);
            let d = vb.depth.get(v as usize, u as usize) as f64;
            assert!(((zb - d) / d).abs() <= 0.01);
        }
    }
}

#[test]
fn identical_views_map_pixels_to_themselves() {
    let seq = generate_scene(&spec(2, TrajectoryKind::Orbit)).unwrap();
    let c = gt_correspondences(&seq, 1, 1, 50).unwrap();
    assert_eq!(c.pairs.len(), 50);
    for p in c.pairs {
        assert!((p.a.0 - p.b.0).abs() < 1e-9 && (p.a.1 - p.b.1).abs() < 1e-9);
    }
}

#[test]
fn fronto_parallel_disparity_matches_closed_form() {
    let (w, h) = (32, 32);
    let k = intrinsics_from_fov(w, h, 60.0);
    let f = k[(0, 0)];
    let depth = 4.0f32;
    let baseline = 0.25;
    let a = CameraPose::new(RigidTransform::identity(), k);
    // Center at (baseline, 0, 0): t = −R c.
    let b = CameraPose::new(RigidTransform::new(Mat3::identity(), Vec3::new(-baseline, 0.0, 0.0)), k);
    let seq = MultiViewSequence {
        scene_id: "flat".into(),
        spec: SceneSpec::default(),
        views: vec![flat_view(a, w, h, depth), flat_view(b, w, h, depth)],
    };
    let c = gt_correspondences(&seq, 0, 1, 200).unwrap();
    assert!(!c.pairs.is_empty());
    let expected = f * baseline / depth as f64;
    for p in &c.pairs {
        assert!((p.a.0 - p.b.0 - expected).abs() < 1e-9);
        assert!((p.a.1 - p.b.1).abs() < 1e-9);
    }
}

#[test]
fn opposing_cameras_have_no_correspondences() {
    let (w, h) = (16, 16);
    let k = intrinsics_from_fov(w, h, 60.0);
    let a = CameraPose::new(RigidTransform::identity(), k);
    let flip = Mat3::from_diagonal(&Vec3::new(-1.0, 1.0, -1.0));
    let b = CameraPose::new(RigidTransform::new(flip, Vec3::zeros()), k);
    let seq = MultiViewSequence {
        scene_id: "opposed".into(),
        spec: SceneSpec::default(),
        views: vec![flat_view(a, w, h, 3.0), flat_view(b, w, h, 3.0)],
    };
    let c = gt_correspondences(&seq, 0, 1, 10).unwrap();
    assert!(c.pairs.is_empty());
    assert!(c.shortfall);
}

#[test]
fn ground_truth_depth_reprojects_below_half_pixel() {
    for seed in 0..8 {
        let kind = [TrajectoryKind::Orbit, TrajectoryKind::Dolly, TrajectoryKind::RandomWalk][seed as usize % 3];
        let seq = generate_scene(&spec(seed, kind)).unwrap();
        let depths: Vec<DepthMap> = seq.views.iter().map(|v| v.depth.clone()).collect();
        let r = reprojection_error(&depths, &seq.cameras()).unwrap();
        assert!(r.mean_cycle_px < 0.5, "seed {seed}: {r:?}");

        let mut doubled = depths.clone();
        doubled[0].data.iter_mut().for_each(|d| {
            if DepthMap::is_valid_value(*d) {
                *d *= 2.0
            }
        });
        let worse = reprojection_error(&doubled, &seq.cameras()).unwrap();
        assert!(worse.mean_depth_residual > r.mean_depth_residual);
        assert!(worse.score() > r.score());
    }
}
