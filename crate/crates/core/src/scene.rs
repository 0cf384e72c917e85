//! Procedural multi-view scenes with analytic depth.
//!
//! A scene is a textured ground square plus randomly placed spheres, boxes and
//! upright panels, lit by one directional light with an ambient term. Views
//! are rendered by exact ray casting, so depth, intrinsics and extrinsics are
//! ground truth by construction.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{axis_angle, intrinsics_from_fov, look_at, CameraPose, Mat3, Vec3};
use crate::raster::{quantize_u8, DepthMap, Image};
use crate::{Error, Result};

/// Minimum fraction of non-background pixels per view.
pub const MIN_COVERAGE: f64 = 0.30;
const MAX_ATTEMPTS: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryKind {
    Orbit,
    Dolly,
    RandomWalk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    /// Objects placed on the ground, each a sphere, box or panel.
    pub n_primitives: usize,
    /// Half-width of the region objects are placed in (world units).
    pub extent: f64,
    /// Texture frequency in cycles per world unit.
    pub texture_freq: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub n_views: usize,
    pub trajectory: TrajectoryKind,
    /// Range of the per-frame camera step, in degrees of arc around the
    /// scene center (dolly steps use the equivalent arc length).
    pub frame_interval_deg: [f64; 2],
    pub fov_deg: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_primitives: 6,
            extent: 2.0,
            texture_freq: 1.5,
            image_width: 64,
            image_height: 64,
            n_views: 8,
            trajectory: TrajectoryKind::Orbit,
            frame_interval_deg: [6.0, 14.0],
            fov_deg: 60.0,
        }
    }
}

impl SceneSpec {
    pub fn scene_id(&self) -> String {
        format!("scene_{:08}", self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_views < 2 {
            return Err(Error::InvalidArgument(format!(
                "a sequence needs at least 2 views, got {}",
                self.n_views
            )));
        }
        if self.image_width == 0 || self.image_height == 0 {
            return Err(Error::InvalidArgument("image size must be non-zero".into()));
        }
        let [lo, hi] = self.frame_interval_deg;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "frame interval range [{lo}, {hi}] is not an ordered non-negative range"
            )));
        }
        if !(self.extent > 0.0 && self.fov_deg > 0.0 && self.fov_deg < 170.0) {
            return Err(Error::InvalidArgument("extent and fov must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewSample {
    pub image: Image,
    pub depth: DepthMap,
    pub camera: CameraPose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewSequence {
    pub scene_id: String,
    pub spec: SceneSpec,
    pub views: Vec<ViewSample>,
}

impl MultiViewSequence {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.spec.image_height, self.spec.image_width)
    }

    pub fn cameras(&self) -> Vec<CameraPose> {
        self.views.iter().map(|v| v.camera).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Material {
    base: [f64; 3],
    accent: [f64; 3],
    freq: f64,
    phase: [f64; 3],
}

impl Material {
    fn random(rng: &mut ChaCha8Rng, freq: f64) -> Self {
        let mut c = || [rng.random_range(0.1..0.95), rng.random_range(0.1..0.95), rng.random_range(0.1..0.95)];
        let base = c();
        let accent = c();
        Self {
            base,
            accent,
            freq: freq * rng.random_range(0.6..1.6),
            phase: [
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.0..2.0 * PI),
            ],
        }
    }

    fn albedo(&self, p: &Vec3) -> [f64; 3] {
        let w = 2.0 * PI * self.freq;
        let s = 0.5 * libm::sin(w * p.x + self.phase[0]) * libm::sin(w * p.z + self.phase[2])
            + 0.5 * libm::sin(0.7 * w * (p.x + p.y - p.z) + self.phase[1]);
        let a = 0.5 + 0.5 * s;
        core::array::from_fn(|k| self.base[k] * (1.0 - a) + self.accent[k] * a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Sphere {
        center: Vec3,
        radius: f64,
    },
    /// Box rotated by `yaw` about the world y axis.
    Cuboid {
        center: Vec3,
        half: Vec3,
        yaw: f64,
    },
    /// Square patch through `center` with unit `normal`, spanned by `u`, `v`.
    Panel {
        center: Vec3,
        normal: Vec3,
        u: Vec3,
        v: Vec3,
        half: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Ray parameter; equals the camera-frame depth for camera rays built by
    /// [`CameraPose::ray_direction`].
    pub t: f64,
    pub point: Vec3,
    pub normal: Vec3,
    primitive: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    shapes: Vec<(Shape, Material)>,
    pub target: Vec3,
    light: Vec3,
}

const EPS_T: f64 = 1e-9;

impl Shape {
    fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<(f64, Vec3)> {
        match *self {
            Shape::Sphere { center, radius } => {
                let oc = o - center;
                let a = d.dot(d);
                let b = oc.dot(d);
                let c = oc.dot(&oc) - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = libm::sqrt(disc);
                let mut t = (-b - sq) / a;
                if t <= EPS_T {
                    t = (-b + sq) / a;
                }
                if t <= EPS_T {
                    return None;
                }
                let p = o + d * t;
                Some((t, (p - center) / radius))
            }
            Shape::Cuboid { center, half, yaw } => {
                let rot = axis_angle(&Vec3::y(), yaw);
                let rt = rot.transpose();
                let lo = rt * (o - center);
                let ld = rt * d;
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut axis_near = 0;
                let mut axis_far = 0;
                for k in 0..3 {
                    if ld[k].abs() < 1e-15 {
                        if lo[k].abs() > half[k] {
                            return None;
                        }
                        continue;
                    }
                    let t1 = (-half[k] - lo[k]) / ld[k];
                    let t2 = (half[k] - lo[k]) / ld[k];
                    let (ta, tb) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
                    if ta > t_near {
                        t_near = ta;
                        axis_near = k;
                    }
                    if tb < t_far {
                        t_far = tb;
                        axis_far = k;
                    }
                }
                if t_near > t_far {
                    return None;
                }
                let (t, axis) = if t_near > EPS_T {
                    (t_near, axis_near)
                } else if t_far > EPS_T {
                    (t_far, axis_far)
                } else {
                    return None;
                };
                let lp = lo + ld * t;
                let mut n = Vec3::zeros();
                n[axis] = if lp[axis] >= 0.0 { 1.0 } else { -1.0 };
                Some((t, rot * n))
            }
            Shape::Panel {
                center,
                normal,
                u,
                v,
                half,
            } => {
                let denom = normal.dot(d);
                if denom.abs() < 1e-15 {
                    return None;
                }
                let t = normal.dot(&(center - o)) / denom;
                if t <= EPS_T {
                    return None;
                }
                let p = o + d * t;
                let rel = p - center;
                if rel.dot(&u).abs() > half || rel.dot(&v).abs() > half {
                    return None;
                }
                Some((t, normal))
            }
        }
    }
}

impl Scene {
    pub fn build(spec: &SceneSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_5ce0e);
        let e = spec.extent;
        let mut shapes = Vec::with_capacity(spec.n_primitives + 1);
        shapes.push((
            Shape::Panel {
                center: Vec3::zeros(),
                normal: Vec3::y(),
                u: Vec3::x(),
                v: Vec3::z(),
                half: 3.0 * e,
            },
            Material::random(&mut rng, spec.texture_freq),
        ));
        for _ in 0..spec.n_primitives {
            let x = rng.random_range(-0.8 * e..0.8 * e);
            let z = rng.random_range(-0.8 * e..0.8 * e);
            let kind = rng.random_range(0..3u8);
            let shape = match kind {
                0 => {
                    let r = rng.random_range(0.15 * e..0.4 * e);
                    Shape::Sphere {
                        center: Vec3::new(x, r, z),
                        radius: r,
                    }
                }
                1 => {
                    let half = Vec3::new(
                        rng.random_range(0.12 * e..0.3 * e),
                        rng.random_range(0.12 * e..0.35 * e),
                        rng.random_range(0.12 * e..0.3 * e),
                    );
                    Shape::Cuboid {
                        center: Vec3::new(x, half.y, z),
                        half,
                        yaw: rng.random_range(0.0..PI),
                    }
                }
                _ => {
                    let half = rng.random_range(0.2 * e..0.4 * e);
                    let yaw: f64 = rng.random_range(0.0..PI);
                    let normal = Vec3::new(libm::cos(yaw), 0.0, libm::sin(yaw));
                    Shape::Panel {
                        center: Vec3::new(x, half, z),
                        normal,
                        u: Vec3::y(),
                        v: normal.cross(&Vec3::y()),
                        half,
                    }
                }
            };
            shapes.push((shape, Material::random(&mut rng, spec.texture_freq)));
        }
        Self {
            shapes,
            target: Vec3::new(0.0, 0.25 * e, 0.0),
            light: Vec3::new(0.4, 1.0, -0.3).normalize(),
        }
    }

    /// Nearest intersection along `o + t d`, `t > 0`.
    pub fn raycast(&self, o: &Vec3, d: &Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, (shape, _)) in self.shapes.iter().enumerate() {
            if let Some((t, n)) = shape.intersect(o, d) {
                if best.is_none_or(|b| t < b.t) {
                    best = Some(Hit {
                        t,
                        point: o + d * t,
                        normal: n,
                        primitive: i,
                    });
                }
            }
        }
        best
    }

    fn shade(&self, hit: &Hit, view_dir: &Vec3) -> [f64; 3] {
        let mut n = hit.normal;
        if n.dot(view_dir) > 0.0 {
            n = -n;
        }
        let lambert = n.dot(&self.light).max(0.0);
        let albedo = self.shapes[hit.primitive].1.albedo(&hit.point);
        let k = 0.3 + 0.7 * lambert;
        core::array::from_fn(|c| albedo[c] * k)
    }

    pub fn render(&self, camera: &CameraPose, width: usize, height: usize) -> Result<ViewSample> {
        let mut image = Image::new(width, height);
        let mut depth = DepthMap::new(width, height);
        let origin = camera.center();
        for row in 0..height {
            for col in 0..width {
                let d = camera.ray_direction(col as f64 + 0.5, row as f64 + 0.5)?;
                if let Some(hit) = self.raycast(&origin, &d) {
                    let rgb = self.shade(&hit, &d);
                    image.set_pixel(
                        row,
                        col,
                        core::array::from_fn(|c| quantize_u8(rgb[c] as f32) as f32 / 255.0),
                    );
                    depth.data[row * width + col] = hit.t as f32;
                }
            }
        }
        Ok(ViewSample {
            image,
            depth,
            camera: *camera,
        })
    }
}

fn camera_centers(spec: &SceneSpec, scene: &Scene, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let e = spec.extent;
    let [lo, hi] = spec.frame_interval_deg;
    let step = |rng: &mut ChaCha8Rng| {
        if hi > lo {
            rng.random_range(lo..hi).to_radians()
        } else {
            lo.to_radians()
        }
    };
    let radius = 2.4 * e * rng.random_range(0.9..1.1);
    let height = e * rng.random_range(0.55..0.95);
    let mut angle: f64 = rng.random_range(0.0..2.0 * PI);
    let on_orbit = |a: f64, r: f64, h: f64| Vec3::new(r * libm::cos(a), h, r * libm::sin(a));
    let n = spec.n_views;
    match spec.trajectory {
        TrajectoryKind::Orbit => {
            let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let mut out = Vec::with_capacity(n);
            for k in 0..n {
                if k > 0 {
                    angle += dir * step(rng);
                }
                out.push(on_orbit(angle, radius, height));
            }
            out
        }
        TrajectoryKind::Dolly => {
            let start = on_orbit(angle, radius * 1.2, height);
            let toward = (scene.target - start).normalize();
            let lateral = toward.cross(&Vec3::y()).normalize() * rng.random_range(-0.2..0.2) * e;
            let mut out = Vec::with_capacity(n);
            let mut p = start + lateral;
            for k in 0..n {
                if k > 0 {
                    p += toward * (step(rng) * radius * 0.5);
                }
                out.push(p);
            }
            out
        }
        TrajectoryKind::RandomWalk => {
            let mut r = radius;
            let mut h = height;
            let mut out = Vec::with_capacity(n);
            for k in 0..n {
                if k > 0 {
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    angle += sign * step(rng);
                    r = (r * rng.random_range(0.95..1.05)).clamp(2.0 * e, 3.0 * e);
                    h = (h + rng.random_range(-0.1..0.1) * e).clamp(0.4 * e, 1.1 * e);
                }
                out.push(on_orbit(angle, r, h));
            }
            out
        }
    }
}

fn cameras_for(spec: &SceneSpec, scene: &Scene, rng: &mut ChaCha8Rng) -> Result<Vec<CameraPose>> {
    let centers = camera_centers(spec, scene, rng);
    let mut max_sep: f64 = 0.0;
    for a in &centers {
        for b in &centers {
            max_sep = max_sep.max((a - b).norm());
        }
    }
    if max_sep < 1e-9 * spec.extent {
        return Err(Error::DegenerateTrajectory(
            "all camera centers coincide".into(),
        ));
    }
    let k: Mat3 = intrinsics_from_fov(spec.image_width, spec.image_height, spec.fov_deg);
    centers
        .iter()
        .map(|c| {
            let jitter = match spec.trajectory {
                TrajectoryKind::RandomWalk => Vec3::new(
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.1..0.1),
                ) * spec.extent,
                _ => Vec3::zeros(),
            };
            Ok(CameraPose::new(look_at(c, &(scene.target + jitter), &Vec3::y())?, k))
        })
        .collect()
}

/// Renders the sequence described by `spec`. Pure function of `spec`.
pub fn generate_scene(spec: &SceneSpec) -> Result<MultiViewSequence> {
    spec.validate()?;
    let scene = Scene::build(spec);
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e37_79b9).wrapping_add(attempt));
        let cameras = cameras_for(spec, &scene, &mut rng)?;
        let views = cameras
            .iter()
            .map(|c| scene.render(c, spec.image_width, spec.image_height))
            .collect::<Result<Vec<_>>>()?;
        if views.iter().all(|v| v.depth.coverage() >= MIN_COVERAGE) {
            return Ok(MultiViewSequence {
                scene_id: spec.scene_id(),
                spec: spec.clone(),
                views,
            });
        }
    }
    Err(Error::SceneGeneration(format!(
        "{}: no trajectory with {:.0}% coverage after {MAX_ATTEMPTS} attempts",
        spec.scene_id(),
        MIN_COVERAGE * 100.0
    )))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    /// Continuous pixel coordinate in the first view.
    pub a: (f64, f64),
    /// Continuous pixel coordinate in the second view.
    pub b: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Correspondences {
    pub pairs: Vec<Correspondence>,
    /// Fewer co-visible pixels existed than were requested.
    pub shortfall: bool,
}

/// Relative depth tolerance of the occlusion test.
pub const OCCLUSION_TOL: f64 = 0.01;

/// Whether depth `z` at continuous coordinate `(u, v)` agrees with the
/// bilinear interpolation of the four surrounding pixel centers (clamped at
/// the border). Interpolation is exact on planes, while a silhouette between
/// the samples mixes in the occluder's depth.
fn bilinear_agrees(depth: &DepthMap, u: f64, v: f64, z: f64) -> bool {
    let (x, y) = (u - 0.5, v - 0.5);
    let (c0, r0) = (libm::floor(x), libm::floor(y));
    let (fx, fy) = (x - c0, y - r0);
    let at = |r: f64, c: f64| {
        let r = (r.max(0.0) as usize).min(depth.height - 1);
        let c = (c.max(0.0) as usize).min(depth.width - 1);
        depth.get(r, c)
    };
    let mut interp = 0.0;
    for (dr, dc, wgt) in [
        (0.0, 0.0, (1.0 - fy) * (1.0 - fx)),
        (0.0, 1.0, (1.0 - fy) * fx),
        (1.0, 0.0, fy * (1.0 - fx)),
        (1.0, 1.0, fy * fx),
    ] {
        let d = at(r0 + dr, c0 + dc);
        if !DepthMap::is_valid_value(d) {
            return false;
        }
        interp += wgt * d as f64;
    }
    ((z - interp) / interp).abs() <= OCCLUSION_TOL
}

/// Ground-truth pixel correspondences from view `i` to view `j`.
///
/// Pixel centers of view `i` are visited in a fixed pseudo-random order,
/// unprojected with their depth and projected into `j`; a pair is kept when it
/// lands inside `j` and agrees with `j`'s depth within `OCCLUSION_TOL`
/// relative, both at the landing pixel and bilinearly interpolated. The
/// second test rejects points just behind a silhouette, where the nearest
/// depth sample alone can still see the right surface.
pub fn gt_correspondences(seq: &MultiViewSequence, i: usize, j: usize, n: usize) -> Result<Correspondences> {
    let (va, vb) = match (seq.views.get(i), seq.views.get(j)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "view indices {i}, {j} out of range for {} views",
                seq.len()
            )))
        }
    };
    let (w, h) = (va.depth.width, va.depth.height);
    let mut order: Vec<usize> = (0..w * h).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(((i as u64) << 32) ^ j as u64 ^ 0xc04e);
    for k in (1..order.len()).rev() {
        let s = rng.random_range(0..=k);
        order.swap(k, s);
    }
    let mut pairs = Vec::with_capacity(n);
    for idx in order {
        if pairs.len() == n {
            break;
        }
        let (row, col) = (idx / w, idx % w);
        let d = va.depth.get(row, col);
        if !DepthMap::is_valid_value(d) {
            continue;
        }
        let (u, v) = (col as f64 + 0.5, row as f64 + 0.5);
        let x = va.camera.unproject(u, v, d as f64)?;
        let (ub, vb_, zb) = vb.camera.project(&x);
        if !(zb > 0.0 && ub >= 0.0 && vb_ >= 0.0 && ub < vb.depth.width as f64 && vb_ < vb.depth.height as f64) {
            continue;
        }
        let dj = vb.depth.get(vb_ as usize, ub as usize);
        if !DepthMap::is_valid_value(dj) || ((zb - dj as f64) / dj as f64).abs() > OCCLUSION_TOL {
            continue;
        }
        if !bilinear_agrees(&vb.depth, ub, vb_, zb) {
            continue;
        }
        pairs.push(Correspondence { a: (u, v), b: (ub, vb_) });
    }
    let shortfall = pairs.len() < n;
    Ok(Correspondences { pairs, shortfall })
}
