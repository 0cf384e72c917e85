//! Evaluation of generated views: image fidelity, depth accuracy, poses
//! estimated from the generated images, reprojection consistency, and the
//! feature / attention correspondence probes.

use candle_core::{DType, Device, Tensor};
use gld_core::camera::CameraPose;
use gld_core::metrics::{depth_metrics, psnr, reprojection_error, ssim};
use gld_core::pck::{pck_probe, FeatureGrid};
use gld_core::raster::{DepthMap, Image};
use gld_core::scene::{gt_correspondences, Correspondence};
use gld_core::trajectory::pose_errors;
use gld_core::views::{sample_views, ViewSplit};
use gld_core::{MultiViewSequence, NUM_LEVELS};
use serde::{Deserialize, Serialize};

use crate::error::{GldError, Result};
use crate::geoenc::{images_tensor, GeoEncoder};
use crate::mvdiff::{ConditioningBundle, DiffusionModel};
use crate::pipeline::{generate, GenerationOptions, GenerationRequest, GenerationResult, ModelSet, SamplerConfig};

/// One evaluation view set of a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCase {
    pub scene: usize,
    pub scene_id: String,
    pub seed: u64,
    pub split: ViewSplit,
}

/// Deterministic evaluation view sets, one per scene.
pub fn eval_cases(data: &[MultiViewSequence], views: usize, n_sources: usize, seed: u64) -> Result<Vec<EvalCase>> {
    data.iter()
        .enumerate()
        .map(|(i, seq)| {
            let s = seed.wrapping_add(i as u64);
            Ok(EvalCase {
                scene: i,
                scene_id: seq.scene_id.clone(),
                seed: s,
                split: sample_views(seq.len(), views, n_sources, s, 1)?,
            })
        })
        .collect()
}

pub fn request_for(seq: &MultiViewSequence, split: &ViewSplit, dtype: DType) -> Result<GenerationRequest> {
    let is_target = split.target_mask();
    let src: Vec<usize> = split
        .frames
        .iter()
        .zip(&is_target)
        .filter(|(_, t)| !**t)
        .map(|(f, _)| *f)
        .collect();
    Ok(GenerationRequest {
        src_images: images_tensor(seq, &src, dtype)?,
        cameras: split.frames.iter().map(|&f| seq.views[f].camera).collect(),
        is_target,
    })
}

/// Per-scene metric row. Missing values (e.g. no co-visible pixels) are NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene_id: String,
    pub seed: u64,
    pub frames: Vec<usize>,
    pub sources: Vec<usize>,
    pub targets: Vec<usize>,
    pub psnr: f64,
    pub ssim: f64,
    pub absrel: f64,
    pub sqrel: f64,
    pub rmse: f64,
    pub delta_125: f64,
    pub ate: f64,
    pub rpe_r_deg: f64,
    pub rpe_t: f64,
    pub reproj: f64,
}

pub const METRIC_COLUMNS: [&str; 10] = [
    "psnr", "ssim", "absrel", "sqrel", "rmse", "delta_125", "ate", "rpe_r_deg", "rpe_t", "reproj",
];

impl SceneMetrics {
    pub fn values(&self) -> [f64; 10] {
        [
            self.psnr,
            self.ssim,
            self.absrel,
            self.sqrel,
            self.rmse,
            self.delta_125,
            self.ate,
            self.rpe_r_deg,
            self.rpe_t,
            self.reproj,
        ]
    }
}

pub fn depth_maps(depth: &Tensor) -> Result<Vec<DepthMap>> {
    let (n, h, w) = depth.dims3()?;
    let d: Vec<f32> = depth.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    (0..n)
        .map(|i| Ok(DepthMap::from_data(w, h, d[i * h * w..(i + 1) * h * w].to_vec())?))
        .collect()
}

/// Poses and depth estimated by the frozen encoder's heads from images in
/// view order.
pub fn estimate_geometry(geo: &GeoEncoder, images: &[Image]) -> Result<(Vec<CameraPose>, Vec<DepthMap>)> {
    let (h, w) = geo.image_size();
    let mut data = Vec::with_capacity(images.len() * h * w * 3);
    for im in images {
        data.extend_from_slice(&im.data);
    }
    let t = Tensor::from_vec(data, (images.len(), h, w, 3), &Device::Cpu)?.to_dtype(geo.dtype())?;
    let g = geo.decode_geometry(&geo.encode_multiview(&t)?)?;
    let k = gld_core::camera::intrinsics_from_fov(w, h, 60.0);
    let poses = g.poses.iter().map(|p| CameraPose::new(*p, k)).collect();
    Ok((poses, depth_maps(&g.depth)?))
}

fn median_align(pred: &DepthMap, gt: &DepthMap) -> DepthMap {
    let mut ratios: Vec<f64> = pred
        .data
        .iter()
        .zip(&gt.data)
        .filter(|(_, g)| DepthMap::is_valid_value(**g))
        .map(|(p, g)| *g as f64 / (*p as f64).max(1e-9))
        .collect();
    let s = if ratios.is_empty() {
        1.0
    } else {
        ratios.sort_by(f64::total_cmp);
        ratios[ratios.len() / 2]
    };
    let mut out = pred.clone();
    out.data.iter_mut().for_each(|d| *d = (*d as f64 * s) as f32);
    out
}

/// Scores one generation against the ground truth of its view set.
pub fn evaluate_generation(
    geo: &GeoEncoder,
    seq: &MultiViewSequence,
    case: &EvalCase,
    result: &GenerationResult,
) -> Result<SceneMetrics> {
    let split = &case.split;
    let tgt_frames: Vec<usize> = result.target_positions.iter().map(|&p| split.frames[p]).collect();
    let (mut p, mut s) = (0.0, 0.0);
    for (img, &f) in result.images.iter().zip(&tgt_frames) {
        p += psnr(img, &seq.views[f].image)?;
        s += ssim(img, &seq.views[f].image)?;
    }
    let m = tgt_frames.len() as f64;

    let pred_depth = depth_maps(&result.geometry.depth)?;
    let (mut pd, mut gd, mut mask) = (Vec::new(), Vec::new(), Vec::new());
    for (d, &f) in pred_depth.iter().zip(&tgt_frames) {
        let g = &seq.views[f].depth;
        pd.extend_from_slice(&d.data);
        gd.extend_from_slice(&g.data);
        mask.extend(g.valid_mask());
    }
    let depth = depth_metrics(&pd, &gd, &mask, true)?;

    // Poses from ground-truth sources plus generated targets.
    let mut views: Vec<Image> = split.frames.iter().map(|&f| seq.views[f].image.clone()).collect();
    for (img, &pos) in result.images.iter().zip(&result.target_positions) {
        views[pos] = img.clone();
    }
    let (est, est_depth) = estimate_geometry(geo, &views)?;
    let gt_cams: Vec<CameraPose> = split.frames.iter().map(|&f| seq.views[f].camera).collect();
    let pose = pose_errors(&est, &gt_cams)?;
    let aligned: Vec<DepthMap> = est_depth
        .iter()
        .zip(&split.frames)
        .map(|(d, &f)| median_align(d, &seq.views[f].depth))
        .collect();
    let reproj = reprojection_error(&aligned, &gt_cams).map(|r| r.score()).unwrap_or(f64::NAN);
    Ok(SceneMetrics {
        scene_id: case.scene_id.clone(),
        seed: case.seed,
        frames: split.frames.clone(),
        sources: split.sources.clone(),
        targets: split.targets.clone(),
        psnr: p / m,
        ssim: s / m,
        absrel: depth.abs_rel,
        sqrel: depth.sq_rel,
        rmse: depth.rmse,
        delta_125: depth.delta_125,
        ate: pose.ate,
        rpe_r_deg: pose.rpe_r_deg,
        rpe_t: pose.rpe_t,
        reproj,
    })
}

/// Generates and scores every case with the same sampler seed.
pub fn evaluate(
    models: &ModelSet,
    data: &[MultiViewSequence],
    cases: &[EvalCase],
    opts: GenerationOptions,
    sampler: &SamplerConfig,
) -> Result<Vec<SceneMetrics>> {
    cases
        .iter()
        .map(|case| {
            let seq = &data[case.scene];
            let req = request_for(seq, &case.split, models.geo.dtype())?;
            let s = SamplerConfig {
                seed: sampler.seed ^ case.seed,
                ..sampler.clone()
            };
            let r = generate(models, &req, opts, &s)?;
            evaluate_generation(&models.geo, seq, case, &r)
        })
        .collect()
}

/// Column means ignoring NaN entries.
pub fn mean_row(rows: &[SceneMetrics]) -> [f64; 10] {
    let mut out = [0.0; 10];
    for (c, o) in out.iter_mut().enumerate() {
        let vals: Vec<f64> = rows.iter().map(|r| r.values()[c]).filter(|v| v.is_finite()).collect();
        *o = if vals.is_empty() { f64::NAN } else { vals.iter().sum::<f64>() / vals.len() as f64 };
    }
    out
}

pub fn fmt_value(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        String::new()
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

/// Reference rows: label and the values of the CSV metric columns in
/// [`METRIC_COLUMNS`] order (`None` = not reported).
pub type ReferenceRow = (&'static str, [Option<f64>; 10]);

pub const REFERENCE_NVS: [ReferenceRow; 3] = [
    ("reference:nvs:re10k", [Some(16.362), Some(0.630), None, None, None, None, Some(0.211), Some(7.07), Some(0.444), Some(0.673)]),
    ("reference:nvs:dl3dv", [Some(15.499), Some(0.468), None, None, None, None, Some(0.209), Some(5.75), Some(0.466), Some(0.612)]),
    ("reference:nvs:mipnerf360", [Some(14.542), Some(0.288), None, None, None, None, Some(0.589), Some(15.97), Some(1.071), Some(0.630)]),
];

pub const REFERENCE_DEPTH: ReferenceRow = (
    "reference:depth",
    [Some(14.80), None, Some(0.160), Some(0.410), None, Some(0.800), None, None, None, None],
);

fn reference_line(label: &str, vals: &[Option<f64>; 10], lead: usize) -> String {
    let mut s = String::from(label);
    for _ in 0..lead {
        s.push(',');
    }
    for v in vals {
        s.push(',');
        if let Some(v) = v {
            s.push_str(&format!("{v}"));
        }
    }
    s.push('\n');
    s
}

pub const EVAL_HEADER: &str = "scene_id,seed,frames,sources,targets,psnr,ssim,absrel,sqrel,rmse,delta_125,ate,rpe_r_deg,rpe_t,reproj";

/// Per-scene rows, a mean row and the reference rows.
pub fn eval_csv(rows: &[SceneMetrics]) -> String {
    let mut s = String::from(EVAL_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}",
            r.scene_id,
            r.seed,
            join(&r.frames),
            join(&r.sources),
            join(&r.targets)
        ));
        for v in r.values() {
            s.push(',');
            s.push_str(&fmt_value(v));
        }
        s.push('\n');
    }
    s.push_str("mean,,,,");
    for v in mean_row(rows) {
        s.push(',');
        s.push_str(&fmt_value(v));
    }
    s.push('\n');
    for (label, vals) in REFERENCE_NVS.iter().chain(std::iter::once(&REFERENCE_DEPTH)) {
        s.push_str(&reference_line(label, vals, 4));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub pose_estimator: String,
    pub reprojection: String,
    pub rows: Vec<SceneMetrics>,
    pub mean: Vec<Option<f64>>,
}

impl EvalReport {
    pub fn new(config_hash: &str, geo_fingerprint: &str, rows: Vec<SceneMetrics>) -> Self {
        let mean = mean_row(&rows).iter().map(|v| v.is_finite().then_some(*v)).collect();
        Self {
            config_hash: config_hash.into(),
            pose_estimator: format!("frozen geometric encoder pose head ({geo_fingerprint})"),
            reprojection: "stand-in: diagonal-normalized cycle distance + relative depth residual".into(),
            rows,
            mean,
        }
    }
}

// ---------------------------------------------------------------------------
// Boundary sweep and cascade ablation.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub boundary: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub absrel: f64,
    pub rmse: f64,
    pub delta_125: f64,
    pub cases: Vec<EvalCase>,
}

/// Reference (k, PSNR, SSIM, AbsRel, RMSE, δ<1.25) rows.
pub const REFERENCE_SWEEP: [(usize, f64, f64, f64, f64, f64); NUM_LEVELS] = [
    (0, 12.55, 0.323, 0.267, 0.400, 0.641),
    (1, 13.61, 0.366, 0.191, 0.311, 0.744),
    (2, 13.35, 0.355, 0.254, 0.393, 0.659),
    (3, 13.35, 0.355, 0.260, 0.402, 0.647),
];

/// Runs generation with independent level models for every boundary and the
/// same eval cases and seeds.
pub fn boundary_sweep(
    models: &ModelSet,
    data: &[MultiViewSequence],
    cases: &[EvalCase],
    sampler: &SamplerConfig,
) -> Result<Vec<SweepRow>> {
    (0..NUM_LEVELS)
        .map(|k| {
            let rows = evaluate(models, data, cases, GenerationOptions { boundary: k, use_cascade: false }, sampler)?;
            let m = mean_row(&rows);
            Ok(SweepRow {
                boundary: k,
                psnr: m[0],
                ssim: m[1],
                absrel: m[2],
                rmse: m[4],
                delta_125: m[5],
                cases: cases.to_vec(),
            })
        })
        .collect()
}

pub const SWEEP_HEADER: &str = "k,psnr,ssim,absrel,rmse,delta_125";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.boundary,
            fmt_value(r.psnr),
            fmt_value(r.ssim),
            fmt_value(r.absrel),
            fmt_value(r.rmse),
            fmt_value(r.delta_125)
        ));
    }
    for (k, p, q, a, r, d) in REFERENCE_SWEEP {
        s.push_str(&format!("reference:k{k},{p},{q},{a},{r},{d}\n"));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub metrics: Vec<f64>,
    pub cases: Vec<EvalCase>,
}

pub const ABLATION_HEADER: &str = "variant,psnr,ssim,absrel,sqrel,rmse,delta_125,ate,rpe_r_deg,rpe_t,reproj";

/// Reference (variant, PSNR, SSIM, ATE, RPE_r, RPE_t, reprojection).
pub const REFERENCE_ABLATION: [(&str, f64, f64, f64, f64, f64, f64); 2] = [
    ("independent", 18.81, 0.692, 0.197, 7.179, 0.430, 0.666),
    ("cascaded", 19.00, 0.695, 0.182, 6.694, 0.397, 0.652),
];

/// Level 0 generated independently vs. cascaded on the generated level 1,
/// both at boundary 1 with identical cases and seeds.
pub fn cascade_ablation(
    models: &ModelSet,
    data: &[MultiViewSequence],
    cases: &[EvalCase],
    sampler: &SamplerConfig,
) -> Result<Vec<AblationRow>> {
    if models.cascade.is_none() || models.levels[0].is_none() {
        return Err(GldError::MissingAsset("both the independent level-0 and the cascaded model".into()));
    }
    [("independent", false), ("cascaded", true)]
        .iter()
        .map(|&(name, cascade)| {
            let rows = evaluate(models, data, cases, GenerationOptions { boundary: 1, use_cascade: cascade }, sampler)?;
            Ok(AblationRow {
                variant: name.into(),
                metrics: mean_row(&rows).to_vec(),
                cases: cases.to_vec(),
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        s.push_str(&r.variant);
        for v in &r.metrics {
            s.push(',');
            s.push_str(&fmt_value(*v));
        }
        s.push('\n');
    }
    for (name, p, q, ate, rr, rt, rep) in REFERENCE_ABLATION {
        s.push_str(&format!("reference:{name},{p},{q},,,,,{ate},{rr},{rt},{rep}\n"));
    }
    s
}

// ---------------------------------------------------------------------------
// Correspondence probes.

/// Reference PCK (%) per level and for an external self-supervised backbone.
pub const REFERENCE_PCK: [(&str, f64); 5] =
    [("L0", 22.25), ("L1", 35.98), ("L2", 40.70), ("L3", 20.98), ("dinov2", 31.64)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PckRow {
    pub descriptor: String,
    pub pck: f64,
    pub chance: f64,
    pub pairs: usize,
}

/// Expected PCK of a matcher that lands uniformly at random on `b`'s tokens.
pub fn chance_pck(grid: (usize, usize), image: (usize, usize), pairs: &[Correspondence], tau_px: f64) -> f64 {
    let (gh, gw) = grid;
    let (h, w) = image;
    let centers: Vec<(f64, f64)> = (0..gh * gw)
        .map(|i| ((i % gw) as f64 * w as f64 / gw as f64 + 0.5 * w as f64 / gw as f64, (i / gw) as f64 * h as f64 / gh as f64 + 0.5 * h as f64 / gh as f64))
        .collect();
    let hits: f64 = pairs
        .iter()
        .map(|p| centers.iter().filter(|c| (c.0 - p.b.0).hypot(c.1 - p.b.1) <= tau_px).count() as f64 / centers.len() as f64)
        .sum();
    hits / pairs.len().max(1) as f64
}

fn grid_of<'a>(data: &'a [f32], grid: (usize, usize), channels: usize, image: (usize, usize)) -> FeatureGrid<'a> {
    FeatureGrid {
        data,
        grid_h: grid.0,
        grid_w: grid.1,
        channels,
        image_h: image.0,
        image_w: image.1,
    }
}

/// Raw-pixel patch descriptors `[T, p·p·3]` of one image (a training-free
/// baseline).
fn patch_descriptors(geo: &GeoEncoder, seq: &MultiViewSequence, frame: usize) -> Result<Vec<f32>> {
    let im = images_tensor(seq, &[frame], DType::F32)?.unsqueeze(0)?;
    let p = geo.patchify(&im)?;
    // Remove the per-patch mean so cosine similarity compares texture.
    let p = p.broadcast_sub(&p.mean_keepdim(candle_core::D::Minus1)?)?;
    Ok(p.flatten_all()?.to_vec1()?)
}

/// PCK of each level's features (and raw patches) between consecutive frame
/// pairs of every sequence.
pub fn probe_pck(geo: &GeoEncoder, data: &[MultiViewSequence], n_pairs: usize, tau_px: f64) -> Result<Vec<PckRow>> {
    let grid = geo.grid();
    let image = geo.image_size();
    let c = geo.config.channels;
    let mut hits = [0.0f64; NUM_LEVELS + 1];
    let mut chance = 0.0;
    let mut total = 0usize;
    for seq in data {
        for i in 0..seq.len().saturating_sub(1) {
            let corr = gt_correspondences(seq, i, i + 1, n_pairs)?;
            if corr.pairs.is_empty() {
                continue;
            }
            let n = corr.pairs.len();
            let f = geo.encode_sequence(seq, &[i, i + 1])?;
            for (l, lv) in f.levels.iter().enumerate() {
                let a: Vec<f32> = lv.get(0)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
                let b: Vec<f32> = lv.get(1)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
                hits[l] += n as f64 * pck_probe(grid_of(&a, grid, c, image), grid_of(&b, grid, c, image), &corr.pairs, tau_px)?;
            }
            let pa = patch_descriptors(geo, seq, i)?;
            let pb = patch_descriptors(geo, seq, i + 1)?;
            let pc = pa.len() / (grid.0 * grid.1);
            hits[NUM_LEVELS] += n as f64 * pck_probe(grid_of(&pa, grid, pc, image), grid_of(&pb, grid, pc, image), &corr.pairs, tau_px)?;
            chance += n as f64 * chance_pck(grid, image, &corr.pairs, tau_px);
            total += n;
        }
    }
    if total == 0 {
        return Err(gld_core::Error::EmptyCorrespondences.into());
    }
    let names = ["L0", "L1", "L2", "L3", "patch"];
    Ok(names
        .iter()
        .zip(hits)
        .map(|(name, h)| PckRow {
            descriptor: name.to_string(),
            pck: h / total as f64,
            chance: chance / total as f64,
            pairs: total,
        })
        .collect())
}

pub fn pck_csv(rows: &[PckRow]) -> String {
    let mut s = String::from("descriptor,pck,chance,pairs\n");
    for r in rows {
        s.push_str(&format!("{},{:.4},{:.4},{}\n", r.descriptor, r.pck, r.chance, r.pairs));
    }
    for (name, v) in REFERENCE_PCK {
        s.push_str(&format!("reference:{name},{:.4},,\n", v / 100.0));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionPck {
    pub layer: usize,
    /// `"encoder"` or `"decoder"`.
    pub part: String,
    pub pck: f64,
    pub chance: f64,
}

/// Token descriptors of one view from a `[1, H, N, D]` tensor: heads
/// concatenated per token.
fn view_descriptors(x: &Tensor, view: usize, tokens: usize) -> Result<Vec<f32>> {
    let (_, h, _, d) = x.dims4()?;
    let v = x
        .squeeze(0)?
        .narrow(1, view * tokens, tokens)?
        .transpose(0, 1)?
        .contiguous()?
        .reshape((tokens, h * d))?;
    Ok(v.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
}

/// Per-layer PCK of matching queries of view `a` against keys of view `b` in
/// every 3D-attention layer, for the latent `z_t` at time `t`.
pub fn attention_probe(
    model: &DiffusionModel,
    z_t: &Tensor,
    t: f64,
    cond: &ConditioningBundle,
    views: (usize, usize),
    pairs: &[Correspondence],
    tau_px: f64,
) -> Result<Vec<AttentionPck>> {
    if pairs.is_empty() {
        return Err(gld_core::Error::EmptyCorrespondences.into());
    }
    let (_, rec) = model.predict_velocity_probe(&z_t.unsqueeze(0)?, &[t], std::slice::from_ref(cond))?;
    let grid = (cond.camera.grid_h, cond.camera.grid_w);
    let image = cond.camera.image_size;
    let tokens = grid.0 * grid.1;
    let n_enc = model.config.enc_blocks;
    let chance = chance_pck(grid, image, pairs, tau_px);
    rec.iter()
        .enumerate()
        .map(|(l, r)| {
            let q = view_descriptors(&r.q, views.0, tokens)?;
            let k = view_descriptors(&r.k, views.1, tokens)?;
            let c = q.len() / tokens;
            Ok(AttentionPck {
                layer: l,
                part: if l < n_enc { "encoder" } else { "decoder" }.into(),
                pck: pck_probe(grid_of(&q, grid, c, image), grid_of(&k, grid, c, image), pairs, tau_px)?,
                chance,
            })
        })
        .collect()
}

/// PCK at a single attention layer.
pub fn attention_probe_layer(
    model: &DiffusionModel,
    z_t: &Tensor,
    t: f64,
    cond: &ConditioningBundle,
    views: (usize, usize),
    pairs: &[Correspondence],
    tau_px: f64,
    layer: usize,
) -> Result<AttentionPck> {
    if layer >= model.attention_layers() {
        return Err(GldError::InvalidArgument(format!(
            "attention layer {layer} out of range (model has {})",
            model.attention_layers()
        )));
    }
    Ok(attention_probe(model, z_t, t, cond, views, pairs, tau_px)?.swap_remove(layer))
}

pub fn attention_csv(rows: &[AttentionPck]) -> String {
    let mut s = String::from("layer,part,pck,chance\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.4},{:.4}\n", r.layer, r.part, r.pck, r.chance));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chance_is_fraction_of_tokens_in_radius() {
        let p = [Correspondence { a: (2.0, 2.0), b: (2.0, 2.0) }];
        // 4x4 grid over 16x16: centers at 2, 6, 10, 14; radius 0.5 hits one.
        assert!((chance_pck((4, 4), (16, 16), &p, 0.5) - 1.0 / 16.0).abs() < 1e-12);
        assert!((chance_pck((4, 4), (16, 16), &p, 100.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn csv_has_reference_rows() {
        let s = eval_csv(&[]);
        assert!(s.starts_with(EVAL_HEADER));
        assert!(s.contains("reference:nvs:re10k,,,,,16.362"));
        assert!(s.contains("reference:depth"));
        let cols = EVAL_HEADER.split(',').count();
        for line in s.lines() {
            assert_eq!(line.split(',').count(), cols, "{line}");
        }
        let sw = sweep_csv(&[]);
        assert_eq!(sw.lines().count(), 5);
        assert!(sw.contains("reference:k1,13.61,0.366,0.191,0.311,0.744"));
        for line in ablation_csv(&[]).lines() {
            assert_eq!(line.split(',').count(), ABLATION_HEADER.split(',').count(), "{line}");
        }
    }
}
