//! On-disk formats: the synthetic dataset, camera trajectories and generation
//! outputs.
//!
//! ```text
//! <root>/manifest.json
//! <root>/<scene_id>/view_00.png  depth_00.f32  ...  cameras.json
//! ```
//! Depth files are raw little-endian `f32` in row-major order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use gld_core::camera::{CameraPose, Mat3, RigidTransform, Vec3};
use gld_core::raster::{DepthMap, Image};
use gld_core::{MultiViewSequence, SceneSpec, ViewSample};
use serde::{Deserialize, Serialize};

use crate::error::{GldError, Result};
use crate::params::sha256_hex;
use crate::pipeline::{GenerationResult, Timings};

pub const DATASET_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    /// Row-major world-to-camera rotation.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    /// Row-major pinhole intrinsics.
    pub intrinsics: [f64; 9],
}

impl From<&CameraPose> for CameraRecord {
    fn from(c: &CameraPose) -> Self {
        let mut r = [0.0; 9];
        let mut k = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                r[i * 3 + j] = c.rotation[(i, j)];
                k[i * 3 + j] = c.intrinsics[(i, j)];
            }
        }
        Self {
            rotation: r,
            translation: [c.translation.x, c.translation.y, c.translation.z],
            intrinsics: k,
        }
    }
}

impl CameraRecord {
    pub fn to_pose(&self) -> Result<CameraPose> {
        let pose = CameraPose::new(
            RigidTransform::new(
                Mat3::from_row_slice(&self.rotation),
                Vec3::from_row_slice(&self.translation),
            ),
            Mat3::from_row_slice(&self.intrinsics),
        );
        pose.validate()?;
        Ok(pose)
    }
}

pub fn write_cameras(path: &Path, cams: &[CameraPose]) -> Result<()> {
    let recs: Vec<CameraRecord> = cams.iter().map(CameraRecord::from).collect();
    write_json(path, &recs)
}

pub fn read_cameras(path: &Path) -> Result<Vec<CameraPose>> {
    let recs: Vec<CameraRecord> = read_json(path)?;
    recs.iter().map(CameraRecord::to_pose).collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| GldError::format(path, e))?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(GldError::MissingAsset(path.display().to_string()));
    }
    let s = fs::read_to_string(path).map_err(|e| GldError::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| GldError::format(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| GldError::io(p, e))?;
    }
    fs::write(path, bytes).map_err(|e| GldError::io(path, e))
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| GldError::io(p, e))?;
    }
    image::save_buffer(path, &img.to_rgb8(), img.width as u32, img.height as u32, image::ColorType::Rgb8)
        .map_err(|e| GldError::format(path, e))
}

pub fn read_png(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(GldError::MissingAsset(path.display().to_string()));
    }
    let img = image::open(path).map_err(|e| GldError::format(path, e))?.to_rgb8();
    Ok(Image::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw())?)
}

pub fn write_depth(path: &Path, d: &DepthMap) -> Result<()> {
    let bytes: Vec<u8> = d.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_bytes(path, &bytes)
}

pub fn read_depth(path: &Path, width: usize, height: usize) -> Result<DepthMap> {
    if !path.exists() {
        return Err(GldError::MissingAsset(path.display().to_string()));
    }
    let bytes = fs::read(path).map_err(|e| GldError::io(path, e))?;
    if bytes.len() != width * height * 4 {
        return Err(GldError::format(
            path,
            format!("expected {} bytes of depth, found {}", width * height * 4, bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(DepthMap::from_data(width, height, data)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub scene_id: String,
    pub spec: SceneSpec,
    pub n_views: usize,
    /// SHA-256 over the scene's files in name order.
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: String,
    /// Provenance such as the generating config hash.
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
    pub scenes: Vec<SceneEntry>,
}

fn scene_files(n_views: usize) -> Vec<String> {
    let mut f = vec!["cameras.json".to_string()];
    for i in 0..n_views {
        f.push(format!("depth_{i:02}.f32"));
        f.push(format!("view_{i:02}.png"));
    }
    f.sort();
    f
}

fn scene_checksum(dir: &Path, n_views: usize) -> Result<String> {
    let mut all = Vec::new();
    for f in scene_files(n_views) {
        let p = dir.join(&f);
        all.extend_from_slice(f.as_bytes());
        all.extend(fs::read(&p).map_err(|e| GldError::io(&p, e))?);
    }
    Ok(sha256_hex(&all))
}

pub fn write_sequence(root: &Path, seq: &MultiViewSequence) -> Result<SceneEntry> {
    let dir = root.join(&seq.scene_id);
    for (i, v) in seq.views.iter().enumerate() {
        write_png(&dir.join(format!("view_{i:02}.png")), &v.image)?;
        write_depth(&dir.join(format!("depth_{i:02}.f32")), &v.depth)?;
    }
    write_cameras(&dir.join("cameras.json"), &seq.cameras())?;
    Ok(SceneEntry {
        scene_id: seq.scene_id.clone(),
        spec: seq.spec.clone(),
        n_views: seq.len(),
        checksum: scene_checksum(&dir, seq.len())?,
    })
}

pub fn write_dataset(root: &Path, seqs: &[MultiViewSequence], tags: BTreeMap<String, String>) -> Result<DatasetManifest> {
    let scenes = seqs.iter().map(|s| write_sequence(root, s)).collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        format_version: DATASET_VERSION.into(),
        tags,
        scenes,
    };
    write_json(&root.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

fn corrupt(entry: &SceneEntry, reason: impl Into<String>) -> GldError {
    GldError::CorruptManifest {
        scene_id: entry.scene_id.clone(),
        reason: reason.into(),
    }
}

pub fn read_sequence(root: &Path, entry: &SceneEntry) -> Result<MultiViewSequence> {
    let dir = root.join(&entry.scene_id);
    if !dir.is_dir() {
        return Err(corrupt(entry, "scene directory is missing"));
    }
    let cams = read_cameras(&dir.join("cameras.json"))?;
    if cams.len() != entry.n_views {
        return Err(corrupt(entry, format!("{} cameras for {} views", cams.len(), entry.n_views)));
    }
    for f in scene_files(entry.n_views) {
        if !dir.join(&f).exists() {
            return Err(corrupt(entry, format!("{f} is missing")));
        }
    }
    if scene_checksum(&dir, entry.n_views)? != entry.checksum {
        return Err(corrupt(entry, "checksum does not match the scene files"));
    }
    let (w, h) = (entry.spec.image_width, entry.spec.image_height);
    let views = cams
        .into_iter()
        .enumerate()
        .map(|(i, camera)| {
            let image = read_png(&dir.join(format!("view_{i:02}.png")))?;
            if (image.width, image.height) != (w, h) {
                return Err(corrupt(entry, format!("view {i} is {}x{}", image.width, image.height)));
            }
            Ok(ViewSample {
                image,
                depth: read_depth(&dir.join(format!("depth_{i:02}.f32")), w, h)?,
                camera,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MultiViewSequence {
        scene_id: entry.scene_id.clone(),
        spec: entry.spec.clone(),
        views,
    })
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("manifest.json");
    if !path.exists() {
        return Err(GldError::EmptyDataset(root.to_path_buf()));
    }
    let m: DatasetManifest = read_json(&path)?;
    if m.format_version != DATASET_VERSION {
        return Err(GldError::format(&path, format!("unsupported dataset version {}", m.format_version)));
    }
    Ok(m)
}

pub fn read_dataset(root: &Path) -> Result<Vec<MultiViewSequence>> {
    let m = read_manifest(root)?;
    if m.scenes.is_empty() {
        return Err(GldError::EmptyDataset(root.to_path_buf()));
    }
    m.scenes.iter().map(|e| read_sequence(root, e)).collect()
}

/// `[levels: u32][views: u32][tokens: u32][channels: u32]` followed by the
/// little-endian `f32` values of each level in order.
pub fn latents_bytes(result: &GenerationResult) -> Result<Vec<u8>> {
    let l = &result.latents;
    let (v, t, c) = l.levels[0].dims3()?;
    let mut out = Vec::new();
    for d in [l.levels.len(), v, t, c] {
        out.extend((d as u32).to_le_bytes());
    }
    for lv in &l.levels {
        let vals: Vec<f32> = lv.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1()?;
        out.extend(vals.iter().flat_map(|x| x.to_le_bytes()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub config_hash: String,
    pub boundary: usize,
    pub cascaded: bool,
    #[serde(flatten)]
    pub timings: Timings,
}

/// Writes `images/*.png`, `depth/*.f32`, `cameras.json` (target cameras),
/// `latents.bin` and `timings.json` under `dir`.
pub fn write_generation(
    dir: &Path,
    result: &GenerationResult,
    target_cameras: &[CameraPose],
    config_hash: &str,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (i, img) in result.images.iter().enumerate() {
        let p = dir.join("images").join(format!("view_{i:02}.png"));
        write_png(&p, img)?;
        written.push(p);
    }
    for (i, d) in crate::eval::depth_maps(&result.geometry.depth)?.iter().enumerate() {
        let p = dir.join("depth").join(format!("depth_{i:02}.f32"));
        write_depth(&p, d)?;
        written.push(p);
    }
    write_cameras(&dir.join("cameras.json"), target_cameras)?;
    write_bytes(&dir.join("latents.bin"), &latents_bytes(result)?)?;
    write_json(
        &dir.join("timings.json"),
        &TimingRecord {
            config_hash: config_hash.into(),
            boundary: result.boundary,
            cascaded: result.cascaded,
            timings: result.timings,
        },
    )?;
    written.extend(["cameras.json", "latents.bin", "timings.json"].map(|f| dir.join(f)));
    Ok(written)
}
