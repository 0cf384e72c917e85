//! Run reports: metric tables, source / generation / ground-truth image grids,
//! aggregated phase timings and a manifest linking artifacts to config
//! hashes.

use std::path::{Path, PathBuf};

use gld_core::raster::Image;
use serde::{Deserialize, Serialize};

use crate::dataset::{read_json, read_png, write_json, write_png, TimingRecord};
use crate::error::{GldError, Result};
use crate::params::load_checkpoint;
use crate::pipeline::Timings;

/// First line of every CSV artifact.
pub const HASH_PREFIX: &str = "# config_hash=";

pub fn tag_csv(config_hash: &str, body: &str) -> String {
    format!("{HASH_PREFIX}{config_hash}\n{body}")
}

/// Splits a tagged CSV into `(config_hash, body)`.
pub fn untag_csv(text: &str) -> (Option<&str>, &str) {
    match text.strip_prefix(HASH_PREFIX) {
        Some(rest) => {
            let (h, body) = rest.split_once('\n').unwrap_or((rest, ""));
            (Some(h.trim()), body)
        }
        None => (None, text),
    }
}

/// Metadata written next to each generation so a report can be rebuilt from
/// the run directory alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub config_hash: String,
    pub scene_id: String,
    pub frames: Vec<usize>,
    pub sources: Vec<usize>,
    pub targets: Vec<usize>,
    pub boundary: usize,
    pub cascaded: bool,
}

pub const GRID_PAD: usize = 2;

/// Columns of a comparison row: every source, every generation, and one
/// ground-truth cell.
pub fn grid_columns(n_sources: usize, n_targets: usize) -> usize {
    n_sources + n_targets + 1
}

fn resize_nearest(img: &Image, w: usize, h: usize) -> Image {
    let mut out = Image::new(w, h);
    for r in 0..h {
        for c in 0..w {
            out.set_pixel(r, c, img.pixel(r * img.height / h, c * img.width / w));
        }
    }
    out
}

/// All `images` tiled into one `w`×`h` cell (a near-square mosaic).
pub fn mosaic(images: &[Image], w: usize, h: usize) -> Image {
    let mut out = Image::new(w, h);
    if images.is_empty() {
        return out;
    }
    let cols = (images.len() as f64).sqrt().ceil() as usize;
    let rows = images.len().div_ceil(cols);
    let (tw, th) = ((w / cols).max(1), (h / rows).max(1));
    for (i, img) in images.iter().enumerate() {
        let tile = resize_nearest(img, tw, th);
        let (r0, c0) = ((i / cols) * th, (i % cols) * tw);
        for r in 0..th {
            for c in 0..tw {
                if r0 + r < h && c0 + c < w {
                    out.set_pixel(r0 + r, c0 + c, tile.pixel(r, c));
                }
            }
        }
    }
    out
}

/// One comparison row: sources, generations, then a mosaic of the ground
/// truth targets, separated by white padding.
pub fn comparison_grid(sources: &[Image], generated: &[Image], ground_truth: &[Image]) -> Result<Image> {
    let first = sources
        .first()
        .or(generated.first())
        .ok_or_else(|| GldError::InvalidArgument("empty comparison grid".into()))?;
    let (w, h) = (first.width, first.height);
    let mut cells: Vec<Image> = sources.iter().chain(generated).map(|i| resize_nearest(i, w, h)).collect();
    cells.push(mosaic(ground_truth, w, h));
    let cols = cells.len();
    let (gw, gh) = (cols * w + (cols + 1) * GRID_PAD, h + 2 * GRID_PAD);
    let mut out = Image::from_data(gw, gh, vec![1.0; gw * gh * 3])?;
    for (k, cell) in cells.iter().enumerate() {
        let c0 = GRID_PAD + k * (w + GRID_PAD);
        for r in 0..h {
            for c in 0..w {
                out.set_pixel(GRID_PAD + r, c0 + c, cell.pixel(r, c));
            }
        }
    }
    Ok(out)
}

fn read_dir_pngs(dir: &Path) -> Result<Vec<Image>> {
    let mut paths: Vec<PathBuf> = match std::fs::read_dir(dir) {
        Ok(rd) => rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == "png")).collect(),
        Err(_) => return Ok(Vec::new()),
    };
    paths.sort();
    paths.iter().map(|p| read_png(p)).collect()
}

/// Reference phase timings (seconds) of the full-scale model.
pub const REFERENCE_TIMINGS: Timings = Timings {
    boundary_sampling: 37.8,
    propagation: 0.15,
    shallow_sampling: 28.4,
    decoding: 0.43,
    total: 66.8,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub samples: usize,
    pub mean: Timings,
    pub reference: Timings,
}

pub fn summarize_timings(records: &[Timings]) -> TimingSummary {
    let n = records.len().max(1) as f64;
    let mut m = Timings::default();
    for t in records {
        m.boundary_sampling += t.boundary_sampling / n;
        m.propagation += t.propagation / n;
        m.shallow_sampling += t.shallow_sampling / n;
        m.decoding += t.decoding / n;
        m.total += t.total / n;
    }
    TimingSummary {
        samples: records.len(),
        mean: m,
        reference: REFERENCE_TIMINGS,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    /// Config hash recorded inside the artifact, when it carries one.
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportManifest {
    pub run_dir: String,
    pub config_hash: String,
    pub artifacts: Vec<ArtifactEntry>,
    /// Artifacts whose recorded config hash differs from the report's.
    pub mismatched: Vec<String>,
    /// Expected artifacts that are missing.
    pub gaps: Vec<String>,
}

impl ReportManifest {
    pub fn is_complete(&self) -> bool {
        self.gaps.is_empty() && self.mismatched.is_empty()
    }
}

pub const CHECKPOINTS: [&str; 3] = ["geoenc.safetensors", "rgbdec.safetensors", "mvdiff_level1.safetensors"];
pub const TABLES: [&str; 6] = ["recon.csv", "eval.csv", "sweep.csv", "ablation.csv", "pck.csv", "attention.csv"];

fn artifact_hash(path: &Path) -> Option<String> {
    let name = path.file_name()?.to_str()?;
    if name.ends_with(".safetensors") {
        return load_checkpoint(path).ok()?.get_meta("config_hash").ok().map(str::to_string);
    }
    if name.ends_with(".csv") {
        let text = std::fs::read_to_string(path).ok()?;
        return untag_csv(&text).0.map(str::to_string);
    }
    if name.ends_with(".json") {
        let v: serde_json::Value = read_json(path).ok()?;
        return v
            .get("config_hash")
            .or_else(|| v.get("tags").and_then(|t| t.get("config_hash")))
            .and_then(|h| h.as_str())
            .map(str::to_string);
    }
    None
}

/// Builds `<run_dir>/report/` from whatever artifacts exist: copies of the
/// metric tables, one comparison grid per generated sample, the timing
/// summary and `manifest.json`. Missing artifacts are listed as gaps rather
/// than treated as errors.
pub fn emit_report(run_dir: &Path, config_hash: &str) -> Result<ReportManifest> {
    if !run_dir.is_dir() {
        return Err(GldError::MissingAsset(format!("run directory {}", run_dir.display())));
    }
    let out = run_dir.join("report");
    let mut artifacts = Vec::new();
    let mut gaps = Vec::new();
    let mut mismatched = Vec::new();
    let mut note = |rel: String, hash: Option<String>, mismatched: &mut Vec<String>| {
        if hash.as_deref().is_some_and(|h| h != config_hash) {
            mismatched.push(rel.clone());
        }
        artifacts.push(ArtifactEntry { path: rel, config_hash: hash });
    };

    for name in CHECKPOINTS.iter().copied().chain(["stats.json"]) {
        let p = run_dir.join(name);
        if p.exists() {
            note(name.to_string(), artifact_hash(&p), &mut mismatched);
        } else {
            gaps.push(name.to_string());
        }
    }
    // Optional diffusion checkpoints (other levels, the cascade) are listed
    // when present but never reported as gaps.
    let mut optional: Vec<String> = std::fs::read_dir(run_dir)
        .map_err(|e| GldError::io(run_dir, e))?
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter(|n| n.starts_with("mvdiff_") && n.ends_with(".safetensors") && !CHECKPOINTS.contains(&n.as_str()))
        .collect();
    optional.sort();
    for name in optional {
        let hash = artifact_hash(&run_dir.join(&name));
        note(name, hash, &mut mismatched);
    }
    for name in TABLES {
        let p = run_dir.join(name);
        if !p.exists() {
            gaps.push(name.to_string());
            continue;
        }
        let dst = out.join("tables").join(name);
        std::fs::create_dir_all(dst.parent().expect("has parent")).map_err(|e| GldError::io(&dst, e))?;
        std::fs::copy(&p, &dst).map_err(|e| GldError::io(&p, e))?;
        note(name.to_string(), artifact_hash(&p), &mut mismatched);
    }

    let samples = run_dir.join("samples");
    let mut timings = Vec::new();
    let mut sample_dirs: Vec<PathBuf> = std::fs::read_dir(&samples)
        .map(|rd| rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect())
        .unwrap_or_default();
    sample_dirs.sort();
    if sample_dirs.is_empty() {
        gaps.push("samples/".into());
    }
    for dir in &sample_dirs {
        let rel = format!("samples/{}", dir.file_name().and_then(|n| n.to_str()).unwrap_or("?"));
        let meta: SampleMeta = match read_json(&dir.join("meta.json")) {
            Ok(m) => m,
            Err(_) => {
                gaps.push(format!("{rel}/meta.json"));
                continue;
            }
        };
        match read_json::<TimingRecord>(&dir.join("timings.json")) {
            Ok(t) => timings.push(t.timings),
            Err(_) => gaps.push(format!("{rel}/timings.json")),
        }
        let src = read_dir_pngs(&dir.join("sources"))?;
        let gen = read_dir_pngs(&dir.join("images"))?;
        let gt = read_dir_pngs(&dir.join("gt"))?;
        if src.len() != meta.sources.len() || gen.len() != meta.targets.len() || gt.len() != meta.targets.len() {
            gaps.push(format!("{rel}: incomplete images"));
            continue;
        }
        let grid = comparison_grid(&src, &gen, &gt)?;
        let name = format!("grids/{}.png", meta.scene_id);
        write_png(&out.join(&name), &grid)?;
        note(rel, Some(meta.config_hash.clone()), &mut mismatched);
    }
    if !timings.is_empty() {
        write_json(&out.join("timings.json"), &summarize_timings(&timings))?;
    }

    let manifest = ReportManifest {
        run_dir: run_dir.display().to_string(),
        config_hash: config_hash.into(),
        artifacts,
        mismatched,
        gaps,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(w: usize, h: usize, v: f32) -> Image {
        Image::from_data(w, h, vec![v; w * h * 3]).unwrap()
    }

    #[test]
    fn grid_has_one_cell_per_source_target_and_ground_truth() {
        for (n, m) in [(1, 1), (2, 3), (1, 4)] {
            let src: Vec<Image> = (0..n).map(|_| solid(8, 6, 0.0)).collect();
            let gen: Vec<Image> = (0..m).map(|_| solid(8, 6, 0.5)).collect();
            let gt: Vec<Image> = (0..m).map(|_| solid(8, 6, 0.25)).collect();
            let g = comparison_grid(&src, &gen, &gt).unwrap();
            let cols = grid_columns(n, m);
            assert_eq!(g.width, cols * 8 + (cols + 1) * GRID_PAD);
            assert_eq!(g.height, 6 + 2 * GRID_PAD);
            // Last cell is the ground-truth mosaic.
            let c0 = GRID_PAD + (cols - 1) * (8 + GRID_PAD);
            assert_eq!(g.pixel(GRID_PAD, c0), [0.25; 3]);
            assert_eq!(g.pixel(GRID_PAD, GRID_PAD + n * (8 + GRID_PAD)), [0.5; 3]);
        }
    }

    #[test]
    fn csv_tag_round_trip() {
        let t = tag_csv("abc", "a,b\n1,2\n");
        assert_eq!(untag_csv(&t), (Some("abc"), "a,b\n1,2\n"));
        assert_eq!(untag_csv("a,b\n"), (None, "a,b\n"));
    }

    #[test]
    fn partial_run_lists_gaps() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("eval.csv"), tag_csv("h1", "x\n")).unwrap();
        std::fs::write(dir.path().join("pck.csv"), tag_csv("other", "x\n")).unwrap();
        let m = emit_report(dir.path(), "h1").unwrap();
        assert!(m.gaps.contains(&"geoenc.safetensors".to_string()));
        assert!(m.gaps.contains(&"samples/".to_string()));
        assert_eq!(m.mismatched, vec!["pck.csv".to_string()]);
        assert!(dir.path().join("report/tables/eval.csv").exists());
        assert!(dir.path().join("report/manifest.json").exists());
        assert!(!m.is_complete());
    }
}
