//! Multi-level latent features and their corpus normalization statistics.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use gld_core::stats::{LatentStats, StatsAccumulator};
use gld_core::{MultiViewSequence, NUM_LEVELS};
use serde::{Deserialize, Serialize};

use crate::error::{GldError, Result};
use crate::geoenc::GeoEncoder;
use crate::params::sha256_hex;

/// Encoder features of one view set: `NUM_LEVELS` tensors of `[V, T, C]`.
#[derive(Debug, Clone)]
pub struct LevelFeatures {
    pub levels: Vec<Tensor>,
    pub grid: (usize, usize),
    pub normalized: bool,
}

impl LevelFeatures {
    pub fn new(levels: Vec<Tensor>, grid: (usize, usize)) -> Result<Self> {
        let first = levels
            .first()
            .ok_or_else(|| GldError::InvalidArgument("no feature levels".into()))?;
        let dims = first.dims().to_vec();
        if dims.len() != 3 || dims[1] != grid.0 * grid.1 {
            return Err(GldError::InvalidArgument(format!(
                "features {dims:?} do not match a {}x{} grid",
                grid.0, grid.1
            )));
        }
        if levels.iter().any(|l| l.dims() != dims.as_slice()) {
            return Err(GldError::InvalidArgument("feature levels differ in shape".into()));
        }
        Ok(Self {
            levels,
            grid,
            normalized: false,
        })
    }

    pub fn views(&self) -> usize {
        self.levels[0].dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.levels[0].dims()[2]
    }

    pub fn normalize(&self, stats: &LatentStats) -> Result<Self> {
        if self.normalized {
            return Err(GldError::AlreadyNormalized);
        }
        let levels = (0..self.levels.len())
            .map(|l| normalize_level(&self.levels[l], stats, l))
            .collect::<Result<_>>()?;
        Ok(Self {
            levels,
            grid: self.grid,
            normalized: true,
        })
    }

    pub fn denormalize(&self, stats: &LatentStats) -> Result<Self> {
        if !self.normalized {
            return Err(GldError::NotNormalized);
        }
        let levels = (0..self.levels.len())
            .map(|l| denormalize_level(&self.levels[l], stats, l))
            .collect::<Result<_>>()?;
        Ok(Self {
            levels,
            grid: self.grid,
            normalized: false,
        })
    }

    /// Selected views of every level.
    pub fn select_views(&self, views: &[usize]) -> Result<Self> {
        let idx = Tensor::from_vec(
            views.iter().map(|&v| v as u32).collect::<Vec<_>>(),
            views.len(),
            &Device::Cpu,
        )?;
        Ok(Self {
            levels: self
                .levels
                .iter()
                .map(|l| l.index_select(&idx, 0))
                .collect::<candle_core::Result<_>>()?,
            grid: self.grid,
            normalized: self.normalized,
        })
    }
}

fn map_level(
    x: &Tensor,
    stats: &LatentStats,
    level: usize,
    f: impl Fn(&LatentStats, usize, &mut [f32]) -> gld_core::Result<()>,
) -> Result<Tensor> {
    let dtype = x.dtype();
    let mut data: Vec<f32> = x.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    if stats.channels() != *x.dims().last().unwrap_or(&0) {
        return Err(GldError::InvalidArgument(format!(
            "statistics have {} channels, features {}",
            stats.channels(),
            x.dims().last().unwrap_or(&0)
        )));
    }
    f(stats, level, &mut data)?;
    Ok(Tensor::from_vec(data, x.dims(), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Per-channel `(x − μ) / σ` of one level tensor (channel-last).
pub fn normalize_level(x: &Tensor, stats: &LatentStats, level: usize) -> Result<Tensor> {
    map_level(x, stats, level, |s, l, d| s.normalize(l, d))
}

pub fn denormalize_level(x: &Tensor, stats: &LatentStats, level: usize) -> Result<Tensor> {
    map_level(x, stats, level, |s, l, d| s.denormalize(l, d))
}

/// Deterministic `V`-frame windows covering a sequence: consecutive blocks and,
/// if frames remain, one final block aligned to the end.
pub fn stat_windows(seq_len: usize, views: usize) -> Vec<Vec<usize>> {
    if seq_len < views || views == 0 {
        return Vec::new();
    }
    let mut out: Vec<Vec<usize>> = (0..seq_len / views)
        .map(|w| (w * views..(w + 1) * views).collect())
        .collect();
    if !seq_len.is_multiple_of(views) {
        out.push((seq_len - views..seq_len).collect());
    }
    out
}

/// Identifier of the corpus and encoder that statistics were computed on.
pub fn corpus_id(data: &[MultiViewSequence], encoder_fingerprint: &str) -> String {
    let mut s = String::from(encoder_fingerprint);
    for seq in data {
        s.push('|');
        s.push_str(&seq.scene_id);
    }
    sha256_hex(s.as_bytes())
}

/// Per-level channel statistics of the frozen encoder over full `V`-view
/// passes of every sequence.
pub fn compute_latent_stats(
    encoder: &GeoEncoder,
    data: &[MultiViewSequence],
    views: usize,
) -> Result<LatentStats> {
    let mut acc = StatsAccumulator::new(encoder.config.channels);
    let mut passes = 0;
    for seq in data {
        for frames in stat_windows(seq.len(), views) {
            let f = encoder.encode_sequence(seq, &frames)?;
            for (l, t) in f.levels.iter().enumerate().take(NUM_LEVELS) {
                let v: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
                acc.push(l, &v)?;
            }
            passes += 1;
        }
    }
    if passes == 0 {
        return Err(GldError::InvalidArgument(format!(
            "no sequence has at least {views} frames"
        )));
    }
    Ok(acc.finish(corpus_id(data, &encoder.fingerprint()?))?)
}

/// On-disk statistics: the per-level values plus free-form provenance tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsFile {
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
    #[serde(flatten)]
    pub stats: LatentStats,
}

pub fn save_stats(path: &Path, stats: &LatentStats) -> Result<()> {
    save_stats_tagged(path, stats, BTreeMap::new())
}

pub fn save_stats_tagged(path: &Path, stats: &LatentStats, tags: BTreeMap<String, String>) -> Result<()> {
    let file = StatsFile {
        tags,
        stats: stats.clone(),
    };
    let s = serde_json::to_string_pretty(&file).map_err(|e| GldError::format(path, e))?;
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).map_err(|e| GldError::io(p, e))?;
    }
    std::fs::write(path, s).map_err(|e| GldError::io(path, e))
}

pub fn load_stats_file(path: &Path) -> Result<StatsFile> {
    if !path.exists() {
        return Err(GldError::MissingAsset(format!("latent statistics {}", path.display())));
    }
    let s = std::fs::read_to_string(path).map_err(|e| GldError::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| GldError::format(path, e))
}

pub fn load_stats(path: &Path) -> Result<LatentStats> {
    Ok(load_stats_file(path)?.stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_cover_every_frame() {
        assert_eq!(stat_windows(8, 4), vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]]);
        let w = stat_windows(10, 4);
        assert_eq!(w.last().unwrap(), &vec![6, 7, 8, 9]);
        assert!(stat_windows(3, 4).is_empty());
    }

    #[test]
    fn normalization_state_is_tracked() {
        let t = Tensor::arange(0f32, 24.0, &Device::Cpu).unwrap().reshape((2, 4, 3)).unwrap();
        let f = LevelFeatures::new(vec![t.clone(); 4], (2, 2)).unwrap();
        let mut acc = StatsAccumulator::new(3);
        for l in 0..4 {
            acc.push(l, &t.flatten_all().unwrap().to_vec1::<f32>().unwrap()).unwrap();
        }
        let stats = acc.finish("x").unwrap();
        let n = f.normalize(&stats).unwrap();
        assert!(matches!(n.normalize(&stats), Err(GldError::AlreadyNormalized)));
        assert!(matches!(f.denormalize(&stats), Err(GldError::NotNormalized)));
        let back = n.denormalize(&stats).unwrap();
        let a: Vec<f32> = back.levels[2].flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = t.flatten_all().unwrap().to_vec1().unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0));
        }
    }
}
