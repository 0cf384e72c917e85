//! Experiment configuration: one TOML file, optional `key=value` overrides,
//! and a content hash that every artifact carries.

use std::path::{Path, PathBuf};

use gld_core::{SceneSpec, TrajectoryKind};
use serde::{Deserialize, Serialize};

use crate::error::{GldError, Result};
use crate::geoenc::GeoEncoderConfig;
use crate::mvdiff::{DiffusionConfig, DiffusionData};
use crate::params::sha256_hex;
use crate::pipeline::SamplerConfig;
use crate::rgbdec::RgbDecoderConfig;
use crate::train::TrainConfig;

/// Scene generation parameters shared by every scene in a corpus; each scene
/// gets its own seed derived from the corpus seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub scenes: usize,
    /// Number of scenes, taken from the end of the corpus, held out for
    /// evaluation. Zero evaluates on the training scenes.
    pub eval_scenes: usize,
    pub n_primitives: usize,
    pub extent: f64,
    pub texture_freq: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub n_views: usize,
    pub trajectory: TrajectoryKind,
    pub frame_interval_deg: [f64; 2],
    pub fov_deg: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SceneSpec::default();
        Self {
            scenes: 8,
            eval_scenes: 0,
            n_primitives: s.n_primitives,
            extent: s.extent,
            texture_freq: s.texture_freq,
            image_width: 32,
            image_height: 32,
            n_views: s.n_views,
            trajectory: s.trajectory,
            frame_interval_deg: s.frame_interval_deg,
            fov_deg: s.fov_deg,
        }
    }
}

impl DataConfig {
    pub fn scene_spec(&self, seed: u64) -> SceneSpec {
        SceneSpec {
            seed,
            n_primitives: self.n_primitives,
            extent: self.extent,
            texture_freq: self.texture_freq,
            image_width: self.image_width,
            image_height: self.image_height,
            n_views: self.n_views,
            trajectory: self.trajectory,
            frame_interval_deg: self.frame_interval_deg,
            fov_deg: self.fov_deg,
        }
    }

    /// Scene seeds for a corpus: `seed * 1000 + i`.
    pub fn scene_specs(&self, seed: u64) -> Vec<SceneSpec> {
        (0..self.scenes as u64)
            .map(|i| self.scene_spec(seed.wrapping_mul(1000).wrapping_add(i)))
            .collect()
    }

    /// Index range of (train, eval) scenes.
    pub fn split(&self, n: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        if self.eval_scenes == 0 || self.eval_scenes >= n {
            (0..n, 0..n)
        } else {
            (0..n - self.eval_scenes, n - self.eval_scenes..n)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Views per evaluated sequence (sources + targets).
    pub views: usize,
    pub n_sources: usize,
    pub seed: u64,
    /// Correspondences per view pair for the PCK probes.
    pub pck_pairs: usize,
    pub tau_px: f64,
    /// Frames per window when fitting decoders and statistics.
    pub window: usize,
    /// Boundary level used by `sample` and `eval`.
    pub boundary: usize,
    pub use_cascade: bool,
    /// Flow time at which the attention probe reads queries and keys.
    pub attention_t: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            views: 4,
            n_sources: 1,
            seed: 0,
            pck_pairs: 64,
            tau_px: 2.0,
            window: 4,
            boundary: 1,
            use_cascade: true,
            attention_t: 0.5,
        }
    }
}

/// Architecture fields shared by every diffusion model; the level and cascade
/// flag come from the `train-diff` invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSection {
    pub enc_width: usize,
    pub enc_blocks: usize,
    pub dec_width: usize,
    pub dec_blocks: usize,
    /// Decoder blocks of the cascaded model.
    pub cascade_dec_blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub tau_max: f64,
    pub camera_dropout: f64,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self::from_model(&DiffusionConfig::toy(1, false), DiffusionConfig::toy(0, true).dec_blocks)
    }
}

impl DiffusionSection {
    fn from_model(c: &DiffusionConfig, cascade_dec_blocks: usize) -> Self {
        Self {
            enc_width: c.enc_width,
            enc_blocks: c.enc_blocks,
            dec_width: c.dec_width,
            dec_blocks: c.dec_blocks,
            cascade_dec_blocks,
            heads: c.heads,
            mlp_ratio: c.mlp_ratio,
            tau_max: c.tau_max,
            camera_dropout: c.camera_dropout,
        }
    }

    pub fn model(&self, level: usize, cascade: bool) -> DiffusionConfig {
        DiffusionConfig {
            level,
            cascade,
            enc_width: self.enc_width,
            enc_blocks: self.enc_blocks,
            dec_width: self.dec_width,
            dec_blocks: if cascade { self.cascade_dec_blocks } else { self.dec_blocks },
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            tau_max: self.tau_max,
            camera_dropout: self.camera_dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub geo: GeoEncoderConfig,
    pub geo_train: TrainConfig,
    pub decoder: RgbDecoderConfig,
    pub decoder_train: TrainConfig,
    pub diffusion: DiffusionSection,
    pub diffusion_train: TrainConfig,
    pub diffusion_data: DiffusionData,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ExperimentConfig {
    /// Laptop-scale preset: 32×32 images, small models and short schedules.
    pub fn toy() -> Self {
        let train = |steps, lr| TrainConfig {
            steps,
            lr,
            lr_min: lr * 0.1,
            warmup: steps / 20,
            ..TrainConfig::default()
        };
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/toy"),
            data: DataConfig::default(),
            geo: GeoEncoderConfig::toy(),
            geo_train: train(300, 1e-3),
            decoder: RgbDecoderConfig::toy(),
            decoder_train: train(3000, 2e-3),
            diffusion: DiffusionSection::default(),
            diffusion_train: train(300, 1e-3),
            diffusion_data: DiffusionData::default(),
            sampler: SamplerConfig {
                n_steps: 20,
                ..SamplerConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }

    /// Full-width architecture with the reference sampler settings; training
    /// it needs an accelerator and a larger corpus.
    pub fn full() -> Self {
        let full = DiffusionConfig::full(1, false);
        Self {
            output_dir: PathBuf::from("runs/full"),
            data: DataConfig {
                scenes: 256,
                eval_scenes: 32,
                image_width: 64,
                image_height: 64,
                ..DataConfig::default()
            },
            geo: GeoEncoderConfig::default(),
            decoder: RgbDecoderConfig::default(),
            diffusion: DiffusionSection::from_model(&full, DiffusionConfig::full(0, true).dec_blocks),
            sampler: SamplerConfig::default(),
            ..Self::toy()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "full" => Ok(Self::full()),
            other => Err(GldError::Config(format!("unknown preset `{other}` (expected toy or full)"))),
        }
    }

    pub fn from_toml_str(s: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table = s.parse().map_err(|e: toml::de::Error| GldError::Config(e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| GldError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or starts from the toy preset when `path` is `None`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| GldError::io(p, e))?,
            None => Self::toy().to_toml()?,
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| GldError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.geo.validate()?;
        for (l, c) in [(1, false), (0, true)] {
            self.diffusion.model(l, c).validate()?;
        }
        if self.data.scenes == 0 {
            return Err(GldError::Config("data.scenes must be positive".into()));
        }
        if !self.data.image_width.is_multiple_of(self.geo.patch_size) || !self.data.image_height.is_multiple_of(self.geo.patch_size) {
            return Err(GldError::Config("image size must be a multiple of geo.patch_size".into()));
        }
        let e = &self.eval;
        if e.boundary >= gld_core::NUM_LEVELS {
            return Err(GldError::Config(format!("eval.boundary {} out of range", e.boundary)));
        }
        if e.views > self.data.n_views || e.n_sources == 0 || e.n_sources > e.views.saturating_sub(1).min(4) {
            return Err(GldError::Config(format!(
                "eval needs 1..=min(4, views-1) sources and at most {} views",
                self.data.n_views
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization (keys in declaration order).
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        sha256_hex(json.as_bytes())[..16].to_string()
    }
}

/// `section.key=value`, where `value` is parsed as a TOML literal and falls
/// back to a bare string.
fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| GldError::Config(format!("override `{spec}` is not key=value")))?;
    let value: toml::Value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut table = root;
    for p in path {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| GldError::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_preserves_hash() {
        for cfg in [ExperimentConfig::toy(), ExperimentConfig::full()] {
            let back = ExperimentConfig::from_toml_str(&cfg.to_toml().unwrap(), &[]).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash(), cfg.hash());
        }
    }

    #[test]
    fn overrides_change_fields_and_hash() {
        let base = ExperimentConfig::toy();
        let text = base.to_toml().unwrap();
        let o = ExperimentConfig::from_toml_str(
            &text,
            &["geo_train.steps=7".into(), "data.trajectory=dolly".into(), "sampler.cfg_scale=2.0".into()],
        )
        .unwrap();
        assert_eq!(o.geo_train.steps, 7);
        assert_eq!(o.data.trajectory, TrajectoryKind::Dolly);
        assert_eq!(o.sampler.cfg_scale, 2.0);
        assert_ne!(o.hash(), base.hash());
        assert!(ExperimentConfig::from_toml_str(&text, &["geo.bogus=1".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str(&text, &["nokey".into()]).is_err());
    }

    #[test]
    fn partial_file_takes_defaults() {
        let cfg = ExperimentConfig::from_toml_str("seed = 3\n[data]\nscenes = 2\n", &[]).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.data.scenes, 2);
        assert_eq!(cfg.geo, ExperimentConfig::toy().geo);
    }
}
