//! Three-stage inference: sample the boundary level (and any shallower
//! levels), derive deeper levels with the frozen encoder, then decode RGB and
//! geometry.

use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use gld_core::camera::CameraPose;
use gld_core::flow::{cfg_velocity, euler_sample, DEFAULT_CFG_SCALE};
use gld_core::raster::Image;
use gld_core::stats::LatentStats;
use gld_core::{LevelMask, NUM_LEVELS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{GldError, Result};
use crate::geoenc::{GeoEncoder, GeometryOutput};
use crate::latent::{denormalize_level, LevelFeatures};
use crate::mvdiff::{build_condition, ConditioningBundle, DiffusionModel, CASCADE_SOURCE_LEVEL};
use crate::rgbdec::RgbDecoder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    #[default]
    Euler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub cfg_scale: f32,
    /// Per-level guidance overrides as `(level, scale)` pairs; other levels
    /// use `cfg_scale`.
    pub level_cfg: Vec<(usize, f32)>,
    pub seed: u64,
    pub integrator: Integrator,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 50,
            cfg_scale: DEFAULT_CFG_SCALE,
            level_cfg: Vec::new(),
            seed: 0,
            integrator: Integrator::Euler,
        }
    }
}

impl SamplerConfig {
    pub fn scale_for(&self, level: usize) -> f32 {
        self.level_cfg
            .iter()
            .rev()
            .find(|(l, _)| *l == level)
            .map_or(self.cfg_scale, |(_, s)| *s)
    }
}

/// Gaussian draw of `shape` from a seeded stream.
pub fn gaussian(shape: &[usize], seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Samples a normalized `[V, T, C]` latent with guided Euler integration
/// from `t = 1` to `t = 0`.
pub fn sample_level(
    model: &DiffusionModel,
    cond: &ConditioningBundle,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Tensor> {
    let v = cond.views();
    let t = cond.src_features.dims()[1];
    let c = model.channels();
    let shape = [v, t, c];
    let scale = cfg.scale_for(model.config.level);
    let uncond = cond.dropped();
    let guided = scale != 1.0;
    let both = [cond.clone(), uncond];
    let init = gaussian(&shape, seed);
    let out = euler_sample::<GldError, _>(init, cfg.n_steps, |z, time| {
        let zt = Tensor::from_slice(z, (1, v, t, c), &Device::Cpu)?.to_dtype(model.dtype())?;
        let t64 = time as f64;
        if guided {
            let zz = Tensor::cat(&[&zt, &zt], 0)?;
            let u = model.predict_velocity(&zz, &[t64, t64], &both)?.to_dtype(DType::F32)?;
            let uc: Vec<f32> = u.get(0)?.flatten_all()?.to_vec1()?;
            let uu: Vec<f32> = u.get(1)?.flatten_all()?.to_vec1()?;
            Ok(cfg_velocity(&uc, &uu, scale)?)
        } else {
            let u = model.predict_velocity(&zt, &[t64], &both[..1])?.to_dtype(DType::F32)?;
            Ok(u.flatten_all()?.to_vec1()?)
        }
    })?;
    Ok(Tensor::from_vec(out, (v, t, c), &Device::Cpu)?)
}

/// The frozen encoder, decoder, statistics and whichever diffusion models are
/// available.
pub struct ModelSet {
    pub geo: GeoEncoder,
    pub decoder: RgbDecoder,
    pub stats: LatentStats,
    pub levels: [Option<DiffusionModel>; NUM_LEVELS],
    pub cascade: Option<DiffusionModel>,
}

impl ModelSet {
    /// Verifies that every component was built on the same encoder and
    /// statistics corpus.
    pub fn check(&self) -> Result<()> {
        let fp = self.geo.fingerprint()?;
        if self.decoder.encoder_fingerprint != fp {
            return Err(GldError::FingerprintMismatch {
                what: "RGB decoder encoder".into(),
                expected: self.decoder.encoder_fingerprint.clone(),
                found: fp,
            });
        }
        for m in self.levels.iter().flatten().chain(self.cascade.iter()) {
            if m.encoder_fingerprint != fp {
                return Err(GldError::FingerprintMismatch {
                    what: format!("{} encoder", m.config.name()),
                    expected: m.encoder_fingerprint.clone(),
                    found: fp.clone(),
                });
            }
            if m.stats_id != self.stats.corpus_id {
                return Err(GldError::FingerprintMismatch {
                    what: format!("{} statistics", m.config.name()),
                    expected: m.stats_id.clone(),
                    found: self.stats.corpus_id.clone(),
                });
            }
        }
        for (l, m) in self.levels.iter().enumerate() {
            if let Some(m) = m {
                if m.config.level != l || m.config.cascade {
                    return Err(GldError::Config(format!(
                        "model in slot {l} is {}",
                        m.config.name()
                    )));
                }
            }
        }
        if let Some(c) = &self.cascade {
            if !c.config.cascade {
                return Err(GldError::Config("cascade slot holds an independent model".into()));
            }
        }
        Ok(())
    }
}

/// Source images with all camera poses, in view order.
#[derive(Debug, Clone)]
pub struct GenerationRequest {
    /// `[N, H, W, 3]` source images in view order.
    pub src_images: Tensor,
    pub cameras: Vec<CameraPose>,
    pub is_target: Vec<bool>,
}

impl GenerationRequest {
    pub fn target_positions(&self) -> Vec<usize> {
        (0..self.is_target.len()).filter(|&i| self.is_target[i]).collect()
    }
}

/// Wall-clock seconds per phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    /// Sampling the boundary level `k`.
    pub boundary_sampling: f64,
    /// Deriving levels above `k` with the frozen encoder.
    pub propagation: f64,
    /// Sampling the levels below `k` (cascaded where wired).
    pub shallow_sampling: f64,
    /// RGB and geometry decoding.
    pub decoding: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationOptions {
    pub boundary: usize,
    /// Use the cascaded model for level 0 when it is available and `k ≥ 1`.
    pub use_cascade: bool,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        Self {
            boundary: 1,
            use_cascade: true,
        }
    }
}

pub struct GenerationResult {
    pub images: Vec<Image>,
    /// Geometry decoded from the synthesized features, restricted to targets.
    pub geometry: GeometryOutput,
    /// All four unnormalized levels for every view.
    pub latents: LevelFeatures,
    pub target_positions: Vec<usize>,
    pub boundary: usize,
    pub cascaded: bool,
    pub timings: Timings,
}

fn level_seed(seed: u64, level: usize, cascade: bool) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((level as u64) << 8) ^ (cascade as u64)
}

pub fn generate(
    models: &ModelSet,
    req: &GenerationRequest,
    opts: GenerationOptions,
    sampler: &SamplerConfig,
) -> Result<GenerationResult> {
    let k = opts.boundary;
    if k >= NUM_LEVELS {
        return Err(GldError::InvalidArgument(format!("boundary {k} out of range")));
    }
    let targets = req.target_positions();
    if targets.is_empty() {
        return Err(GldError::InvalidArgument("no target views requested".into()));
    }
    let start = Instant::now();
    let mut timings = Timings::default();
    let geo = &models.geo;
    let cascaded = opts.use_cascade && k >= 1 && models.cascade.is_some();
    let model_for = |l: usize| -> Result<&DiffusionModel> {
        models.levels[l]
            .as_ref()
            .ok_or_else(|| GldError::MissingAsset(format!("diffusion model for level {l}")))
    };
    let condition = |l: usize| build_condition(geo, &models.stats, &req.src_images, &req.cameras, &req.is_target, l);

    let mut normalized: Vec<Option<Tensor>> = vec![None; NUM_LEVELS];
    let t0 = Instant::now();
    normalized[k] = Some(sample_level(model_for(k)?, &condition(k)?, sampler, level_seed(sampler.seed, k, false))?);
    timings.boundary_sampling = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let mut levels: Vec<Option<Tensor>> = vec![None; NUM_LEVELS];
    let fk = denormalize_level(normalized[k].as_ref().expect("sampled"), &models.stats, k)?;
    for (i, f) in geo.propagate(&fk, k)?.into_iter().enumerate() {
        levels[k + 1 + i] = Some(f);
    }
    levels[k] = Some(fk);
    timings.propagation = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    for l in (0..k).rev() {
        let z = if l == 0 && cascaded {
            let m = models.cascade.as_ref().expect("checked");
            let f1 = normalized[CASCADE_SOURCE_LEVEL].clone().expect("level 1 sampled before level 0");
            let cond = condition(0)?.with_cascade(f1);
            sample_level(m, &cond, sampler, level_seed(sampler.seed, 0, true))?
        } else {
            sample_level(model_for(l)?, &condition(l)?, sampler, level_seed(sampler.seed, l, false))?
        };
        levels[l] = Some(denormalize_level(&z, &models.stats, l)?);
        normalized[l] = Some(z);
    }
    timings.shallow_sampling = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let latents = LevelFeatures::new(
        levels.into_iter().map(|l| l.expect("all levels filled")).collect(),
        geo.grid(),
    )?;
    let tgt = latents.select_views(&targets)?;
    let images = models.decoder.decode_rgb(&tgt, LevelMask::ALL)?;
    let full_geometry = geo.decode_geometry(&latents)?;
    let idx = Tensor::from_vec(targets.iter().map(|&i| i as u32).collect::<Vec<_>>(), targets.len(), &Device::Cpu)?;
    let geometry = GeometryOutput {
        depth: full_geometry.depth.index_select(&idx, 0)?,
        rays: full_geometry.rays.index_select(&idx, 0)?,
        poses: targets.iter().map(|&i| full_geometry.poses[i]).collect(),
    };
    timings.decoding = t0.elapsed().as_secs_f64();
    timings.total = start.elapsed().as_secs_f64();
    Ok(GenerationResult {
        images,
        geometry,
        latents,
        target_positions: targets,
        boundary: k,
        cascaded,
        timings,
    })
}
