//! Multi-view flow-matching models over one feature level.
//!
//! Each model is a condition encoder (width `C1`, AdaLN from the timestep)
//! followed by a velocity decoder (width `C2`, per-token AdaLN from the
//! encoder output plus the timestep). Tokens from all views attend jointly
//! with the projective relative-pose encoding, and Plücker rays plus the
//! source/target indicator are added in both halves.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use gld_core::camera::CameraPose;
use gld_core::condition::{camera_conditioning, CameraConditioning, CAMERA_DROPOUT_P};
use gld_core::stats::LatentStats;
use gld_core::views::{sample_views, ViewSplit};
use gld_core::{MultiViewSequence, NUM_LEVELS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{GldError, Result};
use crate::geoenc::{images_tensor, parse_size, GeoEncoder};
use crate::latent::normalize_level;
use crate::nn::{self, Linear, SwiGlu};
use crate::params::{load_checkpoint, save_checkpoint, ParamStore};
use crate::prope::{prope_attention, PropeTables};
use crate::train::{clipped_step, Ema, TrainConfig, TrainLog};

pub const CHECKPOINT_KIND: &str = "mvdiff";

/// Level the cascaded model conditions on.
pub const CASCADE_SOURCE_LEVEL: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    /// Feature level this model generates.
    pub level: usize,
    /// Conditioned on a (generated) level-1 latent; only valid for level 0.
    pub cascade: bool,
    pub enc_width: usize,
    pub enc_blocks: usize,
    pub dec_width: usize,
    pub dec_blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Upper bound of the cascade-condition noise level during training.
    pub tau_max: f64,
    pub camera_dropout: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            level: 1,
            cascade: false,
            enc_width: 96,
            enc_blocks: 6,
            dec_width: 256,
            dec_blocks: 3,
            heads: 4,
            mlp_ratio: 4,
            tau_max: 0.3,
            camera_dropout: CAMERA_DROPOUT_P,
        }
    }
}

impl DiffusionConfig {
    pub fn for_level(level: usize) -> Self {
        Self {
            level,
            ..Self::default()
        }
    }

    pub fn cascade() -> Self {
        Self {
            level: 0,
            cascade: true,
            dec_blocks: 1,
            ..Self::default()
        }
    }

    /// Small preset used by tests and the end-to-end recipes.
    pub fn toy(level: usize, cascade: bool) -> Self {
        Self {
            level,
            cascade,
            enc_width: 64,
            enc_blocks: 2,
            dec_width: 96,
            dec_blocks: if cascade { 1 } else { 2 },
            heads: 4,
            mlp_ratio: 2,
            ..Self::default()
        }
    }

    /// Full-size architecture (not trainable on a desk machine).
    pub fn full(level: usize, cascade: bool) -> Self {
        Self {
            level,
            cascade,
            enc_width: 768,
            enc_blocks: 28,
            dec_width: 2048,
            dec_blocks: if cascade { 2 } else { 6 },
            heads: 16,
            mlp_ratio: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.level >= NUM_LEVELS {
            return Err(GldError::Config(format!("level {} out of range", self.level)));
        }
        if self.cascade && self.level != 0 {
            return Err(GldError::Config("the cascaded model generates level 0".into()));
        }
        if self.dec_blocks == 0 {
            return Err(GldError::Config("velocity decoder needs at least one block".into()));
        }
        for w in [self.enc_width, self.dec_width] {
            if w % self.heads != 0 || !(w / self.heads).is_multiple_of(8) {
                return Err(GldError::Config(format!(
                    "width {w} must split into {} heads of a multiple of 8 channels",
                    self.heads
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.tau_max) || !(0.0..=1.0).contains(&self.camera_dropout) {
            return Err(GldError::Config("tau_max and camera_dropout must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn name(&self) -> String {
        if self.cascade {
            "cascade_1to0".into()
        } else {
            format!("level{}", self.level)
        }
    }
}

/// Everything a model is conditioned on for one `V`-view set.
#[derive(Debug, Clone)]
pub struct ConditioningBundle {
    pub level: usize,
    /// `[V, T, C]` normalized source-only features; target rows are zero.
    pub src_features: Tensor,
    pub camera: CameraConditioning,
    /// `[V, T, C]` normalized level-1 latent for the cascaded model.
    pub cascade_features: Option<Tensor>,
}

impl ConditioningBundle {
    pub fn views(&self) -> usize {
        self.camera.views
    }

    pub fn camera_dropped(&self) -> bool {
        self.camera.camera_dropped
    }

    /// Copy with camera embeddings removed (the unconditional branch).
    pub fn dropped(&self) -> Self {
        Self {
            camera: self.camera.dropped(),
            ..self.clone()
        }
    }

    pub fn with_cascade(&self, features: Tensor) -> Self {
        Self {
            cascade_features: Some(features),
            ..self.clone()
        }
    }
}

/// Builds the conditioning for views with poses `cameras`; `is_target[i]`
/// marks views to generate, and `src_images` holds the source images
/// (`[N, H, W, 3]`) in view order. Sources are encoded on their own.
pub fn build_condition(
    geo: &GeoEncoder,
    stats: &LatentStats,
    src_images: &Tensor,
    cameras: &[CameraPose],
    is_target: &[bool],
    level: usize,
) -> Result<ConditioningBundle> {
    let n_src = is_target.iter().filter(|t| !**t).count();
    if n_src == 0 {
        return Err(GldError::InvalidArgument("conditioning needs at least one source view".into()));
    }
    if src_images.dim(0)? != n_src {
        return Err(GldError::InvalidArgument(format!(
            "{} source images for {n_src} source views",
            src_images.dim(0)?
        )));
    }
    let (h, w) = geo.image_size();
    let (gh, gw) = geo.grid();
    let camera = camera_conditioning(cameras, is_target, h, w, gh, gw)?;
    let src = geo.encode_multiview(src_images)?;
    let src = normalize_level(&src.levels[level], stats, level)?;
    let (t, c) = (gh * gw, geo.config.channels);
    let zero = Tensor::zeros((1, t, c), src.dtype(), &Device::Cpu)?;
    let mut rows = Vec::with_capacity(cameras.len());
    let mut next = 0;
    for &tgt in is_target {
        if tgt {
            rows.push(zero.clone());
        } else {
            rows.push(src.narrow(0, next, 1)?);
            next += 1;
        }
    }
    Ok(ConditioningBundle {
        level,
        src_features: Tensor::cat(&rows, 0)?,
        camera,
        cascade_features: None,
    })
}

/// Conditioning for a view split of a dataset sequence.
pub fn condition_for_split(
    geo: &GeoEncoder,
    stats: &LatentStats,
    seq: &MultiViewSequence,
    split: &ViewSplit,
    level: usize,
) -> Result<ConditioningBundle> {
    let mask = split.target_mask();
    let src_frames: Vec<usize> = split
        .frames
        .iter()
        .zip(&mask)
        .filter(|(_, t)| !**t)
        .map(|(f, _)| *f)
        .collect();
    let cams: Vec<CameraPose> = split.frames.iter().map(|&f| seq.views[f].camera).collect();
    let imgs = images_tensor(seq, &src_frames, geo.dtype())?;
    build_condition(geo, stats, &imgs, &cams, &mask, level)
}

/// Transformer block with adaptive RMS-norm modulation and relative-pose
/// 3D attention. The modulation projection starts at zero.
#[derive(Debug, Clone)]
struct AdaBlock {
    ada: Linear,
    qkv: Linear,
    proj: Linear,
    mlp: SwiGlu,
    heads: usize,
    width: usize,
}

impl AdaBlock {
    fn new(ps: &mut ParamStore, name: &str, width: usize, cond: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        ps.scoped(name, |ps| {
            Ok(Self {
                ada: Linear::zeros(ps, "ada", cond, 6 * width)?,
                qkv: Linear::new(ps, "qkv", width, 3 * width, true)?,
                proj: Linear::new(ps, "proj", width, width, true)?,
                mlp: SwiGlu::new(ps, "mlp", width, width * mlp_ratio)?,
                heads,
                width,
            })
        })
    }

    /// `x: [B, N, W]`, `c: [B, 1 | N, cond]`.
    fn forward(&self, x: &Tensor, c: &Tensor, tables: &PropeTables, probe: &mut Option<&mut Vec<AttnRecord>>) -> Result<Tensor> {
        let w = self.width;
        let m = self.ada.forward(&c.silu()?)?;
        let chunk = |i: usize| m.narrow(D::Minus1, i * w, w);
        let (sh1, sc1, g1, sh2, sc2, g2) = (chunk(0)?, chunk(1)?, chunk(2)?, chunk(3)?, chunk(4)?, chunk(5)?);
        let h = nn::rms_normalize(x)?.broadcast_mul(&(sc1 + 1.0)?)?.broadcast_add(&sh1)?;
        let qkv = self.qkv.forward(&h)?;
        let q = nn::split_heads(&qkv.narrow(D::Minus1, 0, w)?, self.heads)?;
        let k = nn::split_heads(&qkv.narrow(D::Minus1, w, w)?, self.heads)?;
        let v = nn::split_heads(&qkv.narrow(D::Minus1, 2 * w, w)?, self.heads)?;
        if let Some(p) = probe.as_mut() {
            p.push(AttnRecord {
                q: q.detach(),
                k: k.detach(),
            });
        }
        let a = nn::merge_heads(&prope_attention(&q, &k, &v, tables)?)?;
        let x = (x + self.proj.forward(&a)?.broadcast_mul(&g1)?)?;
        let h = nn::rms_normalize(&x)?.broadcast_mul(&(sc2 + 1.0)?)?.broadcast_add(&sh2)?;
        Ok((&x + self.mlp.forward(&h)?.broadcast_mul(&g2)?)?)
    }
}

/// Queries and keys of one attention layer, `[B, H, N, D]`, recorded before
/// the relative-pose encoding is applied.
#[derive(Debug, Clone)]
pub struct AttnRecord {
    pub q: Tensor,
    pub k: Tensor,
}

/// Per-sample random draws of one training step.
#[derive(Debug, Clone)]
pub struct FlowNoise {
    pub t: Vec<f64>,
    /// `[B, V, T, C]`.
    pub eps: Tensor,
    pub tau: Vec<f64>,
    pub eps_cascade: Option<Tensor>,
    pub camera_dropped: Vec<bool>,
}

/// Training examples: normalized full-pass latents and their conditioning.
#[derive(Debug, Clone)]
pub struct DiffusionBatch {
    /// `[B, V, T, C]` clean normalized latent of the model's level.
    pub clean: Tensor,
    pub bundles: Vec<ConditioningBundle>,
    /// `[B, V, T, C]` clean normalized level-1 latent (cascade only).
    pub cascade_clean: Option<Tensor>,
}

pub struct DiffusionModel {
    pub config: DiffusionConfig,
    pub seed: u64,
    pub store: ParamStore,
    /// Fingerprint of the frozen encoder and id of the statistics corpus.
    pub encoder_fingerprint: String,
    pub stats_id: String,
    channels: usize,
    grid: (usize, usize),
    image: (usize, usize),
    enc_embed: [Linear; 2],
    enc_cam: Linear,
    t_mlp: (Linear, Linear),
    enc_blocks: Vec<AdaBlock>,
    dec_embed: [Linear; 2],
    dec_cam: Linear,
    enc_to_dec: Linear,
    t_to_dec: Linear,
    dec_blocks: Vec<AdaBlock>,
    final_ada: Linear,
    final_out: Linear,
}

impl DiffusionModel {
    pub fn new(config: DiffusionConfig, geo: &GeoEncoder, stats_id: &str, seed: u64) -> Result<Self> {
        Self::build(
            config,
            geo.config.channels,
            geo.grid(),
            geo.image_size(),
            seed,
            geo.fingerprint()?,
            stats_id.to_string(),
            DType::F32,
        )
    }

    /// Standalone model with explicit shapes (used for numerical checks).
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        config: DiffusionConfig,
        channels: usize,
        grid: (usize, usize),
        image: (usize, usize),
        seed: u64,
        encoder_fingerprint: String,
        stats_id: String,
        dtype: DType,
    ) -> Result<Self> {
        config.validate()?;
        let c = channels;
        let in_c = if config.cascade { 3 * c } else { 2 * c };
        let (we, wd) = (config.enc_width, config.dec_width);
        let mut ps = ParamStore::new(seed, dtype);
        let enc_embed = [
            Linear::new(&mut ps, "enc.embed_src", in_c, we, true)?,
            Linear::new(&mut ps, "enc.embed_tgt", in_c, we, true)?,
        ];
        let enc_cam = Linear::new(&mut ps, "enc.camera", 7, we, true)?;
        let t_mlp = (
            Linear::new(&mut ps, "time.fc1", we, we, true)?,
            Linear::new(&mut ps, "time.fc2", we, we, true)?,
        );
        let enc_blocks = (0..config.enc_blocks)
            .map(|i| AdaBlock::new(&mut ps, &format!("enc.block{i:02}"), we, we, config.heads, config.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let dec_embed = [
            Linear::new(&mut ps, "dec.embed_src", in_c, wd, true)?,
            Linear::new(&mut ps, "dec.embed_tgt", in_c, wd, true)?,
        ];
        let dec_cam = Linear::new(&mut ps, "dec.camera", 7, wd, true)?;
        let enc_to_dec = Linear::new(&mut ps, "dec.cond_enc", we, wd, true)?;
        let t_to_dec = Linear::new(&mut ps, "dec.cond_time", we, wd, true)?;
        let dec_blocks = (0..config.dec_blocks)
            .map(|i| AdaBlock::new(&mut ps, &format!("dec.block{i:02}"), wd, wd, config.heads, config.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let final_ada = Linear::zeros(&mut ps, "final.ada", wd, 2 * wd)?;
        let final_out = Linear::zeros(&mut ps, "final.out", wd, c)?;
        Ok(Self {
            config,
            seed,
            store: ps,
            encoder_fingerprint,
            stats_id,
            channels: c,
            grid,
            image,
            enc_embed,
            enc_cam,
            t_mlp,
            enc_blocks,
            dec_embed,
            dec_cam,
            enc_to_dec,
            t_to_dec,
            dec_blocks,
            final_ada,
            final_out,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of 3D-attention layers (encoder then decoder).
    pub fn attention_layers(&self) -> usize {
        self.enc_blocks.len() + self.dec_blocks.len()
    }

    /// Replaces every all-zero parameter by Gaussian noise; used to exercise
    /// gradients through the zero-initialized layers.
    pub fn randomize_zero_parameters(&mut self, std: f64, seed: u64) -> Result<()> {
        let mut ps = ParamStore::new(seed, self.dtype());
        for name in self.store.names().map(String::from).collect::<Vec<_>>() {
            let var = self.store.get(&name).expect("name from store");
            let t = var.as_tensor();
            if nn::scalar(&t.abs()?.sum_all()?)? == 0.0 {
                let data = ps.normal_vec(t.elem_count()).into_iter().map(|x| x * std).collect::<Vec<_>>();
                var.set(&Tensor::from_vec(data, t.dims(), &Device::Cpu)?.to_dtype(t.dtype())?)?;
            }
        }
        Ok(())
    }

    fn check_bundle(&self, b: &ConditioningBundle, views: usize) -> Result<()> {
        if b.views() != views {
            return Err(GldError::InvalidArgument(format!(
                "conditioning has {} views, latent has {views}",
                b.views()
            )));
        }
        if b.level != self.config.level {
            return Err(GldError::InvalidArgument(format!(
                "conditioning for level {} given to the level-{} model",
                b.level, self.config.level
            )));
        }
        if self.config.cascade && b.cascade_features.is_none() {
            return Err(GldError::MissingAsset("cascade features for the cascaded model".into()));
        }
        Ok(())
    }

    fn stack(&self, ts: Vec<Tensor>) -> Result<Tensor> {
        Ok(Tensor::stack(&ts, 0)?.to_dtype(self.dtype())?)
    }

    /// Velocity for `z_t: [B, V, T, C]` at times `t` (one per sample).
    pub fn predict_velocity(&self, z_t: &Tensor, t: &[f64], bundles: &[ConditioningBundle]) -> Result<Tensor> {
        self.forward(z_t, t, bundles, &mut None)
    }

    /// Velocity plus the per-layer attention queries/keys.
    pub fn predict_velocity_probe(
        &self,
        z_t: &Tensor,
        t: &[f64],
        bundles: &[ConditioningBundle],
    ) -> Result<(Tensor, Vec<AttnRecord>)> {
        let mut rec = Vec::new();
        let v = self.forward(z_t, t, bundles, &mut Some(&mut rec))?;
        Ok((v, rec))
    }

    fn forward(
        &self,
        z_t: &Tensor,
        t: &[f64],
        bundles: &[ConditioningBundle],
        probe: &mut Option<&mut Vec<AttnRecord>>,
    ) -> Result<Tensor> {
        let (b, v, tk, c) = z_t.dims4()?;
        if c != self.channels || tk != self.grid.0 * self.grid.1 {
            return Err(GldError::InvalidArgument(format!(
                "latent {:?} does not match [*, *, {}, {}]",
                z_t.dims(),
                self.grid.0 * self.grid.1,
                self.channels
            )));
        }
        if bundles.len() != b || t.len() != b {
            return Err(GldError::InvalidArgument(format!(
                "{} conditionings and {} times for a batch of {b}",
                bundles.len(),
                t.len()
            )));
        }
        for bd in bundles {
            self.check_bundle(bd, v)?;
        }
        let dev = Device::Cpu;
        let dtype = self.dtype();
        let n = v * tk;
        let mut parts = vec![
            z_t.to_dtype(dtype)?,
            self.stack(bundles.iter().map(|x| x.src_features.clone()).collect())?,
        ];
        if self.config.cascade {
            parts.push(self.stack(bundles.iter().map(|x| x.cascade_features.clone().expect("checked")).collect())?);
        }
        let inp = Tensor::cat(&parts, D::Minus1)?.reshape((b, n, parts.len() * c))?;
        let ind: Vec<f32> = bundles.iter().flat_map(|x| x.camera.indicator.iter().copied()).collect();
        let ind = Tensor::from_vec(ind, (b, n, 1), &dev)?.to_dtype(dtype)?;
        let cam: Vec<f32> = bundles.iter().flat_map(|x| x.camera.channels7()).collect();
        let cam = Tensor::from_vec(cam, (b, n, 7), &dev)?.to_dtype(dtype)?;
        let route = |emb: &[Linear; 2]| -> Result<Tensor> {
            let s = emb[0].forward(&inp)?.broadcast_mul(&(1.0 - &ind)?)?;
            let g = emb[1].forward(&inp)?.broadcast_mul(&ind)?;
            Ok((s + g)?)
        };
        let projective: Vec<Vec<[f64; 16]>> = bundles.iter().map(|x| x.camera.projective.clone()).collect();
        let heads = self.config.heads;
        let (gh, gw) = self.grid;
        let (we, wd) = (self.config.enc_width, self.config.dec_width);
        let enc_tables = PropeTables::new(&projective, v, gh, gw, heads, we / heads, dtype)?;
        let dec_tables = PropeTables::new(&projective, v, gh, gw, heads, wd / heads, dtype)?;

        let temb = nn::timestep_embedding(t, we, dtype)?;
        let temb = self.t_mlp.1.forward(&self.t_mlp.0.forward(&temb)?.silu()?)?;
        let c_enc = temb.unsqueeze(1)?;
        let mut h = (route(&self.enc_embed)? + self.enc_cam.forward(&cam)?)?;
        for blk in &self.enc_blocks {
            h = blk.forward(&h, &c_enc, &enc_tables, probe)?;
        }
        let c_dec = self
            .enc_to_dec
            .forward(&h)?
            .broadcast_add(&self.t_to_dec.forward(&temb)?.unsqueeze(1)?)?;
        let mut x = (route(&self.dec_embed)? + self.dec_cam.forward(&cam)?)?;
        for blk in &self.dec_blocks {
            x = blk.forward(&x, &c_dec, &dec_tables, probe)?;
        }
        let m = self.final_ada.forward(&c_dec.silu()?)?;
        let shift = m.narrow(D::Minus1, 0, wd)?;
        let scale = m.narrow(D::Minus1, wd, wd)?;
        let y = nn::rms_normalize(&x)?.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(&shift)?;
        Ok(self.final_out.forward(&y)?.reshape((b, v, tk, c))?)
    }

    /// Draws `t`, noise, cascade corruption and camera dropout for a batch.
    pub fn draw_noise(&self, batch: &DiffusionBatch, rng: &mut ChaCha8Rng) -> Result<FlowNoise> {
        let b = batch.bundles.len();
        let shape = batch.clean.dims().to_vec();
        let numel: usize = shape.iter().product();
        let gauss = |rng: &mut ChaCha8Rng| -> Result<Tensor> {
            let d: Vec<f64> = (0..numel).map(|_| StandardNormal.sample(&mut *rng)).collect();
            Ok(Tensor::from_vec(d, shape.as_slice(), &Device::Cpu)?.to_dtype(self.dtype())?)
        };
        let t = (0..b).map(|_| rng.random::<f64>()).collect();
        let eps = gauss(rng)?;
        let (tau, eps_cascade) = if self.config.cascade {
            let tau = (0..b).map(|_| rng.random::<f64>() * self.config.tau_max).collect();
            (tau, Some(gauss(rng)?))
        } else {
            (vec![0.0; b], None)
        };
        let camera_dropped = (0..b).map(|_| rng.random::<f64>() < self.config.camera_dropout).collect();
        Ok(FlowNoise {
            t,
            eps,
            tau,
            eps_cascade,
            camera_dropped,
        })
    }

    /// Mean-squared velocity error for fixed random draws.
    pub fn loss_with_noise(&self, batch: &DiffusionBatch, noise: &FlowNoise) -> Result<Tensor> {
        let dtype = self.dtype();
        let b = batch.bundles.len();
        let per_sample = |vals: &[f64]| -> Result<Tensor> {
            Ok(Tensor::from_vec(vals.to_vec(), (b, 1, 1, 1), &Device::Cpu)?.to_dtype(dtype)?)
        };
        let f = batch.clean.to_dtype(dtype)?;
        let tt = per_sample(&noise.t)?;
        let z = (f.broadcast_mul(&(1.0 - &tt)?)? + noise.eps.broadcast_mul(&tt)?)?;
        let u = (&noise.eps - &f)?;
        let mut bundles: Vec<ConditioningBundle> = batch
            .bundles
            .iter()
            .zip(&noise.camera_dropped)
            .map(|(bd, &drop)| if drop { bd.dropped() } else { bd.clone() })
            .collect();
        if self.config.cascade {
            let f1 = batch
                .cascade_clean
                .as_ref()
                .ok_or_else(|| GldError::MissingAsset("level-1 latents for cascade training".into()))?
                .to_dtype(dtype)?;
            let eps1 = noise.eps_cascade.as_ref().expect("drawn for cascade models");
            let tau = per_sample(&noise.tau)?;
            let c1 = (f1.broadcast_mul(&(1.0 - &tau)?)? + eps1.broadcast_mul(&tau)?)?;
            for (i, bd) in bundles.iter_mut().enumerate() {
                bd.cascade_features = Some(c1.get(i)?);
            }
        }
        let pred = self.predict_velocity(&z, &noise.t, &bundles)?;
        Ok((pred - u)?.sqr()?.mean_all()?)
    }

    pub fn training_step(&self, batch: &DiffusionBatch, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let noise = self.draw_noise(batch, rng)?;
        self.loss_with_noise(batch, &noise)
    }

    /// Saves the weights; `extra` is merged into the metadata.
    pub fn save(&self, path: &Path, extra: BTreeMap<String, String>) -> Result<String> {
        let mut m = extra;
        m.insert("kind".into(), CHECKPOINT_KIND.to_string());
        m.insert("config".into(), serde_json::to_string(&self.config).expect("config serializes"));
        m.insert("seed".into(), self.seed.to_string());
        m.insert("level".into(), self.config.level.to_string());
        m.insert("is_cascade".into(), self.config.cascade.to_string());
        m.insert("channels".into(), self.channels.to_string());
        m.insert("grid".into(), format!("{}x{}", self.grid.0, self.grid.1));
        m.insert("image_size".into(), format!("{}x{}", self.image.0, self.image.1));
        m.insert("parent.geoenc".into(), self.encoder_fingerprint.clone());
        m.insert("stats_id".into(), self.stats_id.clone());
        save_checkpoint(path, &self.store, m)
    }

    /// Loads a model and checks that it belongs to `geo` and `stats`.
    pub fn load(path: &Path, geo: &GeoEncoder, stats: &LatentStats) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        ck.expect_kind(CHECKPOINT_KIND, path)?;
        let fp = geo.fingerprint()?;
        let parent = ck.get_meta("parent.geoenc")?;
        if parent != fp {
            return Err(GldError::FingerprintMismatch {
                what: format!("encoder of {}", path.display()),
                expected: parent.into(),
                found: fp,
            });
        }
        let sid = ck.get_meta("stats_id")?;
        if sid != stats.corpus_id {
            return Err(GldError::FingerprintMismatch {
                what: format!("latent statistics of {}", path.display()),
                expected: sid.into(),
                found: stats.corpus_id.clone(),
            });
        }
        let config = serde_json::from_str(ck.get_meta("config")?).map_err(|e| GldError::format(path, e))?;
        let seed = ck.get_meta("seed")?.parse().map_err(|e| GldError::format(path, e))?;
        let grid = parse_size(ck.get_meta("grid")?).ok_or_else(|| GldError::format(path, "bad grid"))?;
        if grid != geo.grid() {
            return Err(GldError::format(path, "token grid differs from the encoder's"));
        }
        let m = Self::new(config, geo, sid, seed)?;
        m.store.load_from(&ck.tensors)?;
        Ok(m)
    }
}

/// Data-side settings for diffusion training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionData {
    pub views: usize,
    /// Number of sources is drawn uniformly from `1..=max_sources`.
    pub max_sources: usize,
    pub max_interval: usize,
}

impl Default for DiffusionData {
    fn default() -> Self {
        Self {
            views: 4,
            max_sources: 2,
            max_interval: 2,
        }
    }
}

/// One training example for a level (and the cascade input when needed).
pub fn make_example(
    geo: &GeoEncoder,
    stats: &LatentStats,
    seq: &MultiViewSequence,
    split: &ViewSplit,
    config: &DiffusionConfig,
) -> Result<(Tensor, ConditioningBundle, Option<Tensor>)> {
    let full = geo.encode_sequence(seq, &split.frames)?.normalize(stats)?;
    let bundle = condition_for_split(geo, stats, seq, split, config.level)?;
    let cascade = config
        .cascade
        .then(|| full.levels[CASCADE_SOURCE_LEVEL].clone());
    Ok((full.levels[config.level].clone(), bundle, cascade))
}

pub fn make_batch(
    geo: &GeoEncoder,
    stats: &LatentStats,
    items: &[(&MultiViewSequence, ViewSplit)],
    config: &DiffusionConfig,
) -> Result<DiffusionBatch> {
    let mut clean = Vec::new();
    let mut bundles = Vec::new();
    let mut cascade = Vec::new();
    for (seq, split) in items {
        let (f, b, c) = make_example(geo, stats, seq, split, config)?;
        clean.push(f);
        bundles.push(b);
        if let Some(c) = c {
            cascade.push(c);
        }
    }
    Ok(DiffusionBatch {
        clean: Tensor::stack(&clean, 0)?,
        bundles,
        cascade_clean: if cascade.is_empty() { None } else { Some(Tensor::stack(&cascade, 0)?) },
    })
}

/// Trains one level (or the cascaded) model on normalized frozen features.
pub fn train_diffusion(
    geo: &GeoEncoder,
    stats: &LatentStats,
    data: &[MultiViewSequence],
    config: DiffusionConfig,
    spec: &DiffusionData,
    train: &TrainConfig,
) -> Result<(DiffusionModel, TrainLog)> {
    if data.is_empty() {
        return Err(GldError::InvalidArgument("empty dataset".into()));
    }
    let model = DiffusionModel::new(config, geo, &stats.corpus_id, train.seed)?;
    let mut log = TrainLog::default();
    let vars = model.store.vars();
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW {
            lr: train.lr,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: train.weight_decay,
        },
    )?;
    let mut ema = (train.ema_decay > 0.0).then(|| Ema::new(&vars, train.ema_decay)).transpose()?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x6d76_6466 ^ ((model.config.level as u64) << 40));
    let max_src = spec.max_sources.clamp(1, spec.views - 1);
    for step in 0..train.steps {
        opt.set_learning_rate(train.lr_at(step));
        let items = (0..train.batch)
            .map(|_| {
                let seq = &data[rng.random_range(0..data.len())];
                let n = rng.random_range(1..=max_src);
                let split = sample_views(seq.len(), spec.views, n, rng.random(), spec.max_interval)?;
                Ok((seq, split))
            })
            .collect::<Result<Vec<_>>>()?;
        let batch = make_batch(geo, stats, &items, &model.config)?;
        let loss = model.training_step(&batch, &mut rng)?;
        let value = nn::scalar(&loss)?;
        if !value.is_finite() {
            return Err(GldError::NonFiniteLoss {
                step,
                details: format!("{} model, lr {:.2e}", model.config.name(), train.lr_at(step)),
            });
        }
        clipped_step(&mut opt, &vars, &loss, train.grad_clip)?;
        if let Some(e) = ema.as_mut() {
            e.update(&vars)?;
        }
        log.record(step, value);
    }
    if let Some(e) = &ema {
        e.apply(&vars)?;
    }
    Ok((model, log))
}
