//! RGB decoder over any non-empty subset of the four feature levels.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use gld_core::levels::sample_level_mask;
use gld_core::metrics::{psnr, ssim};
use gld_core::raster::Image;
use gld_core::{LevelMask, MultiViewSequence, NUM_LEVELS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GldError, Result};
use crate::geoenc::{images_tensor, parse_size, Block, GeoEncoder};
use crate::latent::{stat_windows, LevelFeatures};
use crate::nn::{self, Linear, RmsNorm};
use crate::params::{load_checkpoint, save_checkpoint, ParamStore};
use crate::train::{clipped_step, Ema, TrainConfig, TrainLog};

pub const CHECKPOINT_KIND: &str = "rgbdec";

/// Probability of dropping each level during training.
pub const LEVEL_DROPOUT_P: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RgbDecoderConfig {
    pub width: usize,
    pub n_blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub level_dropout: f64,
}

impl Default for RgbDecoderConfig {
    fn default() -> Self {
        Self {
            width: 128,
            n_blocks: 4,
            heads: 4,
            mlp_ratio: 4,
            level_dropout: LEVEL_DROPOUT_P,
        }
    }
}

impl RgbDecoderConfig {
    pub fn toy() -> Self {
        Self {
            width: 64,
            n_blocks: 2,
            heads: 4,
            mlp_ratio: 2,
            level_dropout: LEVEL_DROPOUT_P,
        }
    }
}

pub struct RgbDecoder {
    pub config: RgbDecoderConfig,
    pub seed: u64,
    pub store: ParamStore,
    /// Fingerprint of the encoder whose features this decoder reads.
    pub encoder_fingerprint: String,
    feature_channels: usize,
    patch: usize,
    grid: (usize, usize),
    mask_tokens: Vec<Tensor>,
    proj_in: Linear,
    pos: Tensor,
    blocks: Vec<Block>,
    norm: RmsNorm,
    proj_out: Linear,
}

impl RgbDecoder {
    pub fn new(config: RgbDecoderConfig, encoder: &GeoEncoder, seed: u64) -> Result<Self> {
        let geo = &encoder.config;
        Self::build(
            config,
            geo.channels,
            geo.patch_size,
            encoder.grid(),
            seed,
            encoder.fingerprint()?,
        )
    }

    fn build(
        config: RgbDecoderConfig,
        feature_channels: usize,
        patch: usize,
        grid: (usize, usize),
        seed: u64,
        encoder_fingerprint: String,
    ) -> Result<Self> {
        let c = feature_channels;
        let w = config.width;
        let mut ps = ParamStore::new(seed, DType::F32);
        let mask_tokens = (0..NUM_LEVELS)
            .map(|l| ps.randn(&format!("mask_token{l}"), &[c], 0.02))
            .collect::<Result<Vec<_>>>()?;
        let proj_in = Linear::new(&mut ps, "proj_in", NUM_LEVELS * c, w, true)?;
        let blocks = (0..config.n_blocks)
            .map(|b| Block::new(&mut ps, &format!("block{b:02}"), w, config.heads, config.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let norm = RmsNorm::new(&mut ps, "norm", w)?;
        let proj_out = Linear::new(&mut ps, "proj_out", w, patch * patch * 3, true)?;
        let pos = nn::sincos_2d(grid.0, grid.1, w, DType::F32)?;
        Ok(Self {
            config,
            seed,
            store: ps,
            encoder_fingerprint,
            feature_channels: c,
            patch,
            grid,
            mask_tokens,
            proj_in,
            pos,
            blocks,
            norm,
            proj_out,
        })
    }

    /// `levels[l]: [N, T, C]` per-view features (unnormalized); absent levels
    /// are replaced by their mask token. Returns `[N, H, W, 3]` in `[0, 1]`.
    pub fn forward(&self, levels: &[Tensor], mask: LevelMask) -> Result<Tensor> {
        if mask.is_empty() {
            return Err(GldError::InvalidArgument("decoding needs at least one level".into()));
        }
        if levels.len() != NUM_LEVELS {
            return Err(GldError::InvalidArgument(format!(
                "expected {NUM_LEVELS} level tensors, got {}",
                levels.len()
            )));
        }
        let (n, t, c) = levels[0].dims3()?;
        if c != self.feature_channels || t != self.grid.0 * self.grid.1 {
            return Err(GldError::InvalidArgument(format!(
                "decoder expects [*, {}, {}] features, got {:?}",
                self.grid.0 * self.grid.1,
                self.feature_channels,
                levels[0].dims()
            )));
        }
        let parts: Vec<Tensor> = (0..NUM_LEVELS)
            .map(|l| -> Result<Tensor> {
                if mask.contains(l) {
                    nn::rms_normalize(&levels[l].to_dtype(DType::F32)?)
                } else {
                    Ok(self.mask_tokens[l].reshape((1, 1, c))?.broadcast_as((n, t, c))?)
                }
            })
            .collect::<Result<_>>()?;
        let mut x = self
            .proj_in
            .forward(&Tensor::cat(&parts, D::Minus1)?)?
            .broadcast_add(&self.pos)?;
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        let y = nn::sigmoid(&self.proj_out.forward(&self.norm.forward(&x)?)?)?;
        let p = self.patch;
        let (gh, gw) = self.grid;
        Ok(y
            .reshape((n, gh, gw, p, p, 3))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((n, gh * p, gw * p, 3))?)
    }

    /// Decodes every view of an (unnormalized) feature set.
    pub fn decode_rgb(&self, features: &LevelFeatures, mask: LevelMask) -> Result<Vec<Image>> {
        if features.normalized {
            return Err(GldError::InvalidArgument("RGB decoding needs unnormalized features".into()));
        }
        images_from_tensor(&self.forward(&features.levels, mask)?)
    }

    /// Saves the weights; `extra` is merged into the metadata.
    pub fn save(&self, path: &Path, extra: BTreeMap<String, String>) -> Result<String> {
        let mut m = extra;
        m.insert("kind".into(), CHECKPOINT_KIND.to_string());
        m.insert("config".into(), serde_json::to_string(&self.config).expect("config serializes"));
        m.insert("seed".into(), self.seed.to_string());
        m.insert("feature_channels".into(), self.feature_channels.to_string());
        m.insert("patch".into(), self.patch.to_string());
        m.insert("grid".into(), format!("{}x{}", self.grid.0, self.grid.1));
        m.insert("parent.geoenc".into(), self.encoder_fingerprint.clone());
        save_checkpoint(path, &self.store, m)
    }

    /// Loads a decoder and checks it was trained on `encoder`'s features.
    pub fn load(path: &Path, encoder: &GeoEncoder) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        ck.expect_kind(CHECKPOINT_KIND, path)?;
        let parent = ck.get_meta("parent.geoenc")?;
        let fp = encoder.fingerprint()?;
        if parent != fp {
            return Err(GldError::FingerprintMismatch {
                what: format!("encoder of decoder {}", path.display()),
                expected: parent.to_string(),
                found: fp,
            });
        }
        let config = serde_json::from_str(ck.get_meta("config")?).map_err(|e| GldError::format(path, e))?;
        let num = |k: &str| -> Result<usize> {
            ck.get_meta(k)?.parse().map_err(|e| GldError::format(path, e))
        };
        let grid = parse_size(ck.get_meta("grid")?).ok_or_else(|| GldError::format(path, "bad grid"))?;
        let dec = Self::build(
            config,
            num("feature_channels")?,
            num("patch")?,
            grid,
            num("seed")? as u64,
            parent.to_string(),
        )?;
        dec.store.load_from(&ck.tensors)?;
        Ok(dec)
    }
}

/// `[N, H, W, 3]` → images.
pub fn images_from_tensor(t: &Tensor) -> Result<Vec<Image>> {
    let (n, h, w, _) = t.dims4()?;
    let data: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let per = h * w * 3;
    (0..n)
        .map(|i| Ok(Image::from_data(w, h, data[i * per..(i + 1) * per].to_vec())?))
        .collect()
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) * 0.5;
    let w: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Differentiable mean SSIM over `[N, H, W, 3]` images with the same window
/// rule as the reference metric.
pub fn ssim_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, h, w, c) = a.dims4()?;
    let mut size = 11.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let g = gaussian_kernel(size, 1.5);
    let k2: Vec<f64> = (0..size * size).map(|i| g[i / size] * g[i % size]).collect();
    let kernel = Tensor::from_vec(k2, (1, 1, size, size), &Device::Cpu)?.to_dtype(a.dtype())?;
    let planes = |x: &Tensor| -> Result<Tensor> {
        Ok(x.permute((0, 3, 1, 2))?.contiguous()?.reshape((n * c, 1, h, w))?)
    };
    let (x, y) = (planes(a)?, planes(b)?);
    let f = |t: &Tensor| t.conv2d(&kernel, 0, 1, 1, 1);
    let mx = f(&x)?;
    let my = f(&y)?;
    let vx = (f(&x.sqr()?)? - mx.sqr()?)?;
    let vy = (f(&y.sqr()?)? - my.sqr()?)?;
    let cxy = (f(&(&x * &y)?)? - (&mx * &my)?)?;
    let c1 = 0.01f64 * 0.01;
    let c2 = 0.03f64 * 0.03;
    let num = ((((&mx * &my)? * 2.0)? + c1)? * ((cxy * 2.0)? + c2)?)?;
    let den = (((mx.sqr()? + my.sqr()?)? + c1)? * ((vx + vy)? + c2)?)?;
    Ok((num / den)?.mean_all()?)
}

/// `L1 + (1 − SSIM)` reconstruction loss.
pub fn reconstruction_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let l1 = (pred - target)?.abs()?.mean_all()?;
    Ok((l1 + (1.0 - ssim_tensor(pred, target)?)?)?)
}

/// Encoder features and images of every deterministic `V`-view window; the
/// encoder is frozen, so they are computed once.
pub struct FeatureCache {
    /// `[N, T, C]` per level, `N` = total views.
    pub levels: Vec<Tensor>,
    /// `[N, H, W, 3]`.
    pub images: Tensor,
}

impl FeatureCache {
    pub fn build(encoder: &GeoEncoder, data: &[MultiViewSequence], views: usize) -> Result<Self> {
        let mut per_level: Vec<Vec<Tensor>> = vec![Vec::new(); NUM_LEVELS];
        let mut images = Vec::new();
        for seq in data {
            for frames in stat_windows(seq.len(), views) {
                let f = encoder.encode_sequence(seq, &frames)?;
                for (l, t) in f.levels.into_iter().enumerate() {
                    per_level[l].push(t.to_dtype(DType::F32)?.detach());
                }
                images.push(images_tensor(seq, &frames, DType::F32)?);
            }
        }
        if images.is_empty() {
            return Err(GldError::InvalidArgument(format!("no sequence has {views} frames")));
        }
        Ok(Self {
            levels: per_level
                .iter()
                .map(|ts| Tensor::cat(ts, 0))
                .collect::<candle_core::Result<_>>()?,
            images: Tensor::cat(&images, 0)?,
        })
    }

    pub fn len(&self) -> usize {
        self.images.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[u32]) -> Result<(Vec<Tensor>, Tensor)> {
        let i = Tensor::new(idx, &Device::Cpu)?;
        Ok((
            self.levels
                .iter()
                .map(|l| l.index_select(&i, 0))
                .collect::<candle_core::Result<_>>()?,
            self.images.index_select(&i, 0)?,
        ))
    }
}

/// Trains the decoder on frozen-encoder features with random level dropout.
pub fn train_rgbdec(
    encoder: &GeoEncoder,
    data: &[MultiViewSequence],
    views: usize,
    config: RgbDecoderConfig,
    train: &TrainConfig,
) -> Result<(RgbDecoder, TrainLog)> {
    let cache = FeatureCache::build(encoder, data, views)?;
    let dec = RgbDecoder::new(config, encoder, train.seed)?;
    let mut log = TrainLog::default();
    let vars = dec.store.vars();
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW {
            lr: train.lr,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: train.weight_decay,
        },
    )?;
    let mut ema = (train.ema_decay > 0.0).then(|| Ema::new(&vars, train.ema_decay)).transpose()?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x7267_6264);
    for step in 0..train.steps {
        opt.set_learning_rate(train.lr_at(step));
        let idx: Vec<u32> = (0..train.batch)
            .map(|_| rng.random_range(0..cache.len()) as u32)
            .collect();
        let (levels, target) = cache.select(&idx)?;
        let mask = sample_level_mask(&mut rng, dec.config.level_dropout);
        let pred = dec.forward(&levels, mask)?;
        let loss = reconstruction_loss(&pred, &target)?;
        let value = nn::scalar(&loss)?;
        if !value.is_finite() {
            return Err(GldError::NonFiniteLoss {
                step,
                details: format!("levels {}", mask.label()),
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
    Ok((dec, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconRow {
    pub subset: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Reference (full-stack) reconstruction quality reported for the
/// full-scale model.
pub const REFERENCE_FULL_STACK: (f64, f64) = (35.41, 0.960);
/// Reference single-level (PSNR, SSIM) for levels 0..3.
pub const REFERENCE_SINGLE_LEVEL: [(f64, f64); NUM_LEVELS] =
    [(28.01, 0.922), (25.36, 0.873), (14.01, 0.627), (10.19, 0.508)];

/// Reconstruction quality of each single level and of the full stack.
pub fn recon_report(
    encoder: &GeoEncoder,
    decoder: &RgbDecoder,
    data: &[MultiViewSequence],
    views: usize,
) -> Result<Vec<ReconRow>> {
    let cache = FeatureCache::build(encoder, data, views)?;
    let targets = images_from_tensor(&cache.images)?;
    let mut subsets: Vec<LevelMask> = (0..NUM_LEVELS).map(LevelMask::single).collect();
    subsets.push(LevelMask::ALL);
    subsets
        .into_iter()
        .map(|mask| {
            let pred = images_from_tensor(&decoder.forward(&cache.levels, mask)?)?;
            let (mut p, mut s) = (0.0, 0.0);
            for (a, b) in pred.iter().zip(&targets) {
                p += psnr(a, b)?;
                s += ssim(a, b)?;
            }
            let n = targets.len() as f64;
            Ok(ReconRow {
                subset: mask.label(),
                psnr: p / n,
                ssim: s / n,
            })
        })
        .collect()
}

pub fn recon_csv(rows: &[ReconRow]) -> String {
    let mut s = String::from("subset,psnr,ssim\n");
    for r in rows {
        s.push_str(&format!("{},{:.4},{:.4}\n", r.subset, r.psnr, r.ssim));
    }
    for (l, (p, q)) in REFERENCE_SINGLE_LEVEL.iter().enumerate() {
        s.push_str(&format!("reference:L{l},{p:.2},{q:.3}\n"));
    }
    let (p, q) = REFERENCE_FULL_STACK;
    s.push_str(&format!("reference:all,{p:.2},{q:.3}\n"));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geoenc::GeoEncoderConfig;

    #[test]
    fn tensor_ssim_matches_reference_metric() {
        let mut ps = ParamStore::new(4, DType::F64);
        let n = 2 * 13 * 16 * 3;
        let a: Vec<f64> = ps.normal_vec(n).iter().map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0)).collect();
        let b: Vec<f64> = a.iter().zip(ps.normal_vec(n)).map(|(x, e)| (x + 0.05 * e).clamp(0.0, 1.0)).collect();
        let ta = Tensor::from_vec(a.clone(), (2, 13, 16, 3), &Device::Cpu).unwrap();
        let tb = Tensor::from_vec(b.clone(), (2, 13, 16, 3), &Device::Cpu).unwrap();
        let got = nn::scalar(&ssim_tensor(&ta, &tb).unwrap()).unwrap();
        let per = 13 * 16 * 3;
        let img = |v: &[f64], i: usize| {
            Image::from_data(16, 13, v[i * per..(i + 1) * per].iter().map(|&x| x as f32).collect()).unwrap()
        };
        let want = (ssim(&img(&a, 0), &img(&b, 0)).unwrap() + ssim(&img(&a, 1), &img(&b, 1)).unwrap()) / 2.0;
        assert!((got - want).abs() < 1e-5, "{got} vs {want}");
    }

    #[test]
    fn decodes_any_subset_and_rejects_empty() {
        let geo = GeoEncoderConfig {
            channels: 16,
            heads: 2,
            head_width: 8,
            ..GeoEncoderConfig::toy()
        };
        let enc = GeoEncoder::new(geo, 16, 16, 0).unwrap();
        let cfg = RgbDecoderConfig {
            width: 16,
            n_blocks: 1,
            heads: 2,
            ..RgbDecoderConfig::toy()
        };
        let dec = RgbDecoder::new(cfg, &enc, 1).unwrap();
        let x = Tensor::zeros((3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let levels = vec![x; 4];
        for m in LevelMask::non_empty() {
            let y = dec.forward(&levels, m).unwrap();
            assert_eq!(y.dims(), &[3, 16, 16, 3]);
        }
        assert!(dec.forward(&levels, LevelMask::NONE).is_err());
    }
}
