//! The geometric encoder: a multi-view transformer alternating frame-local and
//! global attention, tapped at four depths, with a dense depth/ray head fused
//! from all four taps and a per-view relative pose head.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use gld_core::camera::{normalize_poses, rotation_from_6d, CameraPose, Mat3, RigidTransform, Vec3};
use gld_core::{MultiViewSequence, NUM_LEVELS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GldError, Result};
use crate::latent::LevelFeatures;
use crate::nn::{self, Conv2d, Linear, RmsNorm, SwiGlu};
use crate::params::{load_checkpoint, save_checkpoint, ParamStore};
use crate::train::{clipped_step, TrainConfig, TrainLog};

pub const CHECKPOINT_KIND: &str = "geoenc";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeoEncoderConfig {
    pub patch_size: usize,
    pub channels: usize,
    /// Odd-numbered blocks (1-based) attend within each frame, even-numbered
    /// blocks across all views.
    pub n_blocks: usize,
    /// 1-based block indices whose outputs form levels 0..3.
    pub level_taps: [usize; NUM_LEVELS],
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Channel width of the dense head.
    pub head_width: usize,
}

impl Default for GeoEncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            channels: 128,
            n_blocks: 8,
            level_taps: [2, 4, 6, 8],
            heads: 4,
            mlp_ratio: 4,
            head_width: 32,
        }
    }
}

impl GeoEncoderConfig {
    /// Small preset used by tests and the acceptance suite.
    pub fn toy() -> Self {
        Self {
            patch_size: 4,
            channels: 64,
            n_blocks: 4,
            level_taps: [1, 2, 3, 4],
            heads: 4,
            mlp_ratio: 2,
            head_width: 24,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.level_taps;
        if !(t[0] >= 1 && t.windows(2).all(|w| w[0] < w[1]) && t[3] <= self.n_blocks) {
            return Err(GldError::Config(format!(
                "level taps {t:?} must be strictly increasing within 1..={}",
                self.n_blocks
            )));
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(GldError::Config("channels must be divisible by heads".into()));
        }
        if !self.patch_size.is_power_of_two() {
            return Err(GldError::Config("patch size must be a power of two".into()));
        }
        Ok(())
    }

    pub fn is_global(block: usize) -> bool {
        block.is_multiple_of(2)
    }
}

/// Pre-norm transformer block with plain softmax attention.
#[derive(Debug, Clone)]
pub struct Block {
    norm1: RmsNorm,
    qkv: Linear,
    proj: Linear,
    norm2: RmsNorm,
    mlp: SwiGlu,
    heads: usize,
}

impl Block {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        ps.scoped(name, |ps| {
            Ok(Self {
                norm1: RmsNorm::new(ps, "norm1", dim)?,
                qkv: Linear::new(ps, "qkv", dim, 3 * dim, true)?,
                proj: Linear::new(ps, "proj", dim, dim, true)?,
                norm2: RmsNorm::new(ps, "norm2", dim)?,
                mlp: SwiGlu::new(ps, "mlp", dim, dim * mlp_ratio)?,
                heads,
            })
        })
    }

    /// `x: [B, N, C]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(D::Minus1)?;
        let qkv = self.qkv.forward(&self.norm1.forward(x)?)?;
        let q = nn::split_heads(&qkv.narrow(D::Minus1, 0, c)?, self.heads)?;
        let k = nn::split_heads(&qkv.narrow(D::Minus1, c, c)?, self.heads)?;
        let v = nn::split_heads(&qkv.narrow(D::Minus1, 2 * c, c)?, self.heads)?;
        let a = nn::merge_heads(&nn::attention(&q, &k, &v)?)?;
        let x = (x + self.proj.forward(&a)?)?;
        let h = self.mlp.forward(&self.norm2.forward(&x)?)?;
        Ok((x + h)?)
    }
}

/// Dense per-pixel predictions and per-view poses.
#[derive(Debug, Clone)]
pub struct GeometryOutput {
    /// `[V, H, W]` camera-frame depth.
    pub depth: Tensor,
    /// `[V, H, W, 3]` unit camera-frame ray directions.
    pub rays: Tensor,
    /// Per-view world-to-camera pose in the frame of the last view.
    pub poses: Vec<RigidTransform>,
}

struct RawGeometry {
    /// `[B·V, H, W]`.
    log_depth: Tensor,
    /// `[B·V, H, W, 3]`, unnormalized.
    rays: Tensor,
    /// `[B, V, 9]`: 6D rotation then translation.
    pose: Tensor,
}

#[derive(Debug, Clone)]
struct FusionUnit {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl FusionUnit {
    fn new(ps: &mut ParamStore, name: &str, w: usize) -> Result<Self> {
        ps.scoped(name, |ps| {
            Ok(Self {
                conv1: Conv2d::new(ps, "conv1", w, w, 3)?,
                conv2: Conv2d::new(ps, "conv2", w, w, 3)?,
            })
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv2.forward(&self.conv1.forward(&x.relu()?)?.relu()?)?;
        Ok((x + h)?)
    }
}

pub struct GeoEncoder {
    pub config: GeoEncoderConfig,
    pub seed: u64,
    pub store: ParamStore,
    embed: Linear,
    pos: Tensor,
    blocks: Vec<Block>,
    level_proj: Vec<Linear>,
    fuse: Vec<FusionUnit>,
    up: Vec<Conv2d>,
    out: Conv2d,
    pose_mlp: (Linear, Linear),
    grid: (usize, usize),
    image: (usize, usize),
}

impl GeoEncoder {
    pub fn new(config: GeoEncoderConfig, image_h: usize, image_w: usize, seed: u64) -> Result<Self> {
        Self::with_dtype(config, image_h, image_w, seed, DType::F32)
    }

    pub fn with_dtype(
        config: GeoEncoderConfig,
        image_h: usize,
        image_w: usize,
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        config.validate()?;
        let p = config.patch_size;
        if !image_h.is_multiple_of(p) || !image_w.is_multiple_of(p) {
            return Err(GldError::InvalidArgument(format!(
                "image size {image_h}x{image_w} is not divisible by patch size {p}"
            )));
        }
        let grid = (image_h / p, image_w / p);
        let c = config.channels;
        let hw = config.head_width;
        let mut ps = ParamStore::new(seed, dtype);
        let embed = Linear::new(&mut ps, "embed", p * p * 3, c, true)?;
        let blocks = (1..=config.n_blocks)
            .map(|b| Block::new(&mut ps, &format!("block{b:02}"), c, config.heads, config.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let level_proj = (0..NUM_LEVELS)
            .map(|l| Linear::new(&mut ps, &format!("head.level{l}"), c, hw, true))
            .collect::<Result<Vec<_>>>()?;
        let fuse = (0..NUM_LEVELS)
            .map(|l| FusionUnit::new(&mut ps, &format!("head.fuse{l}"), hw))
            .collect::<Result<Vec<_>>>()?;
        let up = (0..p.trailing_zeros())
            .map(|i| Conv2d::new(&mut ps, &format!("head.up{i}"), hw, hw, 3))
            .collect::<Result<Vec<_>>>()?;
        let out = Conv2d::new(&mut ps, "head.out", hw, 4, 3)?;
        let pose_mlp = (
            Linear::new(&mut ps, "pose.fc1", 2 * c, 2 * c, true)?,
            Linear::new(&mut ps, "pose.fc2", 2 * c, 9, true)?,
        );
        let pos = nn::sincos_2d(grid.0, grid.1, c, dtype)?;
        Ok(Self {
            config,
            seed,
            store: ps,
            embed,
            pos,
            blocks,
            level_proj,
            fuse,
            up,
            out,
            pose_mlp,
            grid,
            image: (image_h, image_w),
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.image
    }

    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// `[B, V, H, W, 3] → [B, V, T, p·p·3]`.
    pub fn patchify(&self, images: &Tensor) -> Result<Tensor> {
        let (b, v, h, w, _) = images.dims5()?;
        if (h, w) != self.image {
            return Err(GldError::InvalidArgument(format!(
                "encoder expects {}x{} images, got {h}x{w}",
                self.image.0, self.image.1
            )));
        }
        let p = self.config.patch_size;
        let (gh, gw) = self.grid;
        Ok(images
            .reshape((b * v, gh, p, gw, p, 3))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b, v, gh * gw, p * p * 3))?)
    }

    fn run_block(&self, idx: usize, x: &Tensor) -> Result<Tensor> {
        let (b, v, t, c) = x.dims4()?;
        let block = &self.blocks[idx - 1];
        if GeoEncoderConfig::is_global(idx) {
            Ok(block.forward(&x.reshape((b, v * t, c))?)?.reshape((b, v, t, c))?)
        } else {
            Ok(block.forward(&x.reshape((b * v, t, c))?)?.reshape((b, v, t, c))?)
        }
    }

    /// All four tap outputs for `[B, V, H, W, 3]` images, each `[B, V, T, C]`.
    pub fn forward_levels(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let x = self.patchify(images)?;
        let x = ((x - 0.5)? * 2.0)?;
        let mut x = self.embed.forward(&x)?.broadcast_add(&self.pos)?;
        let mut taps = Vec::with_capacity(NUM_LEVELS);
        for idx in 1..=self.config.level_taps[NUM_LEVELS - 1] {
            x = self.run_block(idx, &x)?;
            if self.config.level_taps.contains(&idx) {
                taps.push(x.clone());
            }
        }
        Ok(taps)
    }

    /// Continues the frozen blocks from level `k`'s tap output, returning the
    /// deeper levels `k+1..=3` in order (empty for `k = 3`).
    pub fn propagate_tensor(&self, f_k: &Tensor, k: usize) -> Result<Vec<Tensor>> {
        if k >= NUM_LEVELS {
            return Err(GldError::InvalidArgument(format!("level {k} out of range")));
        }
        let taps = &self.config.level_taps;
        let mut x = f_k.clone();
        let mut out = Vec::new();
        for idx in taps[k] + 1..=taps[NUM_LEVELS - 1] {
            x = self.run_block(idx, &x)?;
            if taps.contains(&idx) {
                out.push(x.clone());
            }
        }
        Ok(out)
    }

    /// Encodes one set of `V` views.
    pub fn encode_multiview(&self, images: &Tensor) -> Result<LevelFeatures> {
        let (v, h, w, c3) = images.dims4()?;
        let levels = self
            .forward_levels(&images.reshape((1, v, h, w, c3))?)?
            .into_iter()
            .map(|l| l.squeeze(0))
            .collect::<candle_core::Result<Vec<_>>>()?;
        LevelFeatures::new(levels, self.grid)
    }

    pub fn encode_sequence(&self, seq: &MultiViewSequence, frames: &[usize]) -> Result<LevelFeatures> {
        self.encode_multiview(&images_tensor(seq, frames, self.dtype())?)
    }

    /// Deeper levels from a `[V, T, C]` level-`k` feature tensor.
    pub fn propagate(&self, f_k: &Tensor, k: usize) -> Result<Vec<Tensor>> {
        Ok(self
            .propagate_tensor(&f_k.unsqueeze(0)?, k)?
            .into_iter()
            .map(|t| t.squeeze(0))
            .collect::<candle_core::Result<Vec<_>>>()?)
    }

    fn raw_geometry(&self, levels: &[Tensor]) -> Result<RawGeometry> {
        if levels.len() != NUM_LEVELS {
            return Err(GldError::InvalidArgument(format!(
                "geometry decoding needs all {NUM_LEVELS} levels, got {}",
                levels.len()
            )));
        }
        let (b, v, t, c) = levels[0].dims4()?;
        let (gh, gw) = self.grid;
        let hw = self.config.head_width;
        let maps: Vec<Tensor> = levels
            .iter()
            .zip(&self.level_proj)
            .map(|(l, proj)| -> Result<Tensor> {
                Ok(proj
                    .forward(&l.reshape((b * v, t, c))?)?
                    .reshape((b * v, gh, gw, hw))?
                    .permute((0, 3, 1, 2))?
                    .contiguous()?)
            })
            .collect::<Result<_>>()?;
        let mut f = self.fuse[NUM_LEVELS - 1].forward(&maps[NUM_LEVELS - 1])?;
        for l in (0..NUM_LEVELS - 1).rev() {
            f = self.fuse[l].forward(&(f + &maps[l])?)?;
        }
        let (mut h, mut w) = (gh, gw);
        for conv in &self.up {
            h *= 2;
            w *= 2;
            f = conv.forward(&f.upsample_nearest2d(h, w)?)?.relu()?;
        }
        let y = self.out.forward(&f)?.permute((0, 2, 3, 1))?.contiguous()?;
        let log_depth = y.narrow(D::Minus1, 0, 1)?.squeeze(D::Minus1)?;
        let rays = y.narrow(D::Minus1, 1, 3)?;

        let pooled = levels[NUM_LEVELS - 1].mean(2)?;
        let reference = pooled.narrow(1, v - 1, 1)?.broadcast_as((b, v, c))?;
        let z = Tensor::cat(&[&pooled, &reference], D::Minus1)?;
        let pose = self.pose_mlp.1.forward(&self.pose_mlp.0.forward(&z)?.silu()?)?;
        Ok(RawGeometry { log_depth, rays, pose })
    }

    /// Depth, rays and poses from unnormalized features of one view set.
    pub fn decode_geometry(&self, features: &LevelFeatures) -> Result<GeometryOutput> {
        if features.normalized {
            return Err(GldError::InvalidArgument(
                "geometry decoding needs unnormalized features".into(),
            ));
        }
        let levels: Vec<Tensor> = features
            .levels
            .iter()
            .map(|l| l.unsqueeze(0))
            .collect::<candle_core::Result<_>>()?;
        let raw = self.raw_geometry(&levels)?;
        let depth = raw.log_depth.exp()?;
        let norm = raw.rays.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
        let rays = raw.rays.broadcast_div(&(norm + 1e-8)?)?;
        let pose: Vec<Vec<f64>> = raw
            .pose
            .squeeze(0)?
            .to_dtype(DType::F64)?
            .to_vec2()?;
        let poses = pose
            .iter()
            .map(|p| {
                let r = rotation_from_6d(&Vec3::new(p[0], p[1], p[2]), &Vec3::new(p[3], p[4], p[5]));
                RigidTransform::new(r, Vec3::new(p[6], p[7], p[8]))
            })
            .collect();
        Ok(GeometryOutput { depth, rays, poses })
    }

    /// Supervised loss on a batch (see [`GeoBatch`]).
    pub fn loss(&self, batch: &GeoBatch) -> Result<GeoLoss> {
        let levels = self.forward_levels(&batch.images)?;
        let raw = self.raw_geometry(&levels)?;
        let mask = &batch.mask;
        let count = mask.sum_all()?;
        let d = ((&raw.log_depth - batch.depth.clamp(1e-6, f64::MAX)?.log()?)? * mask)?;
        let mean_d = (d.sum_all()? / &count)?;
        let mean_d2 = (d.sqr()?.sum_all()? / &count)?;
        let depth = (mean_d2 - (mean_d.sqr()? * 0.5)?)?;

        let norm = raw.rays.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
        let cos = (raw.rays.broadcast_div(&(norm + 1e-6)?)? * &batch.rays)?.sum(D::Minus1)?;
        let ray = (1.0 - cos)?.mean_all()?;

        let r = rotation_6d_tensor(&raw.pose.narrow(D::Minus1, 0, 6)?)?;
        let t = raw.pose.narrow(D::Minus1, 6, 3)?;
        let rot = (r - &batch.rotations)?.sqr()?.sum(D::Minus1)?.sum(D::Minus1)?.mean_all()?;
        let trans = (t - &batch.translations)?.sqr()?.sum(D::Minus1)?.mean_all()?;
        let total = (((&depth + (&ray * 0.1)?)? + &rot)? + &trans)?;
        Ok(GeoLoss {
            total,
            depth,
            ray,
            rotation: rot,
            translation: trans,
        })
    }

    pub fn checkpoint_metadata(&self) -> Result<BTreeMap<String, String>> {
        let mut m = BTreeMap::new();
        m.insert("kind".into(), CHECKPOINT_KIND.into());
        m.insert("config".into(), serde_json::to_string(&self.config).expect("config serializes"));
        m.insert("seed".into(), self.seed.to_string());
        m.insert("image_size".into(), format!("{}x{}", self.image.0, self.image.1));
        Ok(m)
    }

    pub fn save(&self, path: &Path, extra: BTreeMap<String, String>) -> Result<String> {
        let mut meta = self.checkpoint_metadata()?;
        meta.extend(extra);
        save_checkpoint(path, &self.store, meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        ck.expect_kind(CHECKPOINT_KIND, path)?;
        let config: GeoEncoderConfig = serde_json::from_str(ck.get_meta("config")?)
            .map_err(|e| GldError::format(path, e))?;
        let seed: u64 = ck
            .get_meta("seed")?
            .parse()
            .map_err(|e| GldError::format(path, e))?;
        let (h, w) = parse_size(ck.get_meta("image_size")?).ok_or_else(|| GldError::format(path, "bad image_size"))?;
        let enc = Self::new(config, h, w, seed)?;
        enc.store.load_from(&ck.tensors)?;
        Ok(enc)
    }

    pub fn fingerprint(&self) -> Result<String> {
        self.store.checksum()
    }
}

pub fn parse_size(s: &str) -> Option<(usize, usize)> {
    let (h, w) = s.split_once('x')?;
    Some((h.parse().ok()?, w.parse().ok()?))
}

/// Differentiable 6D → rotation: `[..., 6] → [..., 3, 3]` with the
/// orthonormalized vectors as columns.
pub fn rotation_6d_tensor(x: &Tensor) -> Result<Tensor> {
    let a = x.narrow(D::Minus1, 0, 3)?;
    let b = x.narrow(D::Minus1, 3, 3)?;
    let unit = |v: &Tensor| -> Result<Tensor> {
        let n = (v.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
        Ok(v.broadcast_div(&n)?)
    };
    let c1 = unit(&a)?;
    let proj = (&b * &c1)?.sum_keepdim(D::Minus1)?;
    let c2 = unit(&(b - c1.broadcast_mul(&proj)?)?)?;
    let comp = |t: &Tensor, i: usize| t.narrow(D::Minus1, i, 1);
    let (x1, y1, z1) = (comp(&c1, 0)?, comp(&c1, 1)?, comp(&c1, 2)?);
    let (x2, y2, z2) = (comp(&c2, 0)?, comp(&c2, 1)?, comp(&c2, 2)?);
    let c3 = Tensor::cat(
        &[
            &((&y1 * &z2)? - (&z1 * &y2)?)?,
            &((&z1 * &x2)? - (&x1 * &z2)?)?,
            &((&x1 * &y2)? - (&y1 * &x2)?)?,
        ],
        D::Minus1,
    )?;
    Ok(Tensor::stack(&[&c1, &c2, &c3], D::Minus1)?)
}

#[derive(Debug, Clone)]
pub struct GeoLoss {
    pub total: Tensor,
    pub depth: Tensor,
    pub ray: Tensor,
    pub rotation: Tensor,
    pub translation: Tensor,
}

/// Training targets for `B` view sets of `V` views.
#[derive(Debug, Clone)]
pub struct GeoBatch {
    /// `[B, V, H, W, 3]`.
    pub images: Tensor,
    /// `[B·V, H, W]`; background pixels hold an arbitrary positive value.
    pub depth: Tensor,
    /// `[B·V, H, W]`, 1 on valid depth.
    pub mask: Tensor,
    /// `[B·V, H, W, 3]` unit camera-frame rays.
    pub rays: Tensor,
    /// `[B, V, 3, 3]` normalized world-to-camera rotations.
    pub rotations: Tensor,
    /// `[B, V, 3]` normalized translations.
    pub translations: Tensor,
}

/// `[V, H, W, 3]` images of the selected frames.
pub fn images_tensor(seq: &MultiViewSequence, frames: &[usize], dtype: DType) -> Result<Tensor> {
    let (h, w) = seq.image_size();
    let mut data = Vec::with_capacity(frames.len() * h * w * 3);
    for &f in frames {
        let v = seq
            .views
            .get(f)
            .ok_or_else(|| GldError::InvalidArgument(format!("frame {f} out of range")))?;
        data.extend_from_slice(&v.image.data);
    }
    Ok(Tensor::from_vec(data, (frames.len(), h, w, 3), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn make_geo_batch(items: &[(&MultiViewSequence, Vec<usize>)], dtype: DType) -> Result<GeoBatch> {
    let dev = Device::Cpu;
    let b = items.len();
    let v = items[0].1.len();
    let (h, w) = items[0].0.image_size();
    let mut images = Vec::with_capacity(b);
    let (mut depth, mut mask, mut rays, mut rots, mut trans) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (seq, frames) in items {
        images.push(images_tensor(seq, frames, dtype)?);
        let cams: Vec<CameraPose> = frames.iter().map(|&f| seq.views[f].camera).collect();
        for &f in frames {
            let view = &seq.views[f];
            for (i, &d) in view.depth.data.iter().enumerate() {
                let ok = gld_core::raster::DepthMap::is_valid_value(d);
                depth.push(if ok { d as f64 } else { 1.0 });
                mask.push(if ok { 1.0 } else { 0.0 });
                let (r, c) = (i / w, i % w);
                let kinv = view.camera.intrinsics_inverse()?;
                let ray = (kinv * Vec3::new(c as f64 + 0.5, r as f64 + 0.5, 1.0)).normalize();
                rays.extend_from_slice(ray.as_slice());
            }
        }
        for p in normalize_poses(&cams) {
            let r: Mat3 = p.rotation;
            for i in 0..3 {
                for j in 0..3 {
                    rots.push(r[(i, j)]);
                }
            }
            trans.extend_from_slice(p.translation.as_slice());
        }
    }
    let t = |data: Vec<f64>, shape: &[usize]| -> Result<Tensor> {
        Ok(Tensor::from_vec(data, shape, &dev)?.to_dtype(dtype)?)
    };
    Ok(GeoBatch {
        images: Tensor::stack(&images, 0)?,
        depth: t(depth, &[b * v, h, w])?,
        mask: t(mask, &[b * v, h, w])?,
        rays: t(rays, &[b * v, h, w, 3])?,
        rotations: t(rots, &[b, v, 3, 3])?,
        translations: t(trans, &[b, v, 3])?,
    })
}

/// Number of views the encoder sees per training sample.
pub const TRAIN_VIEWS: usize = 4;

/// Trains the encoder and geometry heads jointly on depth, rays and relative
/// poses. `steps = 0` leaves the initialization untouched.
pub fn train_geoenc(
    data: &[MultiViewSequence],
    config: GeoEncoderConfig,
    train: &TrainConfig,
) -> Result<(GeoEncoder, TrainLog)> {
    let first = data
        .first()
        .ok_or_else(|| GldError::InvalidArgument("empty dataset".into()))?;
    let (h, w) = first.image_size();
    let enc = GeoEncoder::new(config, h, w, train.seed)?;
    let mut log = TrainLog::default();
    if train.steps == 0 {
        return Ok((enc, log));
    }
    let vars = enc.store.vars();
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
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x6e6f_6465);
    let views = TRAIN_VIEWS.min(first.len());
    for step in 0..train.steps {
        opt.set_learning_rate(train.lr_at(step));
        let items: Vec<(&MultiViewSequence, Vec<usize>)> = (0..train.batch)
            .map(|_| {
                let seq = &data[rng.random_range(0..data.len())];
                let split = gld_core::views::sample_views(seq.len(), views, 1, rng.random(), 2)?;
                Ok((seq, split.frames))
            })
            .collect::<Result<_>>()?;
        let batch = make_geo_batch(&items, enc.dtype())?;
        let loss = enc.loss(&batch)?;
        let value = nn::scalar(&loss.total)?;
        if !value.is_finite() {
            return Err(GldError::NonFiniteLoss {
                step,
                details: format!(
                    "depth {:.4} ray {:.4} rot {:.4} trans {:.4}",
                    nn::scalar(&loss.depth)?,
                    nn::scalar(&loss.ray)?,
                    nn::scalar(&loss.rotation)?,
                    nn::scalar(&loss.translation)?
                ),
            });
        }
        clipped_step(&mut opt, &vars, &loss.total, train.grad_clip)?;
        log.record(step, value);
    }
    Ok((enc, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use gld_core::SceneSpec;

    fn tiny() -> GeoEncoderConfig {
        GeoEncoderConfig {
            channels: 16,
            heads: 2,
            head_width: 8,
            ..GeoEncoderConfig::toy()
        }
    }

    fn seq() -> MultiViewSequence {
        gld_core::scene::generate_scene(&SceneSpec {
            image_width: 16,
            image_height: 16,
            n_views: 4,
            ..SceneSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn level_shapes() {
        let s = seq();
        let enc = GeoEncoder::new(tiny(), 16, 16, 0).unwrap();
        let f = enc.encode_sequence(&s, &[0, 1, 2, 3]).unwrap();
        assert_eq!(f.levels.len(), 4);
        for l in &f.levels {
            assert_eq!(l.dims(), &[4, 16, 16]);
        }
        assert!(GeoEncoder::new(tiny(), 18, 16, 0).is_err());
    }

    #[test]
    fn propagation_matches_full_pass() {
        let s = seq();
        let enc = GeoEncoder::new(tiny(), 16, 16, 1).unwrap();
        let f = enc.encode_sequence(&s, &[0, 1, 2, 3]).unwrap();
        let deeper = enc.propagate(&f.levels[1], 1).unwrap();
        assert_eq!(deeper.len(), 2);
        for (a, b) in deeper.iter().zip(&f.levels[2..]) {
            let a: Vec<f32> = a.flatten_all().unwrap().to_vec1().unwrap();
            let b: Vec<f32> = b.flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(a, b);
        }
        assert!(enc.propagate(&f.levels[3], 3).unwrap().is_empty());
    }

    #[test]
    fn rotation_6d_matches_core() {
        let a = [0.3, -1.2, 0.5, 0.9, 0.4, -0.7];
        let t = Tensor::new(&a, &Device::Cpu).unwrap();
        let r: Vec<Vec<f64>> = rotation_6d_tensor(&t).unwrap().to_vec2().unwrap();
        let c = rotation_from_6d(&Vec3::new(a[0], a[1], a[2]), &Vec3::new(a[3], a[4], a[5]));
        for i in 0..3 {
            for j in 0..3 {
                assert!((r[i][j] - c[(i, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn geometry_outputs_are_valid() {
        let s = seq();
        let enc = GeoEncoder::new(tiny(), 16, 16, 2).unwrap();
        let f = enc.encode_sequence(&s, &[0, 1, 2]).unwrap();
        let g = enc.decode_geometry(&f).unwrap();
        assert_eq!(g.depth.dims(), &[3, 16, 16]);
        let d: Vec<f32> = g.depth.flatten_all().unwrap().to_vec1().unwrap();
        assert!(d.iter().all(|&x| x > 0.0));
        for p in &g.poses {
            assert!(p.is_rotation_valid());
        }
        let mut partial = f.clone();
        partial.levels.pop();
        assert!(enc.decode_geometry(&partial).is_err());
    }

    #[test]
    fn loss_is_finite_and_zero_steps_keep_init() {
        let s = seq();
        let train = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let (enc, _) = train_geoenc(std::slice::from_ref(&s), tiny(), &train).unwrap();
        let fresh = GeoEncoder::new(tiny(), 16, 16, train.seed).unwrap();
        assert_eq!(enc.fingerprint().unwrap(), fresh.fingerprint().unwrap());
        let batch = make_geo_batch(&[(&s, vec![0, 1, 2, 3])], DType::F32).unwrap();
        let l = nn::scalar(&enc.loss(&batch).unwrap().total).unwrap();
        assert!(l.is_finite() && l >= 0.0);
    }
}
