//! Projective relative-pose positional encoding for multi-view attention.
//!
//! Each head dimension `D` is split into a projective part (`D/2`, in blocks
//! of 4) and two rotary parts (`D/4` each) for token column and row. With
//! `P_i = K̃_i E_i` the per-view projective matrix (row-major), queries are
//! multiplied by `P_i`, keys and values by `P_j⁻ᵀ`, and attention outputs by
//! `P_iᵀ`, so every logit depends on camera geometry only through
//! `P_i P_j⁻¹` — the relative transform between the two views — and the
//! value aggregation is expressed in the query view's frame.

use candle_core::{DType, Device, Tensor, D};
use gld_core::camera::Mat4;

use crate::error::{GldError, Result};

pub const ROPE_BASE: f64 = 100.0;

/// Per-token encoding tables for a batch of `B` camera sets, each with `V`
/// views of `grid_h × grid_w` tokens. Token order is view-major.
#[derive(Debug, Clone)]
pub struct PropeTables {
    heads: usize,
    head_dim: usize,
    tokens: usize,
    /// `[B·H·N, 4, 4]` per-token matrices for queries, keys/values, outputs.
    mq: Tensor,
    mk: Tensor,
    mo: Tensor,
    cos_x: Tensor,
    sin_x: Tensor,
    cos_y: Tensor,
    sin_y: Tensor,
}

fn mat4(p: &[f64; 16]) -> Mat4 {
    Mat4::from_row_slice(p)
}

fn push_row_major(out: &mut Vec<f64>, m: &Mat4) {
    for r in 0..4 {
        for c in 0..4 {
            out.push(m[(r, c)]);
        }
    }
}

fn rope_table(pos: &[f64], dim: usize, dtype: DType) -> Result<(Tensor, Tensor)> {
    let half = dim / 2;
    let mut cos = Vec::with_capacity(pos.len() * dim);
    let mut sin = Vec::with_capacity(pos.len() * dim);
    for &p in pos {
        for _ in 0..2 {
            for k in 0..half {
                let f = ROPE_BASE.powf(-(k as f64) / half.max(1) as f64);
                cos.push((p * f).cos());
                sin.push((p * f).sin());
            }
        }
    }
    let n = pos.len();
    Ok((
        Tensor::from_vec(cos, (n, dim), &Device::Cpu)?.to_dtype(dtype)?,
        Tensor::from_vec(sin, (n, dim), &Device::Cpu)?.to_dtype(dtype)?,
    ))
}

fn rotate_half(x: &Tensor) -> Result<Tensor> {
    let d = x.dim(D::Minus1)?;
    let x1 = x.narrow(D::Minus1, 0, d / 2)?;
    let x2 = x.narrow(D::Minus1, d / 2, d / 2)?;
    Ok(Tensor::cat(&[&x2.neg()?, &x1], D::Minus1)?)
}

impl PropeTables {
    /// `projective[b][v]` is the row-major `P` of view `v` in sample `b`.
    pub fn new(
        projective: &[Vec<[f64; 16]>],
        views: usize,
        grid_h: usize,
        grid_w: usize,
        heads: usize,
        head_dim: usize,
        dtype: DType,
    ) -> Result<Self> {
        if !head_dim.is_multiple_of(8) {
            return Err(GldError::InvalidArgument(format!(
                "head dimension {head_dim} must be a multiple of 8 for the projective encoding"
            )));
        }
        let t = grid_h * grid_w;
        let n = views * t;
        let mut q = Vec::with_capacity(projective.len() * heads * n * 16);
        let mut k = Vec::with_capacity(q.capacity());
        let mut o = Vec::with_capacity(q.capacity());
        for cams in projective {
            if cams.len() != views {
                return Err(GldError::InvalidArgument(format!(
                    "{} camera matrices for {views} views",
                    cams.len()
                )));
            }
            let per_view: Vec<(Mat4, Mat4, Mat4)> = cams
                .iter()
                .map(|p| {
                    let m = mat4(p);
                    let inv = m.try_inverse().ok_or(gld_core::Error::SingularIntrinsics)?;
                    Ok((m, inv.transpose(), m.transpose()))
                })
                .collect::<Result<_>>()?;
            for _ in 0..heads {
                for v in 0..views {
                    let (mq, mk, mo) = &per_view[v];
                    for _ in 0..t {
                        push_row_major(&mut q, mq);
                        push_row_major(&mut k, mk);
                        push_row_major(&mut o, mo);
                    }
                }
            }
        }
        let rows = projective.len() * heads * n;
        let mk_t = |d: Vec<f64>| -> Result<Tensor> {
            Ok(Tensor::from_vec(d, (rows, 4, 4), &Device::Cpu)?.to_dtype(dtype)?)
        };
        let cols: Vec<f64> = (0..n).map(|i| ((i % t) % grid_w) as f64).collect();
        let rws: Vec<f64> = (0..n).map(|i| ((i % t) / grid_w) as f64).collect();
        let (cos_x, sin_x) = rope_table(&cols, head_dim / 4, dtype)?;
        let (cos_y, sin_y) = rope_table(&rws, head_dim / 4, dtype)?;
        Ok(Self {
            heads,
            head_dim,
            tokens: n,
            mq: mk_t(q)?,
            mk: mk_t(k)?,
            mo: mk_t(o)?,
            cos_x,
            sin_x,
            cos_y,
            sin_y,
        })
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
        let (b, h, n, d) = x.dims4()?;
        if h != self.heads || n != self.tokens || d != self.head_dim || b * h * n != self.mq.dim(0)? {
            return Err(GldError::InvalidArgument(format!(
                "attention input {:?} does not match encoding for {} heads × {} tokens × {}",
                x.dims(),
                self.heads,
                self.tokens,
                self.head_dim
            )));
        }
        Ok((b, h, n, d))
    }

    fn project(&self, x: &Tensor, m: &Tensor) -> Result<Tensor> {
        let (b, h, n, d) = self.check(x)?;
        let dp = d / 2;
        let p = x
            .narrow(D::Minus1, 0, dp)?
            .contiguous()?
            .reshape((b * h * n, dp / 4, 4))?
            .matmul(m)?
            .reshape((b, h, n, dp))?;
        let rest = x.narrow(D::Minus1, dp, d - dp)?;
        Ok(Tensor::cat(&[&p, &rest], D::Minus1)?)
    }

    fn rope(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, _, d) = self.check(x)?;
        let dp = d / 2;
        let dq = d / 4;
        let p = x.narrow(D::Minus1, 0, dp)?;
        let rx = x.narrow(D::Minus1, dp, dq)?;
        let ry = x.narrow(D::Minus1, dp + dq, dq)?;
        let rx = (rx.broadcast_mul(&self.cos_x)? + rotate_half(&rx)?.broadcast_mul(&self.sin_x)?)?;
        let ry = (ry.broadcast_mul(&self.cos_y)? + rotate_half(&ry)?.broadcast_mul(&self.sin_y)?)?;
        Ok(Tensor::cat(&[&p, &rx, &ry], D::Minus1)?)
    }

    pub fn queries(&self, q: &Tensor) -> Result<Tensor> {
        self.rope(&self.project(q, &self.mq)?)
    }

    pub fn keys(&self, k: &Tensor) -> Result<Tensor> {
        self.rope(&self.project(k, &self.mk)?)
    }

    pub fn values(&self, v: &Tensor) -> Result<Tensor> {
        self.project(v, &self.mk)
    }

    pub fn outputs(&self, o: &Tensor) -> Result<Tensor> {
        self.project(o, &self.mo)
    }
}

/// Full 3D attention over all `V×T` tokens with the projective encoding;
/// inputs and output are `[B, H, N, D]`.
pub fn prope_attention(q: &Tensor, k: &Tensor, v: &Tensor, tables: &PropeTables) -> Result<Tensor> {
    let q = tables.queries(q)?;
    let k = tables.keys(k)?;
    let v = tables.values(v)?;
    let o = crate::nn::attention(&q, &k, &v)?;
    tables.outputs(&o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use gld_core::camera::{intrinsics_from_fov, look_at, CameraPose, Sim3, Vec3};
    use gld_core::condition::projective_matrix;

    fn rand_tensor(seed: u64, shape: (usize, usize, usize, usize)) -> Tensor {
        let mut ps = crate::params::ParamStore::new(seed, DType::F64);
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        Tensor::from_vec(ps.normal_vec(n), shape, &Device::Cpu).unwrap()
    }

    fn cams(g: &Sim3) -> Vec<[f64; 16]> {
        [Vec3::new(2.0, 1.0, 0.5), Vec3::new(0.1, 1.2, 2.5), Vec3::new(-2.0, 0.4, 1.0)]
            .iter()
            .map(|e| {
                let ex = look_at(e, &Vec3::zeros(), &Vec3::y()).unwrap();
                let c = g.transform_camera(&CameraPose::new(ex, intrinsics_from_fov(16, 16, 60.0)));
                let m = projective_matrix(&c, 16, 16);
                let mut out = [0.0; 16];
                for r in 0..4 {
                    for k in 0..4 {
                        out[r * 4 + k] = m[(r, k)];
                    }
                }
                out
            })
            .collect()
    }

    fn rigid() -> Sim3 {
        Sim3 {
            scale: 1.0,
            rotation: gld_core::camera::axis_angle(&Vec3::new(0.3, 1.0, -0.2), 0.9),
            translation: Vec3::new(0.5, -1.0, 2.0),
        }
    }

    #[test]
    fn logits_invariant_to_global_rigid_motion() {
        let (h, d) = (2, 8);
        let q = rand_tensor(1, (1, h, 3 * 4, d));
        let k = rand_tensor(2, (1, h, 3 * 4, d));
        let logits = |g: &Sim3| {
            let t = PropeTables::new(&[cams(g)], 3, 2, 2, h, d, DType::F64).unwrap();
            let l = t
                .queries(&q)
                .unwrap()
                .matmul(&t.keys(&k).unwrap().t().unwrap())
                .unwrap();
            l.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        };
        let a = logits(&Sim3::identity());
        let b = logits(&rigid());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn single_view_is_plain_rotary_attention() {
        let (h, d) = (2, 16);
        let q = rand_tensor(3, (1, h, 4, d));
        let k = rand_tensor(4, (1, h, 4, d));
        let v = rand_tensor(5, (1, h, 4, d));
        let cam = cams(&rigid())[0];
        let t = PropeTables::new(&[vec![cam]], 1, 2, 2, h, d, DType::F64).unwrap();
        let ident = {
            let mut m = [0.0; 16];
            for i in 0..4 {
                m[i * 5] = 1.0;
            }
            m
        };
        let t0 = PropeTables::new(&[vec![ident]], 1, 2, 2, h, d, DType::F64).unwrap();
        let a = prope_attention(&q, &k, &v, &t).unwrap();
        let b = prope_attention(&q, &k, &v, &t0).unwrap();
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-9, "{diff}");
    }

    #[test]
    fn rejects_bad_head_dim_and_view_count() {
        assert!(PropeTables::new(&[cams(&Sim3::identity())], 3, 2, 2, 2, 12, DType::F64).is_err());
        assert!(PropeTables::new(&[cams(&Sim3::identity())], 2, 2, 2, 2, 8, DType::F64).is_err());
    }
}
