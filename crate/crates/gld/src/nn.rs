//! Small neural-network building blocks over candle tensors.
//!
//! Only primitive tensor ops are used so everything is differentiable by
//! candle's autograd in both `f32` and `f64`.

use candle_core::{DType, Tensor, D};

use crate::error::Result;
use crate::params::ParamStore;

pub const NORM_EPS: f64 = 1e-6;

/// Dense layer `x W + b` applied over the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    /// `[in, out]`.
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let std = 1.0 / (d_in as f64).sqrt();
        ps.scoped(name, |ps| {
            let weight = ps.randn("weight", &[d_in, d_out], std)?;
            let bias = if bias { Some(ps.zeros("bias", &[d_out])?) } else { None };
            Ok(Self { weight, bias })
        })
    }

    /// Zero-initialized layer.
    pub fn zeros(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        ps.scoped(name, |ps| {
            Ok(Self {
                weight: ps.zeros("weight", &[d_in, d_out])?,
                bias: Some(ps.zeros("bias", &[d_out])?),
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().unwrap_or(&0);
        let rows = x.elem_count() / d_in.max(1);
        let y = x.reshape((rows, d_in))?.matmul(&self.weight)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(1)?;
        Ok(y.reshape(out_dims)?)
    }
}

/// Root-mean-square normalization over the last dimension, without gain.
pub fn rms_normalize(x: &Tensor) -> Result<Tensor> {
    let ms = x.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(x.broadcast_div(&(ms + NORM_EPS)?.sqrt()?)?)
}

#[derive(Debug, Clone)]
pub struct RmsNorm {
    pub weight: Tensor,
}

impl RmsNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        ps.scoped(name, |ps| Ok(Self { weight: ps.ones("weight", &[dim])? }))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(rms_normalize(x)?.broadcast_mul(&self.weight)?)
    }
}

/// Gated-linear feed-forward: `(silu(x W1) ⊙ x W3) W2`.
#[derive(Debug, Clone)]
pub struct SwiGlu {
    pub w1: Linear,
    pub w3: Linear,
    pub w2: Linear,
}

impl SwiGlu {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        ps.scoped(name, |ps| {
            Ok(Self {
                w1: Linear::new(ps, "w1", dim, hidden, false)?,
                w3: Linear::new(ps, "w3", dim, hidden, false)?,
                w2: Linear::new(ps, "w2", hidden, dim, false)?,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let a = self.w1.forward(x)?.silu()?;
        let b = self.w3.forward(x)?;
        self.w2.forward(&(a * b)?)
    }
}

/// `[B, N, H·D] → [B, H, N, D]`.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    Ok(x.reshape((b, n, heads, c / heads))?.transpose(1, 2)?.contiguous()?)
}

/// `[B, H, N, D] → [B, N, H·D]`.
pub fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, h, n, d) = x.dims4()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, n, h * d))?)
}

/// Scaled dot-product attention weights `softmax(q kᵀ / √D)` for
/// `[B, H, N, D]` inputs.
pub fn attention_weights(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let d = q.dim(D::Minus1)?;
    let logits = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (d as f64).sqrt()))?;
    Ok(candle_nn::ops::softmax(&logits, D::Minus1)?)
}

pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    Ok(attention_weights(q, k)?.matmul(v)?)
}

/// 3×3 (or `k×k`) convolution with "same" padding on `[B, C, H, W]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        let std = 1.0 / ((c_in * k * k) as f64).sqrt();
        ps.scoped(name, |ps| {
            Ok(Self {
                weight: ps.randn("weight", &[c_out, c_in, k, k], std)?,
                bias: ps.zeros("bias", &[c_out])?,
                padding: k / 2,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, 1, 1, 1)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Logistic function built from primitive ops.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Fixed 2D sinusoidal position table `[grid_h·grid_w, dim]` (row-major
/// tokens); half the channels encode the column, half the row.
pub fn sincos_2d(grid_h: usize, grid_w: usize, dim: usize, dtype: DType) -> Result<Tensor> {
    let quarter = dim / 4;
    let mut data = vec![0.0f64; grid_h * grid_w * dim];
    for r in 0..grid_h {
        for c in 0..grid_w {
            let row = &mut data[(r * grid_w + c) * dim..(r * grid_w + c + 1) * dim];
            for k in 0..quarter {
                let f = 1.0 / 100f64.powf(k as f64 / quarter.max(1) as f64);
                row[k] = (c as f64 * f).sin();
                row[quarter + k] = (c as f64 * f).cos();
                row[2 * quarter + k] = (r as f64 * f).sin();
                row[3 * quarter + k] = (r as f64 * f).cos();
            }
        }
    }
    Ok(Tensor::from_vec(data, (grid_h * grid_w, dim), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Sinusoidal embedding of scalar times `t ∈ [0, 1]`, shape `[B, dim]`.
pub fn timestep_embedding(t: &[f64], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = vec![0.0f64; t.len() * dim];
    for (i, &ti) in t.iter().enumerate() {
        for k in 0..half {
            let f = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            let a = ti * 1000.0 * f;
            data[i * dim + k] = a.cos();
            data[i * dim + half + k] = a.sin();
        }
    }
    Ok(Tensor::from_vec(data, (t.len(), dim), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Scalar loss value as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn linear_shapes_and_zero_init() {
        let mut ps = ParamStore::new(0, DType::F32);
        let l = Linear::new(&mut ps, "l", 5, 3, true).unwrap();
        let x = Tensor::ones((2, 4, 5), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(l.forward(&x).unwrap().dims(), &[2, 4, 3]);
        let z = Linear::zeros(&mut ps, "z", 5, 3).unwrap();
        let y: Vec<f32> = z.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let q = Tensor::arange(0f32, 24., &Device::Cpu).unwrap().reshape((1, 2, 3, 4)).unwrap();
        let w = attention_weights(&(q.clone() * 0.1).unwrap(), &q).unwrap();
        let s: Vec<f32> = w.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-5));
    }

    #[test]
    fn rms_norm_unit_scale() {
        let x = Tensor::new(&[[3f32, 4.0]], &Device::Cpu).unwrap();
        let y: Vec<f32> = rms_normalize(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let ms = (y[0] * y[0] + y[1] * y[1]) / 2.0;
        assert!((ms - 1.0).abs() < 1e-4);
    }

    #[test]
    fn sigmoid_range() {
        let x = Tensor::new(&[-50f32, 0.0, 50.0], &Device::Cpu).unwrap();
        let y: Vec<f32> = sigmoid(&x).unwrap().to_vec1().unwrap();
        assert!(y[0] >= 0.0 && y[0] < 1e-6 && y[1] == 0.5 && y[2] <= 1.0);
    }
}
