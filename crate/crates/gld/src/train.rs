//! Shared optimization utilities: schedule, global-norm clipping, EMA and a
//! loss log.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Final learning rate of the cosine schedule; equal to `lr` for a
    /// constant rate.
    pub lr_min: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// EMA decay; 0 disables averaging.
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch: 2,
            lr: 1e-3,
            lr_min: 1e-3,
            warmup: 0,
            weight_decay: 0.0,
            grad_clip: 1.0,
            ema_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Linear warmup then cosine decay from `lr` to `lr_min`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1);
        let p = ((step - self.warmup) as f64 / span as f64).min(1.0);
        self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// Global L2 norm over the gradients of `vars` (missing gradients count as 0).
pub fn grad_norm(grads: &GradStore, vars: &[Var]) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += crate::nn::scalar(&g.sqr()?.sum_all()?)?;
        }
    }
    Ok(sq.sqrt())
}

/// Backpropagates `loss`, rescales gradients so their global norm is at most
/// `max_norm` (when positive), and applies one optimizer step. Returns the
/// pre-clipping norm.
pub fn clipped_step(opt: &mut AdamW, vars: &[Var], loss: &Tensor, max_norm: f64) -> Result<f64> {
    let mut grads = loss.backward()?;
    let norm = grad_norm(&grads, vars)?;
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / (norm + 1e-12);
        for v in vars {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), (g * scale)?);
            }
        }
    }
    opt.step(&grads)?;
    Ok(norm)
}

/// Exponential moving average of parameters. The effective decay ramps up as
/// `min(decay, (1 + n) / (10 + n))` so short runs are not dominated by the
/// initialization.
pub struct Ema {
    decay: f64,
    updates: usize,
    shadow: Vec<Tensor>,
}

impl Ema {
    pub fn new(vars: &[Var], decay: f64) -> Result<Self> {
        let shadow = vars
            .iter()
            .map(|v| v.as_tensor().copy())
            .collect::<candle_core::Result<_>>()?;
        Ok(Self {
            decay,
            updates: 0,
            shadow,
        })
    }

    pub fn update(&mut self, vars: &[Var]) -> Result<()> {
        self.updates += 1;
        let n = self.updates as f64;
        let d = self.decay.min((1.0 + n) / (10.0 + n));
        for (s, v) in self.shadow.iter_mut().zip(vars) {
            *s = ((&*s * d)? + (v.as_tensor().detach() * (1.0 - d))?)?;
        }
        Ok(())
    }

    /// Writes the averaged values into `vars`.
    pub fn apply(&self, vars: &[Var]) -> Result<()> {
        for (s, v) in self.shadow.iter().zip(vars) {
            v.set(s)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<(usize, f64)>,
}

impl TrainLog {
    pub fn record(&mut self, step: usize, loss: f64) {
        self.losses.push((step, loss));
    }

    /// Mean of the last `n` recorded losses.
    pub fn tail_mean(&self, n: usize) -> Option<f64> {
        let k = n.min(self.losses.len());
        if k == 0 {
            return None;
        }
        Some(self.losses[self.losses.len() - k..].iter().map(|l| l.1).sum::<f64>() / k as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (step, l) in &self.losses {
            s.push_str(&format!("{step},{l:.6}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use candle_nn::ParamsAdamW;

    #[test]
    fn cosine_schedule_endpoints() {
        let c = TrainConfig {
            steps: 100,
            lr: 2e-4,
            lr_min: 2e-5,
            ..TrainConfig::default()
        };
        assert!((c.lr_at(0) - 2e-4).abs() < 1e-12);
        assert!((c.lr_at(100) - 2e-5).abs() < 1e-12);
        assert!(c.lr_at(30) > c.lr_at(60));
    }

    #[test]
    fn clipping_bounds_the_update() {
        let v = Var::from_tensor(&Tensor::zeros(3, DType::F64, &Device::Cpu).unwrap()).unwrap();
        let target = Tensor::new(&[100.0f64, -200.0, 50.0], &Device::Cpu).unwrap();
        let loss = (v.as_tensor() - &target).unwrap().sqr().unwrap().sum_all().unwrap();
        let p = ParamsAdamW {
            lr: 0.1,
            ..Default::default()
        };
        let mut opt = AdamW::new(vec![v.clone()], p).unwrap();
        let norm = clipped_step(&mut opt, std::slice::from_ref(&v), &loss, 1.0).unwrap();
        assert!(norm > 1.0);
        let after: Vec<f64> = v.as_tensor().to_vec1().unwrap();
        assert!(after.iter().all(|x| x.abs() <= 0.1 + 1e-9));
    }

    #[test]
    fn ema_tracks_parameters() {
        let v = Var::from_tensor(&Tensor::zeros(2, DType::F32, &Device::Cpu).unwrap()).unwrap();
        let mut ema = Ema::new(std::slice::from_ref(&v), 0.5).unwrap();
        v.set(&Tensor::ones(2, DType::F32, &Device::Cpu).unwrap()).unwrap();
        ema.update(std::slice::from_ref(&v)).unwrap();
        ema.apply(std::slice::from_ref(&v)).unwrap();
        let x: Vec<f32> = v.as_tensor().to_vec1().unwrap();
        // First update: effective decay min(0.5, 2/11).
        assert!((x[0] - 9.0 / 11.0).abs() < 1e-6);
    }
}
