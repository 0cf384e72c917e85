//! Per-level, per-channel latent statistics.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, NUM_LEVELS};

pub const STD_EPSILON: f32 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub levels: Vec<ChannelStats>,
    pub corpus_id: String,
    pub epsilon: f32,
}

impl LatentStats {
    pub fn channels(&self) -> usize {
        self.levels.first().map_or(0, |l| l.mean.len())
    }

    fn level(&self, level: usize, data_len: usize) -> Result<&ChannelStats> {
        let stats = self.levels.get(level).ok_or_else(|| {
            Error::InvalidArgument(alloc::format!("no statistics for level {level}"))
        })?;
        let c = stats.mean.len();
        if c == 0 || !data_len.is_multiple_of(c) {
            return Err(Error::ShapeMismatch {
                expected: c,
                actual: data_len,
            });
        }
        Ok(stats)
    }

    /// `(x − mean) / std` per channel, in place; `data` is channel-last.
    pub fn normalize(&self, level: usize, data: &mut [f32]) -> Result<()> {
        let s = self.level(level, data.len())?;
        let c = s.mean.len();
        for row in data.chunks_exact_mut(c) {
            for ((x, m), sd) in row.iter_mut().zip(&s.mean).zip(&s.std) {
                *x = (*x - m) / sd;
            }
        }
        Ok(())
    }

    pub fn denormalize(&self, level: usize, data: &mut [f32]) -> Result<()> {
        let s = self.level(level, data.len())?;
        let c = s.mean.len();
        for row in data.chunks_exact_mut(c) {
            for ((x, m), sd) in row.iter_mut().zip(&s.mean).zip(&s.std) {
                *x = *x * sd + m;
            }
        }
        Ok(())
    }
}

/// Streaming mean/variance in `f64` (Welford), one accumulator per level.
#[derive(Debug, Clone)]
pub struct StatsAccumulator {
    channels: usize,
    count: [u64; NUM_LEVELS],
    mean: Vec<Vec<f64>>,
    m2: Vec<Vec<f64>>,
}

impl StatsAccumulator {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            count: [0; NUM_LEVELS],
            mean: vec![vec![0.0; channels]; NUM_LEVELS],
            m2: vec![vec![0.0; channels]; NUM_LEVELS],
        }
    }

    pub fn push(&mut self, level: usize, data: &[f32]) -> Result<()> {
        if level >= NUM_LEVELS {
            return Err(Error::InvalidArgument(alloc::format!("level {level} out of range")));
        }
        let c = self.channels;
        if !data.len().is_multiple_of(c) {
            return Err(Error::ShapeMismatch {
                expected: c,
                actual: data.len(),
            });
        }
        let mean = &mut self.mean[level];
        let m2 = &mut self.m2[level];
        for row in data.chunks_exact(c) {
            self.count[level] += 1;
            let n = self.count[level] as f64;
            for ((x, m), s) in row.iter().zip(mean.iter_mut()).zip(m2.iter_mut()) {
                let x = *x as f64;
                let d = x - *m;
                *m += d / n;
                *s += d * (x - *m);
            }
        }
        Ok(())
    }

    /// Population statistics with the std floored at `STD_EPSILON`.
    pub fn finish(&self, corpus_id: impl Into<String>) -> Result<LatentStats> {
        let mut levels = Vec::with_capacity(NUM_LEVELS);
        for l in 0..NUM_LEVELS {
            let n = self.count[l];
            if n == 0 {
                return Err(Error::InvalidArgument(alloc::format!(
                    "no samples accumulated for level {l}"
                )));
            }
            let mean = self.mean[l].iter().map(|&m| m as f32).collect();
            let std = self.m2[l]
                .iter()
                .map(|&s| (libm::sqrt(s / n as f64) as f32).max(STD_EPSILON))
                .collect();
            levels.push(ChannelStats { mean, std });
        }
        Ok(LatentStats {
            levels,
            corpus_id: corpus_id.into(),
            epsilon: STD_EPSILON,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats_for(data: &[f32], channels: usize) -> LatentStats {
        let mut acc = StatsAccumulator::new(channels);
        for l in 0..NUM_LEVELS {
            acc.push(l, data).unwrap();
        }
        acc.finish("test").unwrap()
    }

    #[test]
    fn constant_channel_hits_floor() {
        let data = [1.0f32, 5.0, 1.0, 6.0, 1.0, 7.0];
        let s = stats_for(&data, 2);
        assert_eq!(s.levels[0].std[0], STD_EPSILON);
        let mut x = data;
        s.normalize(0, &mut x).unwrap();
        assert!(x.iter().all(|v| v.is_finite()));
        assert_eq!(x[0], 0.0);
    }

    #[test]
    fn zero_tensor_normalizes_to_neg_mean_over_std() {
        let data = [1.0f32, 2.0, 3.0, 6.0];
        let s = stats_for(&data, 2);
        let mut z = [0.0f32; 2];
        s.normalize(1, &mut z).unwrap();
        for ch in 0..2 {
            let expect = -s.levels[1].mean[ch] / s.levels[1].std[ch];
            assert_eq!(z[ch], expect);
        }
    }

    #[test]
    fn mismatch_rejected() {
        let s = stats_for(&[1.0, 2.0, 3.0, 4.0], 2);
        let mut bad = [0.0f32; 3];
        assert!(s.normalize(0, &mut bad).is_err());
        assert!(s.normalize(7, &mut [0.0, 0.0]).is_err());
    }
}
