//! Feature-matching probe: percentage of correct keypoints between two
//! token feature grids under ground-truth pixel correspondences.

use alloc::vec::Vec;

use crate::camera::token_center;
use crate::scene::Correspondence;
use crate::{Error, Result};

/// A row-major `grid_h × grid_w × channels` token feature grid over an image
/// of `image_h × image_w` pixels.
#[derive(Debug, Clone, Copy)]
pub struct FeatureGrid<'a> {
    pub data: &'a [f32],
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub image_h: usize,
    pub image_w: usize,
}

impl FeatureGrid<'_> {
    fn check(&self) -> Result<()> {
        let n = self.grid_h * self.grid_w * self.channels;
        if n == 0 || self.data.len() != n {
            return Err(Error::ShapeMismatch {
                expected: n,
                actual: self.data.len(),
            });
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn token(&self, idx: usize) -> &[f32] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    /// Token containing continuous pixel coordinate `(u, v)`.
    pub fn token_at(&self, u: f64, v: f64) -> usize {
        let sx = self.image_w as f64 / self.grid_w as f64;
        let sy = self.image_h as f64 / self.grid_h as f64;
        let col = (libm::floor(u / sx).max(0.0) as usize).min(self.grid_w - 1);
        let row = (libm::floor(v / sy).max(0.0) as usize).min(self.grid_h - 1);
        row * self.grid_w + col
    }

    pub fn center(&self, idx: usize) -> (f64, f64) {
        token_center(
            self.image_h,
            self.image_w,
            self.grid_h,
            self.grid_w,
            idx / self.grid_w,
            idx % self.grid_w,
        )
    }
}

/// L2-normalized copy of every token, in `f64`.
fn unit_tokens(g: &FeatureGrid) -> Vec<Vec<f64>> {
    (0..g.tokens())
        .map(|i| {
            let t: Vec<f64> = g.token(i).iter().map(|&x| x as f64).collect();
            let n = libm::sqrt(t.iter().map(|x| x * x).sum::<f64>());
            if n > 0.0 {
                t.into_iter().map(|x| x / n).collect()
            } else {
                t
            }
        })
        .collect()
}

/// Index of the token in `b` with the highest cosine similarity to `q`; ties
/// go to the smallest index.
pub fn nearest_token(q: &[f64], b: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_s = f64::NEG_INFINITY;
    for (i, t) in b.iter().enumerate() {
        let s: f64 = q.iter().zip(t).map(|(x, y)| x * y).sum();
        if s > best_s {
            best_s = s;
            best = i;
        }
    }
    best
}

/// Fraction of correspondences whose query token (the token containing `a`)
/// is matched by cosine nearest neighbour to a token in `b` whose center lies
/// within `tau_px` pixels of the true location.
pub fn pck_probe(a: FeatureGrid, b: FeatureGrid, pairs: &[Correspondence], tau_px: f64) -> Result<f64> {
    a.check()?;
    b.check()?;
    if a.channels != b.channels {
        return Err(Error::ShapeMismatch {
            expected: a.channels,
            actual: b.channels,
        });
    }
    if pairs.is_empty() {
        return Err(Error::EmptyCorrespondences);
    }
    let ua = unit_tokens(&a);
    let ub = unit_tokens(&b);
    let hits = pairs
        .iter()
        .filter(|p| {
            let q = a.token_at(p.a.0, p.a.1);
            let m = nearest_token(&ua[q], &ub);
            let (cu, cv) = b.center(m);
            libm::hypot(cu - p.b.0, cv - p.b.1) <= tau_px
        })
        .count();
    Ok(hits as f64 / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn identical_one_hot_grids_are_perfect() {
        let (gh, gw) = (4, 4);
        let mut data = vec![0.0f32; gh * gw * 16];
        for i in 0..16 {
            data[i * 16 + i] = 1.0;
        }
        let g = FeatureGrid {
            data: &data,
            grid_h: gh,
            grid_w: gw,
            channels: 16,
            image_h: 16,
            image_w: 16,
        };
        let pairs: Vec<Correspondence> = (0..16)
            .map(|k| {
                let c = g.center(k);
                Correspondence { a: c, b: c }
            })
            .collect();
        assert_eq!(pck_probe(g, g, &pairs, 0.5).unwrap(), 1.0);
        assert_eq!(pck_probe(g, g, &[], 1.0).unwrap_err(), Error::EmptyCorrespondences);
    }

    #[test]
    fn token_lookup() {
        let data = vec![0.0f32; 8 * 8];
        let g = FeatureGrid {
            data: &data,
            grid_h: 8,
            grid_w: 8,
            channels: 1,
            image_h: 32,
            image_w: 32,
        };
        assert_eq!(g.token_at(0.5, 0.5), 0);
        assert_eq!(g.token_at(31.9, 31.9), 63);
        assert_eq!(g.token_at(5.0, 0.0), 1);
        assert_eq!(g.center(9), (6.0, 6.0));
    }
}
