//! Source/target view-role sampling for multi-view sequences.

use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Frames picked from a sequence and their roles. All indices refer to frames
/// of the original sequence; `frames` is sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewSplit {
    pub frames: Vec<usize>,
    pub sources: Vec<usize>,
    pub targets: Vec<usize>,
}

impl ViewSplit {
    /// Per selected view (in `frames` order): `true` when it is a target.
    pub fn target_mask(&self) -> Vec<bool> {
        self.frames
            .iter()
            .map(|f| self.targets.contains(f))
            .collect()
    }

    /// Positions (0..V) of the sources within `frames`.
    pub fn source_positions(&self) -> Vec<usize> {
        self.frames
            .iter()
            .enumerate()
            .filter(|(_, f)| self.sources.contains(f))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn target_positions(&self) -> Vec<usize> {
        self.frames
            .iter()
            .enumerate()
            .filter(|(_, f)| self.targets.contains(f))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Source positions within `v` ordered views for `n` sources, `n >= 2`: the
/// first and last views plus interior views at uniform spacing, each rounded
/// to the nearest index with ties going to the smaller one.
pub fn uniform_source_positions(v: usize, n: usize) -> Vec<usize> {
    debug_assert!(n >= 2 && n <= v);
    (0..n)
        .map(|i| {
            // Exact rational position i (v-1) / (n-1).
            let num = i * (v - 1);
            let den = n - 1;
            let q = num / den;
            let r = num % den;
            if 2 * r > den {
                q + 1
            } else {
                q
            }
        })
        .collect()
}

/// Picks `v` frames from a sequence of `seq_len` frames and assigns `n`
/// sources.
///
/// When the sequence is longer than `v`, a random start frame is drawn and
/// each consecutive frame step is uniform in `1..=max_interval` (shrunk if the
/// sequence is too short to fit it). Deterministic for a given seed.
pub fn sample_views(
    seq_len: usize,
    v: usize,
    n: usize,
    seed: u64,
    max_interval: usize,
) -> Result<ViewSplit> {
    if !(1..=4).contains(&n) || v < 4 || n > v {
        return Err(Error::InvalidArgument(alloc::format!(
            "view sampling requires 1 <= N <= 4 <= V, got N={n}, V={v}"
        )));
    }
    if seq_len < v {
        return Err(Error::InvalidArgument(alloc::format!(
            "sequence has {seq_len} frames, fewer than the {v} requested views"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = pick_frames(&mut rng, seq_len, v, max_interval.max(1));

    let positions = if n == 1 {
        alloc::vec![rng.random_range(0..v)]
    } else {
        uniform_source_positions(v, n)
    };
    let sources: Vec<usize> = positions.iter().map(|&p| frames[p]).collect();
    let targets: Vec<usize> = frames
        .iter()
        .copied()
        .filter(|f| !sources.contains(f))
        .collect();
    Ok(ViewSplit {
        frames,
        sources,
        targets,
    })
}

fn pick_frames(rng: &mut ChaCha8Rng, seq_len: usize, v: usize, max_interval: usize) -> Vec<usize> {
    if seq_len == v {
        return (0..v).collect();
    }
    // Largest interval for which v frames are guaranteed to fit.
    let fit = ((seq_len - 1) / (v - 1)).max(1);
    let max_step = max_interval.min(fit);
    let steps: Vec<usize> = (0..v - 1).map(|_| rng.random_range(1..=max_step)).collect();
    let span: usize = steps.iter().sum();
    let start = rng.random_range(0..=seq_len - 1 - span);
    let mut frames = Vec::with_capacity(v);
    let mut f = start;
    frames.push(f);
    for s in steps {
        f += s;
        frames.push(f);
    }
    frames
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_sources_are_first_and_last() {
        let s = sample_views(8, 8, 2, 3, 1).unwrap();
        assert_eq!(s.sources, alloc::vec![0, 7]);
        assert_eq!(s.targets, alloc::vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn four_sources_uniform() {
        assert_eq!(uniform_source_positions(8, 4), alloc::vec![0, 2, 5, 7]);
        // 3.5 ties to the smaller index.
        assert_eq!(uniform_source_positions(8, 3), alloc::vec![0, 3, 7]);
    }

    #[test]
    fn single_source_deterministic() {
        let a = sample_views(8, 8, 1, 42, 1).unwrap();
        let b = sample_views(8, 8, 1, 42, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.sources.len(), 1);
        assert_eq!(a.targets.len(), 7);
    }

    #[test]
    fn short_sequence_rejected() {
        assert!(sample_views(5, 8, 2, 0, 1).is_err());
        assert!(sample_views(8, 8, 5, 0, 1).is_err());
        assert!(sample_views(8, 3, 2, 0, 1).is_err());
    }

    #[test]
    fn long_sequence_frames_in_range() {
        for seed in 0..50 {
            let s = sample_views(30, 8, 2, seed, 3).unwrap();
            assert_eq!(s.frames.len(), 8);
            assert!(s.frames.windows(2).all(|w| w[1] > w[0] && w[1] - w[0] <= 3));
            assert!(*s.frames.last().unwrap() < 30);
            assert_eq!(s.sources, alloc::vec![s.frames[0], s.frames[7]]);
        }
    }
}
