//! Feature-level subsets and the level-dropout sampler.

use alloc::string::String;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const NUM_LEVELS: usize = 4;

/// A subset of the four feature levels, bit `l` set when level `l` is present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LevelMask(u8);

impl LevelMask {
    pub const ALL: LevelMask = LevelMask(0b1111);
    pub const NONE: LevelMask = LevelMask(0);

    pub fn from_bools(present: [bool; NUM_LEVELS]) -> Self {
        let mut bits = 0;
        for (l, p) in present.iter().enumerate() {
            if *p {
                bits |= 1 << l;
            }
        }
        LevelMask(bits)
    }

    pub fn single(level: usize) -> Self {
        assert!(level < NUM_LEVELS);
        LevelMask(1 << level)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn contains(self, level: usize) -> bool {
        level < NUM_LEVELS && self.0 & (1 << level) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn count(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn to_bools(self) -> [bool; NUM_LEVELS] {
        core::array::from_fn(|l| self.contains(l))
    }

    /// All 15 non-empty subsets in increasing bit order.
    pub fn non_empty() -> impl Iterator<Item = LevelMask> {
        (1u8..16).map(LevelMask)
    }

    /// `"all"` for the full stack, otherwise e.g. `"L0+L2"`.
    pub fn label(self) -> String {
        if self == Self::ALL {
            return "all".into();
        }
        let mut s = String::new();
        for l in 0..NUM_LEVELS {
            if self.contains(l) {
                if !s.is_empty() {
                    s.push('+');
                }
                s.push('L');
                s.push((b'0' + l as u8) as char);
            }
        }
        s
    }
}

/// Drops each level independently with probability `drop_p`, redrawing
/// whenever every level would be dropped.
pub fn sample_level_mask<R: Rng + ?Sized>(rng: &mut R, drop_p: f64) -> LevelMask {
    let p = drop_p.clamp(0.0, 1.0);
    loop {
        let mut bits = 0u8;
        for l in 0..NUM_LEVELS {
            if rng.random::<f64>() >= p {
                bits |= 1 << l;
            }
        }
        if bits != 0 {
            return LevelMask(bits);
        }
        if p >= 1.0 {
            // Every draw would be empty; keep one level uniformly at random.
            return LevelMask::single(rng.random_range(0..NUM_LEVELS));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fifteen_subsets() {
        assert_eq!(LevelMask::non_empty().count(), 15);
        assert!(LevelMask::non_empty().all(|m| !m.is_empty()));
    }

    #[test]
    fn labels() {
        assert_eq!(LevelMask::ALL.label(), "all");
        assert_eq!(LevelMask::from_bools([true, false, true, false]).label(), "L0+L2");
    }

    #[test]
    fn sampler_never_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut per_level = [0usize; 4];
        for _ in 0..100_000 {
            let m = sample_level_mask(&mut rng, 0.5);
            assert!(!m.is_empty());
            for (l, c) in per_level.iter_mut().enumerate() {
                *c += m.contains(l) as usize;
            }
        }
        // Conditioned on non-empty: P(present) = 0.5 / (1 - 1/16) = 8/15.
        for c in per_level {
            let f = c as f64 / 100_000.0;
            assert!((f - 8.0 / 15.0).abs() < 0.01, "{f}");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_level_mask(&mut rng, 1.0).count(), 1);
    }
}
