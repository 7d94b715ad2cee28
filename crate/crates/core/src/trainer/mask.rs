use crate::error::{Error, Result};
use crate::rng::Generator;

/// How the masking ratio of each training video is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskMode {
    /// `r ~ U[0.5, 1)` per video.
    Variable,
    /// Constant ratio in `(0, 1)`.
    Fixed(f64),
}

impl MaskMode {
    pub fn fixed(r: f64) -> Result<Self> {
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::Config(format!("fixed mask ratio {r} outside (0, 1)")));
        }
        Ok(MaskMode::Fixed(r))
    }
}

/// Masked subset of the predictable positions of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub ratio: f64,
    /// Flat grid positions, ascending.
    pub positions: Vec<usize>,
}

/// `⌊r·N⌋` as used for mask counts, guarded against `r·N` landing a hair below an integer.
pub fn mask_count(ratio: f64, n: usize) -> usize {
    let x = ratio * n as f64;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.floor() as usize
    }
}

/// Draws a ratio per `mode` and masks `⌊r·N⌋` of `candidates` uniformly without
/// replacement, `N = candidates.len()`.
pub fn sample_mask(gen: &mut Generator, candidates: &[usize], mode: MaskMode) -> MaskPlan {
    let ratio = match mode {
        MaskMode::Variable => gen.uniform_range(0.5, 1.0),
        MaskMode::Fixed(r) => r,
    };
    let count = mask_count(ratio, candidates.len());
    let mut positions: Vec<usize> = gen
        .choose_distinct(candidates.len(), count)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    positions.sort_unstable();
    MaskPlan { ratio, positions }
}
