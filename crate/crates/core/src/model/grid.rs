use crate::error::{Error, Result};

use super::config::Geometry;

/// `T × h × w` codebook indices of one video; index `codebook_size` is `[MASK]`.
///
/// The first `context` frames (and the final frame when `goal` is set) are
/// conditioning frames and never hold `[MASK]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub codebook_size: usize,
    pub context: usize,
    pub goal: bool,
    pub indices: Vec<usize>,
}

impl TokenGrid {
    pub fn new(geo: Geometry, codebook_size: usize, context: usize, goal: bool, indices: Vec<usize>) -> Result<Self> {
        let g = Self {
            frames: geo.frames,
            height: geo.height,
            width: geo.width,
            codebook_size,
            context,
            goal,
            indices,
        };
        g.validate()?;
        Ok(g)
    }

    /// Context frames from `tokens` (`context·h·w` entries, or a full video whose
    /// future is discarded); every other position is `[MASK]`. With `goal`, the
    /// final frame is taken from the last `h·w` entries of `tokens`.
    pub fn with_masked_future(
        geo: Geometry,
        codebook_size: usize,
        context: usize,
        goal: bool,
        tokens: &[usize],
    ) -> Result<Self> {
        let per = geo.frame_tokens();
        let mut indices = vec![codebook_size; geo.tokens()];
        if tokens.len() < context * per || (goal && tokens.len() < (context + 1) * per) {
            return Err(Error::InvalidShape(format!(
                "{} tokens cannot fill {context} context frames of {per}",
                tokens.len()
            )));
        }
        indices[..context * per].copy_from_slice(&tokens[..context * per]);
        if goal {
            let n = tokens.len();
            indices[geo.tokens() - per..].copy_from_slice(&tokens[n - per..]);
        }
        Self::new(geo, codebook_size, context, goal, indices)
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            frames: self.frames,
            height: self.height,
            width: self.width,
        }
    }

    pub fn mask_token(&self) -> usize {
        self.codebook_size
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Whether flat position `i` belongs to a conditioning frame.
    pub fn is_conditioning(&self, i: usize) -> bool {
        let frame = i / (self.height * self.width);
        frame < self.context || (self.goal && frame + 1 == self.frames)
    }

    /// Positions that may be masked and predicted.
    pub fn predicted_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_conditioning(i)).collect()
    }

    pub fn masked_count(&self) -> usize {
        self.indices.iter().filter(|&&t| t == self.codebook_size).count()
    }

    pub fn validate(&self) -> Result<()> {
        let geo = self.geometry();
        if self.indices.len() != geo.tokens() {
            return Err(Error::InvalidShape(format!(
                "{} indices for a {}x{}x{} grid",
                self.indices.len(),
                self.frames,
                self.height,
                self.width
            )));
        }
        let conditioning = self.context + usize::from(self.goal);
        if conditioning > self.frames {
            return Err(Error::invalid(format!(
                "{conditioning} conditioning frames exceed {} total",
                self.frames
            )));
        }
        for (i, &t) in self.indices.iter().enumerate() {
            if t > self.codebook_size {
                return Err(Error::IndexOutOfRange {
                    what: "token",
                    index: t,
                    bound: self.codebook_size + 1,
                });
            }
            if t == self.codebook_size && self.is_conditioning(i) {
                return Err(Error::invalid(format!("conditioning position {i} holds [MASK]")));
            }
        }
        Ok(())
    }
}
