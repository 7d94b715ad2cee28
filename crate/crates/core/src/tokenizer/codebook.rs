use crate::error::{Error, Result};
use crate::tensor::{Array, Scalar};

/// `K × n_z` table of quantized embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<S: Scalar = f32> {
    entries: Array<S>,
}

impl<S: Scalar> Codebook<S> {
    pub fn new(entries: Array<S>) -> Result<Self> {
        if entries.rank() != 2 || entries.shape()[0] < 2 {
            return Err(Error::InvalidShape(format!(
                "codebook needs shape [K >= 2, n_z], got {:?}",
                entries.shape()
            )));
        }
        if !entries.is_finite() {
            return Err(Error::invalid("codebook entries must be finite"));
        }
        Ok(Self { entries })
    }

    pub fn size(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn entries(&self) -> &Array<S> {
        &self.entries
    }

    pub fn entry(&self, k: usize) -> &[S] {
        let d = self.dim();
        &self.entries.data()[k * d..(k + 1) * d]
    }

    /// Index of the entry nearest to `v` in Euclidean distance; ties go to the lowest index.
    pub fn nearest(&self, v: &[S]) -> usize {
        let mut best = 0;
        let mut best_d = S::infinity();
        for k in 0..self.size() {
            let d = self
                .entry(k)
                .iter()
                .zip(v)
                .fold(S::zero(), |acc, (&e, &x)| acc + (x - e) * (x - e));
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    /// Quantizes every last-axis vector of `latents`, returning indices and the
    /// selected entries in the same shape.
    pub fn quantize(&self, latents: &Array<S>) -> Result<(Vec<usize>, Array<S>)> {
        let d = self.dim();
        if latents.last_dim() != d {
            return Err(Error::ShapeMismatch {
                op: "quantize",
                left: latents.shape().to_vec(),
                right: self.entries.shape().to_vec(),
            });
        }
        let indices: Vec<usize> = latents.data().chunks(d).map(|v| self.nearest(v)).collect();
        let mut out = Vec::with_capacity(latents.len());
        for &k in &indices {
            out.extend_from_slice(self.entry(k));
        }
        Ok((indices, Array::new(latents.shape().to_vec(), out)?))
    }
}
