use crate::error::{Error, Result};
use crate::rng::Generator;
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Var};

use super::config::{Geometry, Window};

/// Dense layer `x·W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
        gen: &mut Generator,
    ) -> Self {
        Self {
            w: store.add_normal(format!("{name}.w"), &[d_in, d_out], std, gen),
            b: store.add_full(format!("{name}.b"), &[d_out], 0.0),
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &Tape<S>, store: &ParamStore<S>, x: &Var<S>) -> Result<Var<S>> {
        x.matmul(&tape.param(store, self.w))?
            .add_broadcast(&tape.param(store, self.b))
    }
}

/// Relative-offset table index for every (query, key) pair inside a window.
fn relative_index(w: Window) -> Vec<usize> {
    let n = w.tokens();
    let coords: Vec<[usize; 3]> = (0..n)
        .map(|i| [i / (w.y * w.x), (i / w.x) % w.y, i % w.x])
        .collect();
    let (sy, sx) = (2 * w.y - 1, 2 * w.x - 1);
    let mut idx = Vec::with_capacity(n * n);
    for a in &coords {
        for b in &coords {
            let dt = a[0] + w.t - 1 - b[0];
            let dy = a[1] + w.y - 1 - b[1];
            let dx = a[2] + w.x - 1 - b[2];
            idx.push((dt * sy + dy) * sx + dx);
        }
    }
    idx
}

/// Multi-head self-attention restricted to non-overlapping `t × y × x` tiles,
/// with a learned per-head bias indexed by relative offset inside the tile.
///
/// Tiles are formed purely by reshaping and permuting the `[B, T, h, w, d]`
/// input, so every tile is processed as one independent attention problem.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub window: Window,
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub bias: ParamId,
    rel_index: Vec<usize>,
}

impl WindowAttention {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        window: Window,
        gen: &mut Generator,
    ) -> Self {
        let std = 0.02;
        Self {
            window,
            heads,
            q: Linear::new(store, &format!("{name}.q"), dim, dim, std, gen),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, std, gen),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, std, gen),
            out: Linear::new(store, &format!("{name}.o"), dim, dim, std, gen),
            bias: store.add_normal(format!("{name}.rel_bias"), &[heads, window.relative_span()], std, gen),
            rel_index: relative_index(window),
        }
    }

    /// Number of attention-score entries one forward pass materializes for `batch` videos.
    pub fn score_elements(&self, batch: usize, geo: Geometry) -> usize {
        let tiles = geo.tokens() / self.window.tokens();
        batch * tiles * self.heads * self.window.tokens() * self.window.tokens()
    }

    /// `x` is `[B, T, h, w, d]`; returns the same shape.
    pub fn forward<S: Scalar>(&self, tape: &Tape<S>, store: &ParamStore<S>, x: &Var<S>) -> Result<Var<S>> {
        let shape = x.shape().to_vec();
        if shape.len() != 5 {
            return Err(Error::InvalidShape(format!(
                "attention expects [B, T, h, w, d], got {shape:?}"
            )));
        }
        let [b, t, h, w, d] = [shape[0], shape[1], shape[2], shape[3], shape[4]];
        let geo = Geometry {
            frames: t,
            height: h,
            width: w,
        };
        geo.check_window(self.window)?;
        if d % self.heads != 0 {
            return Err(Error::InvalidShape(format!("dim {d} not divisible by {} heads", self.heads)));
        }
        let win = self.window;
        let dh = d / self.heads;
        let n = win.tokens();
        let tiles = geo.tokens() / n;
        let split = [b, t / win.t, win.t, h / win.y, win.y, w / win.x, win.x, self.heads, dh];
        // [B, T', wt, h', wy, w', wx, H, dh] -> [B, T', h', w', H, wt, wy, wx, dh]
        let to_tiles = [0, 1, 3, 5, 7, 2, 4, 6, 8];
        let groups = b * tiles * self.heads;
        let project = |lin: &Linear| -> Result<Var<S>> {
            lin.forward(tape, store, x)?
                .reshape(split.to_vec())?
                .permute(&to_tiles)?
                .reshape(vec![groups, n, dh])
        };
        let (q, k, v) = (project(&self.q)?, project(&self.k)?, project(&self.v)?);
        let scale = S::lit(1.0 / (dh as f64).sqrt());
        let bias = tape
            .param(store, self.bias)
            .gather_last(&self.rel_index, &[n, n])?;
        let scores = q
            .bmm(&k, true)?
            .scale(scale)
            .reshape(vec![b * tiles, self.heads, n, n])?
            .add_broadcast(&bias)?;
        let attn = scores.softmax(3)?.reshape(vec![groups, n, n])?;
        let ctx = attn
            .bmm(&v, false)?
            .reshape(vec![b, t / win.t, h / win.y, w / win.x, self.heads, win.t, win.y, win.x, dh])?
            .permute(&[0, 1, 5, 2, 6, 3, 7, 4, 8])?
            .reshape(vec![b, t, h, w, d])?;
        self.out.forward(tape, store, &ctx)
    }
}
