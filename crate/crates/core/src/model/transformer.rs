use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::config::parse_field;
use crate::rng::Generator;
use crate::tensor::{read_manifest, write_manifest, Array, ParamId, ParamStore, Scalar, Tape, Var};

use super::attention::{Linear, WindowAttention};
use super::config::ModelConfig;
use super::grid::TokenGrid;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add_full(format!("{name}.gain"), &[dim], 1.0),
            bias: store.add_full(format!("{name}.bias"), &[dim], 0.0),
        }
    }

    fn forward<S: Scalar>(&self, tape: &Tape<S>, store: &ParamStore<S>, x: &Var<S>) -> Result<Var<S>> {
        x.layer_norm(
            &tape.param(store, self.gain),
            &tape.param(store, self.bias),
            S::lit(LN_EPS),
        )
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize, hidden: usize, gen: &mut Generator) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, 0.02, gen),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, 0.02, gen),
        }
    }

    fn forward<S: Scalar>(&self, tape: &Tape<S>, store: &ParamStore<S>, x: &Var<S>) -> Result<Var<S>> {
        let h = self.up.forward(tape, store, x)?.gelu();
        self.down.forward(tape, store, &h)
    }
}

/// Stochastic state for training-mode forward passes.
pub struct Dropout<'a> {
    pub rate: f64,
    pub gen: &'a mut Generator,
}

fn residual<S: Scalar>(x: &Var<S>, branch: Var<S>, dropout: &mut Option<Dropout<'_>>) -> Result<Var<S>> {
    let branch = match dropout {
        Some(d) if d.rate > 0.0 => branch.dropout(d.rate, d.gen),
        _ => branch,
    };
    x.add(&branch)
}

/// Pre-norm block: spatial-window attention and feed-forward, then
/// spatiotemporal-window attention and feed-forward, each with a residual.
#[derive(Clone, Debug)]
pub struct Block {
    pub spatial: WindowAttention,
    pub spatiotemporal: WindowAttention,
    norms: [Norm; 4],
    ffs: [FeedForward; 2],
}

impl Block {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, config: &ModelConfig, gen: &mut Generator) -> Self {
        let d = config.embed_dim;
        Self {
            spatial: WindowAttention::new(store, &format!("{name}.spatial"), d, config.heads, config.spatial_window, gen),
            norms: [0, 1, 2, 3].map(|i| Norm::new(store, &format!("{name}.norm{i}"), d)),
            ffs: [0, 1].map(|i| FeedForward::new(store, &format!("{name}.ff{i}"), d, config.ff_dim, gen)),
            spatiotemporal: WindowAttention::new(store, &format!("{name}.st"), d, config.heads, config.st_window, gen),
        }
    }

    /// `x` is `[B, T, h, w, d]`.
    pub fn forward<S: Scalar>(
        &self,
        tape: &Tape<S>,
        store: &ParamStore<S>,
        x: &Var<S>,
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<Var<S>> {
        let mut h = x.clone();
        for (i, attn) in [&self.spatial, &self.spatiotemporal].into_iter().enumerate() {
            let a = attn.forward(tape, store, &self.norms[2 * i].forward(tape, store, &h)?)?;
            h = residual(&h, a, &mut dropout)?;
            let f = self.ffs[i].forward(tape, store, &self.norms[2 * i + 1].forward(tape, store, &h)?)?;
            h = residual(&h, f, &mut dropout)?;
        }
        Ok(h)
    }
}

/// Bidirectional window transformer over masked token videos.
#[derive(Clone, Debug)]
pub struct MaskVit<S: Scalar = f32> {
    config: ModelConfig,
    params: ParamStore<S>,
    token_embed: ParamId,
    space_embed: ParamId,
    time_embed: ParamId,
    action_proj: Option<Linear>,
    blocks: Vec<Block>,
    head_norm: Norm,
    head: Linear,
    pub(crate) step: u64,
}

impl<S: Scalar> MaskVit<S> {
    pub fn new(config: ModelConfig, gen: &mut Generator) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let d = config.embed_dim;
        let g = config.geometry();
        let token_embed = params.add_normal("embed.token", &[config.codebook_size + 1, d], 0.02, gen);
        let space_embed = params.add_normal("embed.space", &[g.frame_tokens(), d], 0.02, gen);
        let time_embed = params.add_normal("embed.time", &[g.frames, d], 0.02, gen);
        let action_proj = (config.action_dim > 0)
            .then(|| Linear::new(&mut params, "embed.action", config.action_dim, d, 0.02, gen));
        let blocks = (0..config.blocks)
            .map(|i| Block::new(&mut params, &format!("block{i}"), &config, gen))
            .collect();
        let head_norm = Norm::new(&mut params, "head.norm", d);
        let head = Linear::new(&mut params, "head.out", d, config.codebook_size, 0.02, gen);
        Ok(Self {
            config,
            params,
            token_embed,
            space_embed,
            time_embed,
            action_proj,
            blocks,
            head_norm,
            head,
            step: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn steps_trained(&self) -> u64 {
        self.step
    }

    fn check_tokens(&self, tokens: &[usize], batch: usize) -> Result<()> {
        let n = self.config.geometry().tokens();
        if tokens.len() != batch * n {
            return Err(Error::InvalidShape(format!(
                "{} tokens for batch {batch} of {n}-token videos",
                tokens.len()
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t > self.config.mask_token()) {
            return Err(Error::IndexOutOfRange {
                what: "token",
                index: bad,
                bound: self.config.mask_token() + 1,
            });
        }
        Ok(())
    }

    /// Input embeddings `[B, T, h, w, d]`: token + space + time (+ projected
    /// action of the token's frame). `actions` is `[B, T, A]`.
    pub fn embed(
        &self,
        tape: &Tape<S>,
        tokens: &[usize],
        batch: usize,
        actions: Option<&Array<S>>,
    ) -> Result<Var<S>> {
        self.check_tokens(tokens, batch)?;
        let g = self.config.geometry();
        let d = self.config.embed_dim;
        let n = g.tokens();
        let space_idx: Vec<usize> = (0..batch * n).map(|i| i % g.frame_tokens()).collect();
        let frame_idx: Vec<usize> = (0..batch * n).map(|i| i / g.frame_tokens()).collect();
        let time_idx: Vec<usize> = frame_idx.iter().map(|&f| f % g.frames).collect();
        let mut x = tape
            .param(&self.params, self.token_embed)
            .gather_rows(tokens)?
            .add(&tape.param(&self.params, self.space_embed).gather_rows(&space_idx)?)?
            .add(&tape.param(&self.params, self.time_embed).gather_rows(&time_idx)?)?;
        match (&self.action_proj, actions) {
            (Some(proj), Some(a)) => {
                let want = [batch, g.frames, self.config.action_dim];
                if a.shape() != want {
                    return Err(Error::ShapeMismatch {
                        op: "embed actions",
                        left: a.shape().to_vec(),
                        right: want.to_vec(),
                    });
                }
                let per_frame = proj.forward(tape, &self.params, &tape.constant(a.clone()))?.reshape(vec![batch * g.frames, d])?;
                x = x.add(&per_frame.gather_rows(&frame_idx)?)?;
            }
            (None, Some(_)) => {
                return Err(Error::invalid("actions given to an unconditioned model"));
            }
            _ => {}
        }
        x.reshape(vec![batch, g.frames, g.height, g.width, d])
    }

    /// Logits `[B, T, h, w, K]` over the real codebook entries.
    pub fn forward(
        &self,
        tape: &Tape<S>,
        tokens: &[usize],
        batch: usize,
        actions: Option<&Array<S>>,
        mut dropout: Option<&mut Generator>,
    ) -> Result<Var<S>> {
        let mut h = self.embed(tape, tokens, batch, actions)?;
        for block in &self.blocks {
            let drop = match dropout.as_deref_mut() {
                Some(gen) if self.config.dropout > 0.0 => Some(Dropout {
                    rate: self.config.dropout,
                    gen,
                }),
                _ => None,
            };
            h = block.forward(tape, &self.params, &h, drop)?;
        }
        let h = self.head_norm.forward(tape, &self.params, &h)?;
        self.head.forward(tape, &self.params, &h)
    }

    /// Eval-mode logits for a batch of grids sharing this model's geometry.
    pub fn logits(&self, grids: &[&TokenGrid], actions: Option<&Array<S>>) -> Result<Array<S>> {
        let mut tokens = Vec::new();
        for g in grids {
            if g.geometry() != self.config.geometry() || g.codebook_size != self.config.codebook_size {
                return Err(Error::InvalidShape("token grid does not match model geometry".into()));
            }
            tokens.extend_from_slice(&g.indices);
        }
        let tape = Tape::no_grad();
        Ok(self.forward(&tape, &tokens, grids.len(), actions, None)?.value().clone())
    }

    pub fn save(&self, dir: &Path) -> Result<()>
    where
        S: Scalar,
    {
        self.params.cast::<f32>().save_dir(dir)?;
        let mut m = self.config.to_manifest();
        m.insert("step".into(), self.step.to_string());
        write_manifest(&dir.join("manifest.txt"), &m)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = read_manifest(&dir.join("manifest.txt"))?;
        let config = ModelConfig::from_manifest(&m)?;
        let mut model = Self::new(config, &mut Generator::new(0))?;
        let mut stored = model.params.cast::<f32>();
        stored.load_dir(dir)?;
        model.params = stored.cast();
        model.step = m.get("step").map(|s| parse_field("step", s)).transpose()?.unwrap_or(0);
        Ok(model)
    }
}
