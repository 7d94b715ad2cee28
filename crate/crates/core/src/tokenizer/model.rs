use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::config::{parse_field, KvConfig};
use crate::rng::Generator;
use crate::tensor::{
    read_manifest, write_manifest, Array, Conv2dSpec, ParamId, ParamStore, Tape, Var,
};

use super::codebook::Codebook;

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerConfig {
    pub frame_height: usize,
    pub frame_width: usize,
    pub channels: usize,
    /// Spatial downsampling factor `f = H / h`; a power of two.
    pub downsample: usize,
    pub codebook_size: usize,
    pub embed_dim: usize,
    /// Width of the convolutional stacks.
    pub hidden: usize,
    /// Commitment weight `β_c`.
    pub commitment: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            frame_height: 32,
            frame_width: 32,
            channels: 3,
            downsample: 4,
            codebook_size: 128,
            embed_dim: 64,
            hidden: 32,
            commitment: 0.25,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.downsample.is_power_of_two() || self.downsample < 2 {
            return Err(Error::Config(format!(
                "downsample factor {} is not a power of two >= 2",
                self.downsample
            )));
        }
        if self.frame_height % self.downsample != 0 || self.frame_width % self.downsample != 0 {
            return Err(Error::Config(format!(
                "frame {}x{} not divisible by downsample {}",
                self.frame_height, self.frame_width, self.downsample
            )));
        }
        if self.codebook_size < 2 || self.embed_dim == 0 || self.hidden == 0 || self.channels == 0 {
            return Err(Error::Config("codebook_size >= 2 and positive widths required".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (
            self.frame_height / self.downsample,
            self.frame_width / self.downsample,
        )
    }

    pub fn to_manifest(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("K".into(), self.codebook_size.to_string());
        m.insert("n_z".into(), self.embed_dim.to_string());
        m.insert("f".into(), self.downsample.to_string());
        m.insert("frame_height".into(), self.frame_height.to_string());
        m.insert("frame_width".into(), self.frame_width.to_string());
        m.insert("channels".into(), self.channels.to_string());
        m.insert("hidden".into(), self.hidden.to_string());
        m.insert("commitment".into(), self.commitment.to_string());
        m
    }

    pub fn from_manifest(m: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            m.get(k)
                .ok_or_else(|| Error::Config(format!("tokenizer manifest lacks `{k}`")))
        };
        let cfg = Self {
            codebook_size: parse_field("K", get("K")?)?,
            embed_dim: parse_field("n_z", get("n_z")?)?,
            downsample: parse_field("f", get("f")?)?,
            frame_height: parse_field("frame_height", get("frame_height")?)?,
            frame_width: parse_field("frame_width", get("frame_width")?)?,
            channels: parse_field("channels", get("channels")?)?,
            hidden: parse_field("hidden", get("hidden")?)?,
            commitment: parse_field("commitment", get("commitment")?)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `frame_size`, `downsample`, `codebook_size`, `embed_dim`, `hidden`,
    /// `channels`, `commitment` (all optional) from a config file.
    pub fn take_from(kv: &mut KvConfig) -> Result<Self> {
        let d = Self::default();
        let size = kv.take_or("frame_size", d.frame_height)?;
        let cfg = Self {
            frame_height: size,
            frame_width: size,
            channels: kv.take_or("channels", d.channels)?,
            downsample: kv.take_or("downsample", d.downsample)?,
            codebook_size: kv.take_or("codebook_size", d.codebook_size)?,
            embed_dim: kv.take_or("embed_dim", d.embed_dim)?,
            hidden: kv.take_or("hidden", d.hidden)?,
            commitment: kv.take_or("commitment", d.commitment)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
    spec: Conv2dSpec,
}

impl ConvLayer {
    fn new(
        params: &mut ParamStore,
        name: &str,
        k: usize,
        c_in: usize,
        c_out: usize,
        spec: Conv2dSpec,
        gen: &mut Generator,
    ) -> Self {
        let std = (2.0 / (k * k * c_in) as f64).sqrt();
        Self {
            w: params.add_normal(format!("{name}.w"), &[k, k, c_in, c_out], std, gen),
            b: params.add_full(format!("{name}.b"), &[c_out], 0.0),
            spec,
        }
    }

    fn forward(&self, tape: &Tape, params: &ParamStore, x: &Var) -> Result<Var> {
        x.conv2d(&tape.param(params, self.w), self.spec)?
            .add_broadcast(&tape.param(params, self.b))
    }
}

/// Quantized latent indices of one frame, `h × w` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameTokens {
    pub height: usize,
    pub width: usize,
    pub indices: Vec<usize>,
}

/// Per-frame convolutional VQ autoencoder.
#[derive(Clone, Debug)]
pub struct TokenizerModel {
    config: TokenizerConfig,
    pub(crate) params: ParamStore,
    encoder: Vec<ConvLayer>,
    decoder_in: ConvLayer,
    decoder_up: Vec<ConvLayer>,
    decoder_out: ConvLayer,
    pub(crate) codebook: ParamId,
    pub(crate) step: u64,
}

/// Loss terms of one tokenizer pass.
pub struct VqLosses {
    pub recon: Var,
    pub codebook: Var,
    pub commitment: Var,
    pub total: Var,
}

const SAME3: Conv2dSpec = Conv2dSpec { stride: 1, pad: 1 };
const DOWN4: Conv2dSpec = Conv2dSpec { stride: 2, pad: 1 };
const POINT: Conv2dSpec = Conv2dSpec { stride: 1, pad: 0 };

impl TokenizerModel {
    pub fn new(config: TokenizerConfig, gen: &mut Generator) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let c = config.hidden;
        let levels = config.downsample.trailing_zeros() as usize;
        let mut encoder = vec![ConvLayer::new(&mut params, "enc.in", 3, config.channels, c, SAME3, gen)];
        for i in 0..levels {
            encoder.push(ConvLayer::new(&mut params, &format!("enc.down{i}"), 4, c, c, DOWN4, gen));
        }
        encoder.push(ConvLayer::new(&mut params, "enc.mid", 3, c, c, SAME3, gen));
        encoder.push(ConvLayer::new(&mut params, "enc.proj", 1, c, config.embed_dim, POINT, gen));
        let decoder_in = ConvLayer::new(&mut params, "dec.in", 3, config.embed_dim, c, SAME3, gen);
        let decoder_up = (0..levels)
            .map(|i| ConvLayer::new(&mut params, &format!("dec.up{i}"), 3, c, c, SAME3, gen))
            .collect();
        let decoder_out = ConvLayer::new(&mut params, "dec.out", 3, c, config.channels, SAME3, gen);
        let codebook = params.add_normal(
            "codebook",
            &[config.codebook_size, config.embed_dim],
            1.0,
            gen,
        );
        Ok(Self {
            config,
            params,
            encoder,
            decoder_in,
            decoder_up,
            decoder_out,
            codebook,
            step: 0,
        })
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn steps_trained(&self) -> u64 {
        self.step
    }

    pub fn codebook(&self) -> Codebook {
        Codebook::new(self.params.value(self.codebook).clone()).expect("codebook shape is fixed")
    }

    fn check_frames(&self, shape: &[usize]) -> Result<()> {
        let f = self.config.downsample;
        if shape.len() != 4 || shape[3] != self.config.channels {
            return Err(Error::InvalidShape(format!(
                "expected [N, H, W, {}] frames, got {shape:?}",
                self.config.channels
            )));
        }
        if shape[1] % f != 0 || shape[2] % f != 0 {
            return Err(Error::InvalidShape(format!(
                "frame {}x{} not divisible by downsample factor {f}",
                shape[1], shape[2]
            )));
        }
        Ok(())
    }

    /// `[N, H, W, C] -> [N, H/f, W/f, n_z]`.
    pub fn encode_var(&self, tape: &Tape, x: &Var) -> Result<Var> {
        self.check_frames(x.shape())?;
        let last = self.encoder.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.encoder.iter().enumerate() {
            h = layer.forward(tape, &self.params, &h)?;
            if i != last {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// `[N, h, w, n_z] -> [N, H, W, C]`, unclamped.
    pub fn decode_var(&self, tape: &Tape, q: &Var) -> Result<Var> {
        let mut h = self.decoder_in.forward(tape, &self.params, q)?.relu();
        for layer in &self.decoder_up {
            h = layer.forward(tape, &self.params, &h.upsample2x()?)?.relu();
        }
        self.decoder_out.forward(tape, &self.params, &h)
    }

    pub fn encode(&self, frames: &Array) -> Result<Array> {
        let tape = Tape::no_grad();
        Ok(self.encode_var(&tape, &tape.constant(frames.clone()))?.value().clone())
    }

    /// Token indices of each frame, `[N, h, w]` flattened.
    pub fn tokenize(&self, frames: &Array) -> Result<Vec<usize>> {
        let latents = self.encode(frames)?;
        Ok(self.codebook().quantize(&latents)?.0)
    }

    pub fn tokenize_frames(&self, frames: &Array) -> Result<Vec<FrameTokens>> {
        let (h, w) = (
            frames.shape()[1] / self.config.downsample,
            frames.shape()[2] / self.config.downsample,
        );
        let idx = self.tokenize(frames)?;
        Ok(idx
            .chunks(h * w)
            .map(|c| FrameTokens {
                height: h,
                width: w,
                indices: c.to_vec(),
            })
            .collect())
    }

    /// Reconstructs `[N, h·f, w·f, C]` frames in `[0, 1]` from `N·h·w` token indices.
    pub fn decode(&self, tokens: &[usize], frames: usize, h: usize, w: usize) -> Result<Array> {
        let k = self.config.codebook_size;
        if tokens.len() != frames * h * w {
            return Err(Error::InvalidShape(format!(
                "{} tokens for {frames} frames of {h}x{w}",
                tokens.len()
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= k) {
            return Err(Error::IndexOutOfRange {
                what: "token",
                index: bad,
                bound: k,
            });
        }
        let tape = Tape::no_grad();
        let q = tape
            .param(&self.params, self.codebook)
            .gather_rows(tokens)?
            .reshape(vec![frames, h, w, self.config.embed_dim])?;
        let out = self.decode_var(&tape, &q)?;
        Ok(out.value().map(|v| v.clamp(0.0, 1.0)))
    }

    /// Full training pass: encode, quantize (straight-through), decode and loss terms.
    pub fn forward_losses(&self, tape: &Tape, frames: &Array) -> Result<(VqLosses, Vec<usize>, Array)> {
        let x = tape.constant(frames.clone());
        let z = self.encode_var(tape, &x)?;
        let (indices, _) = self.codebook().quantize(z.value())?;
        let q = tape
            .param(&self.params, self.codebook)
            .gather_rows(&indices)?
            .reshape(z.shape().to_vec())?;
        let q_st = z.add(&q.sub(&z)?.detach())?;
        let recon = self.decode_var(tape, &q_st)?;
        let losses = vq_losses(&x, &recon, &z, &q, self.config.commitment)?;
        let latents = z.value().clone();
        Ok((losses, indices, latents))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.params.save_dir(dir)?;
        let mut m = self.config.to_manifest();
        m.insert("step".into(), self.step.to_string());
        write_manifest(&dir.join("manifest.txt"), &m)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = read_manifest(&dir.join("manifest.txt"))?;
        let config = TokenizerConfig::from_manifest(&m)?;
        let mut model = Self::new(config, &mut Generator::new(0))?;
        model.params.load_dir(dir)?;
        model.step = m.get("step").map(|s| parse_field("step", s)).transpose()?.unwrap_or(0);
        Ok(model)
    }
}

/// Reconstruction MSE, codebook loss `‖sg(z) − q‖²` and commitment `β_c‖z − sg(q)‖²`,
/// each averaged over elements.
pub fn vq_losses(x: &Var, recon: &Var, latents: &Var, quantized: &Var, beta: f64) -> Result<VqLosses> {
    let sq = |a: &Var, b: &Var| -> Result<Var> {
        let d = a.sub(b)?;
        Ok(d.mul(&d)?.mean())
    };
    let recon_loss = sq(x, recon)?;
    let codebook = sq(&latents.detach(), quantized)?;
    let commitment = sq(latents, &quantized.detach())?.scale(beta as f32);
    let total = recon_loss.add(&codebook)?.add(&commitment)?;
    Ok(VqLosses {
        recon: recon_loss,
        codebook,
        commitment,
        total,
    })
}
