use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::config::KvConfig;
use crate::rng::Generator;
use crate::tensor::{clip_grad_norm, Adam, Array, LrSchedule, Tape};

use super::model::{TokenizerConfig, TokenizerModel};

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: u64,
    /// Unused codebook entries are re-seeded from encoder outputs at this interval.
    pub revive_every: u64,
    pub seed: u64,
}

impl Default for TokenizerTrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 16,
            lr: 1e-3,
            warmup: 100,
            revive_every: 500,
            seed: 0,
        }
    }
}

impl TokenizerTrainConfig {
    pub fn take_from(kv: &mut KvConfig) -> Result<Self> {
        let d = Self::default();
        Ok(Self {
            steps: kv.take_or("steps", d.steps)?,
            batch_size: kv.take_or("batch_size", d.batch_size)?,
            lr: kv.take_or("lr", d.lr)?,
            warmup: kv.take_or("warmup", d.warmup)?,
            revive_every: kv.take_or("revive_every", d.revive_every)?,
            seed: kv.take_or("seed", d.seed)?,
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct TokenizerReport {
    /// Reconstruction MSE on a fixed probe batch before the first update.
    pub initial_recon: f64,
    /// Same probe after training.
    pub final_recon: f64,
    /// `(step, recon, total)` per step.
    pub curve: Vec<(u64, f64, f64)>,
    /// Entries with no assignment during the final revival window.
    pub dead_entries: usize,
    pub revived: usize,
}

fn gather_frames(frames: &Array, idx: &[usize]) -> Array {
    let per: usize = frames.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&frames.data()[i * per..(i + 1) * per]);
    }
    let mut shape = frames.shape().to_vec();
    shape[0] = idx.len();
    Array::new(shape, data).expect("consistent frame stack")
}

fn probe_recon(model: &TokenizerModel, probe: &Array) -> Result<f64> {
    let tape = Tape::no_grad();
    let (losses, _, _) = model.forward_losses(&tape, probe)?;
    Ok(losses.recon.value().item() as f64)
}

/// Trains a tokenizer on a `[N, H, W, C]` frame stack.
///
/// The codebook starts from encoder outputs of the first batch; every
/// `revive_every` steps, entries that received no assignment are replaced by
/// random encoder outputs from the current batch. Writes a checkpoint to
/// `checkpoint` when given.
pub fn train_tokenizer(
    frames: &Array,
    config: TokenizerConfig,
    train: &TokenizerTrainConfig,
    checkpoint: Option<&Path>,
) -> Result<(TokenizerModel, TokenizerReport)> {
    if frames.rank() != 4 || frames.shape()[0] == 0 {
        return Err(Error::EmptyDataset);
    }
    let n = frames.shape()[0];
    let mut gen = Generator::new(train.seed);
    let mut model = TokenizerModel::new(config, &mut gen.fork(1))?;
    let mut data_gen = gen.fork(2);
    let probe_idx: Vec<usize> = (0..train.batch_size.min(n)).map(|i| i * n / train.batch_size.min(n)).collect();
    let probe = gather_frames(frames, &probe_idx);

    let k = model.config().codebook_size;
    let d = model.config().embed_dim;
    let batch_idx = |g: &mut Generator| -> Vec<usize> { (0..train.batch_size).map(|_| g.below(n)).collect() };

    // data-dependent codebook init
    {
        let init = gather_frames(frames, &batch_idx(&mut data_gen));
        let latents = model.encode(&init)?;
        let rows = latents.len() / d;
        let cb = model.params.value_mut(model.codebook);
        for e in 0..k {
            let r = data_gen.below(rows);
            let noise: Vec<f32> = (0..d).map(|_| (data_gen.normal() * 1e-3) as f32).collect();
            for j in 0..d {
                cb.data_mut()[e * d + j] = latents.data()[r * d + j] + noise[j];
            }
        }
    }

    let mut report = TokenizerReport {
        initial_recon: probe_recon(&model, &probe)?,
        ..Default::default()
    };
    let mut adam = Adam::new(
        &model.params,
        LrSchedule {
            base: train.lr,
            warmup: train.warmup,
            total: train.steps,
        },
    );
    let mut usage = vec![0u64; k];
    for step in 0..train.steps {
        let batch = gather_frames(frames, &batch_idx(&mut data_gen));
        let tape = Tape::new();
        let (losses, indices, latents) = model.forward_losses(&tape, &batch)?;
        tape.backward(&losses.total)?;
        tape.accumulate_into(&mut model.params);
        clip_grad_norm(&mut model.params, 1.0);
        adam.step(&mut model.params);
        model.step += 1;
        for &i in &indices {
            usage[i] += 1;
        }
        report.curve.push((
            step,
            losses.recon.value().item() as f64,
            losses.total.value().item() as f64,
        ));

        let window_end = (step + 1) % train.revive_every.max(1) == 0;
        if window_end {
            report.dead_entries = usage.iter().filter(|&&u| u == 0).count();
            if step + 1 < train.steps {
                let rows = latents.len() / d;
                let cb = model.params.value_mut(model.codebook);
                for (e, u) in usage.iter().enumerate() {
                    if *u == 0 {
                        let r = data_gen.below(rows);
                        cb.data_mut()[e * d..(e + 1) * d]
                            .copy_from_slice(&latents.data()[r * d..(r + 1) * d]);
                        report.revived += 1;
                    }
                }
            }
            usage.iter_mut().for_each(|u| *u = 0);
        }
    }
    if train.steps % train.revive_every.max(1) != 0 {
        report.dead_entries = usage.iter().filter(|&&u| u == 0).count();
    }
    report.final_recon = probe_recon(&model, &probe)?;
    if let Some(dir) = checkpoint {
        model.save(dir)?;
    }
    Ok((model, report))
}
