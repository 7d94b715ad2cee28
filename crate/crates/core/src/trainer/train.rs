use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::config::KvConfig;
use crate::harness::synth::Split;
use crate::model::{MaskVit, TokenGrid};
use crate::rng::{splitmix64, Generator};
use crate::tensor::{clip_grad_norm, Adam, Array, LrSchedule, Scalar, Tape, Var};

use super::corpus::TokenCorpus;
use super::mask::{sample_mask, MaskMode, MaskPlan};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conditioning {
    None,
    Action,
    /// The final frame is given as context and never masked.
    Goal,
}

impl std::str::FromStr for Conditioning {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "none" => Ok(Conditioning::None),
            "action" => Ok(Conditioning::Action),
            "goal" => Ok(Conditioning::Goal),
            other => Err(format!("unknown conditioning `{other}` (none|action|goal)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    pub warmup: u64,
    pub conditioning: Conditioning,
    pub context_frames: usize,
    /// Overrides the variable ratio when set.
    pub fixed_ratio: Option<f64>,
    pub seed: u64,
    pub log_every: u64,
    /// Mask ratio of the held-out NLL probe.
    pub eval_ratio: f64,
    /// Validation clips used by the periodic probe (0 = all).
    pub eval_clips: usize,
    pub checkpoint_every: u64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            steps: 5000,
            lr: 3e-4,
            warmup: 200,
            conditioning: Conditioning::None,
            context_frames: 2,
            fixed_ratio: None,
            seed: 0,
            log_every: 100,
            eval_ratio: 0.95,
            eval_clips: 32,
            checkpoint_every: 0,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn take_from(kv: &mut KvConfig) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            batch_size: kv.take_or("batch_size", d.batch_size)?,
            steps: kv.take_or("steps", d.steps)?,
            lr: kv.take_or("lr", d.lr)?,
            warmup: kv.take_or("warmup", d.warmup)?,
            conditioning: kv.take_or("conditioning", d.conditioning)?,
            context_frames: kv.take_or("context_frames", d.context_frames)?,
            fixed_ratio: kv.take("fixed_ratio")?,
            seed: kv.take_or("seed", d.seed)?,
            log_every: kv.take_or("log_every", d.log_every)?,
            eval_ratio: kv.take_or("eval_ratio", d.eval_ratio)?,
            eval_clips: kv.take_or("eval_clips", d.eval_clips)?,
            checkpoint_every: kv.take_or("checkpoint_every", d.checkpoint_every)?,
            clip_norm: kv.take_or("clip_norm", d.clip_norm)?,
        };
        cfg.mask_mode()?;
        Ok(cfg)
    }

    pub fn mask_mode(&self) -> Result<MaskMode> {
        match self.fixed_ratio {
            Some(r) => MaskMode::fixed(r),
            None => Ok(MaskMode::Variable),
        }
    }
}

/// Input grid with the plan's positions replaced by `[MASK]`.
pub fn apply_plan(video: &[usize], plan: &MaskPlan, mask_token: usize) -> Vec<usize> {
    let mut out = video.to_vec();
    for &p in &plan.positions {
        out[p] = mask_token;
    }
    out
}

/// Positions eligible for masking: every position after the context frames,
/// minus the final frame under goal conditioning.
pub fn future_positions(frames: usize, frame_tokens: usize, context: usize, goal: bool) -> Vec<usize> {
    let end = if goal { frames - 1 } else { frames };
    (context * frame_tokens..end * frame_tokens).collect()
}

/// Mean negative log-likelihood of the ground-truth tokens over the masked
/// positions of every video in the batch. `videos` holds `B` ground-truth grids.
pub fn mvm_loss<S: Scalar>(
    model: &MaskVit<S>,
    tape: &Tape<S>,
    videos: &[&[usize]],
    plans: &[MaskPlan],
    actions: Option<&Array<S>>,
    dropout: Option<&mut Generator>,
) -> Result<Var<S>> {
    let n = model.config().geometry().tokens();
    let mut inputs = Vec::with_capacity(videos.len() * n);
    let mut targets = Vec::with_capacity(videos.len() * n);
    let mut selected = vec![false; videos.len() * n];
    for (b, (v, plan)) in videos.iter().zip(plans).enumerate() {
        if v.len() != n {
            return Err(Error::InvalidShape(format!("video of {} tokens, model expects {n}", v.len())));
        }
        inputs.extend(apply_plan(v, plan, model.config().mask_token()));
        targets.extend_from_slice(v);
        for &p in &plan.positions {
            selected[b * n + p] = true;
        }
    }
    let logits = model.forward(tape, &inputs, videos.len(), actions, dropout)?;
    logits.cross_entropy(&targets, &selected)
}

/// One CSV metrics row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    /// Held-out masked NLL at `eval_ratio`.
    pub masked_nll: f64,
}

pub const METRICS_HEADER: &str = "step,loss,lr,masked_nll";

impl MetricRow {
    pub fn csv(&self) -> String {
        format!("{},{:.6},{:.6e},{:.6}", self.step, self.loss, self.lr, self.masked_nll)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// Training loss of every step.
    pub losses: Vec<f64>,
    pub metrics: Vec<MetricRow>,
    pub initial_val_nll: f64,
    pub final_val_nll: f64,
}

/// Deterministic evaluation plan for clip `clip`: the same positions for every
/// model evaluated with the same `(seed, ratio)`.
pub fn eval_plan(seed: u64, clip: usize, candidates: &[usize], ratio: f64) -> Result<MaskPlan> {
    let mut gen = Generator::new(splitmix64(seed ^ splitmix64(clip as u64 + 0x9e37)));
    Ok(sample_mask(&mut gen, candidates, MaskMode::fixed(ratio)?))
}

/// Mean masked NLL over `clips` under fixed-ratio evaluation plans (averaged per masked token).
pub fn masked_nll<S: Scalar>(
    model: &MaskVit<S>,
    corpus: &TokenCorpus,
    clips: &[usize],
    conditioning: Conditioning,
    context: usize,
    ratio: f64,
    seed: u64,
) -> Result<f64> {
    let g = corpus.geometry;
    let cands = future_positions(g.frames, g.frame_tokens(), context, conditioning == Conditioning::Goal);
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in clips.chunks(8) {
        let plans: Vec<MaskPlan> = chunk
            .iter()
            .map(|&c| eval_plan(seed, c, &cands, ratio))
            .collect::<Result<_>>()?;
        let videos: Vec<&[usize]> = chunk.iter().map(|&c| corpus.videos[c].as_slice()).collect();
        let actions = if conditioning == Conditioning::Action {
            corpus.action_batch(chunk).map(|a| a.cast::<S>())
        } else {
            None
        };
        let tape = Tape::no_grad();
        let loss = mvm_loss(model, &tape, &videos, &plans, actions.as_ref(), None)?;
        let masked: usize = plans.iter().map(|p| p.positions.len()).sum();
        total += loss.value().item().as_f64() * masked as f64;
        count += masked;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Masked-visual-modeling training loop.
///
/// Writes one CSV row per `log_every` steps to `metrics` and, with
/// `checkpoint_every > 0`, periodic checkpoints under `checkpoint_dir`.
pub fn train(
    model: &mut MaskVit,
    corpus: &TokenCorpus,
    config: &TrainConfig,
    mut metrics: Option<&mut dyn Write>,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainReport> {
    let train_idx = corpus.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let g = corpus.geometry;
    if g != model.config().geometry() || corpus.codebook_size != model.config().codebook_size {
        return Err(Error::InvalidShape("corpus geometry does not match the model".into()));
    }
    let goal = config.conditioning == Conditioning::Goal;
    if config.context_frames + usize::from(goal) >= g.frames {
        return Err(Error::Config("no future frames left to predict".into()));
    }
    let use_actions = config.conditioning == Conditioning::Action;
    if use_actions && (corpus.actions.is_none() || corpus.action_dim() != model.config().action_dim) {
        return Err(Error::Config("action conditioning needs matching per-frame actions".into()));
    }
    let mode = config.mask_mode()?;
    let candidates = future_positions(g.frames, g.frame_tokens(), config.context_frames, goal);
    let mut val_idx = corpus.indices(Split::Val);
    if config.eval_clips > 0 {
        val_idx.truncate(config.eval_clips);
    }
    let probe = |m: &MaskVit| -> Result<f64> {
        if val_idx.is_empty() {
            return Ok(f64::NAN);
        }
        masked_nll(m, corpus, &val_idx, config.conditioning, config.context_frames, config.eval_ratio, config.seed)
    };

    let mut root = Generator::new(config.seed);
    let mut batch_gen = root.fork(1);
    let mut mask_gen = root.fork(2);
    let mut drop_gen = root.fork(3);
    let mut report = TrainReport {
        initial_val_nll: probe(model)?,
        ..Default::default()
    };
    if let Some(w) = metrics.as_deref_mut() {
        writeln!(w, "{METRICS_HEADER}")?;
    }
    let mut adam = Adam::new(
        model.params(),
        LrSchedule {
            base: config.lr,
            warmup: config.warmup,
            total: config.steps,
        },
    );
    for step in 1..=config.steps {
        let clips: Vec<usize> = (0..config.batch_size)
            .map(|_| train_idx[batch_gen.below(train_idx.len())])
            .collect();
        let plans: Vec<MaskPlan> = clips.iter().map(|_| sample_mask(&mut mask_gen, &candidates, mode)).collect();
        let videos: Vec<&[usize]> = clips.iter().map(|&c| corpus.videos[c].as_slice()).collect();
        let actions = if use_actions { corpus.action_batch(&clips) } else { None };
        let tape = Tape::new();
        let loss = mvm_loss(model, &tape, &videos, &plans, actions.as_ref(), Some(&mut drop_gen))?;
        tape.backward(&loss)?;
        tape.accumulate_into(model.params_mut());
        if config.clip_norm > 0.0 {
            clip_grad_norm(model.params_mut(), config.clip_norm);
        }
        let lr = adam.next_lr();
        adam.step(model.params_mut());
        model.step += 1;
        let l = loss.value().item() as f64;
        report.losses.push(l);
        if config.log_every > 0 && (step % config.log_every == 0 || step == config.steps) {
            let row = MetricRow {
                step,
                loss: l,
                lr,
                masked_nll: probe(model)?,
            };
            if let Some(w) = metrics.as_deref_mut() {
                writeln!(w, "{}", row.csv())?;
            }
            report.metrics.push(row);
        }
        if let Some(dir) = checkpoint_dir {
            if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
                model.save(&dir.join(format!("step_{step:06}")))?;
            }
        }
    }
    report.final_val_nll = probe(model)?;
    if let Some(dir) = checkpoint_dir {
        model.save(dir)?;
    }
    Ok(report)
}

/// Grid with the context frames of `video` and everything else masked.
pub fn context_grid(corpus: &TokenCorpus, clip: usize, context: usize, goal: bool) -> Result<TokenGrid> {
    TokenGrid::with_masked_future(corpus.geometry, corpus.codebook_size, context, goal, &corpus.videos[clip])
}
