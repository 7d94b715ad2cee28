//! Best-of-S video prediction evaluation against a copy-last-frame baseline.

use std::io::Write;

use crate::decoder::{iterative_decode_batch, MaskSchedule};
use crate::error::{Error, Result};
use crate::model::{MaskVit, TokenGrid};
use crate::rng::{splitmix64, Generator};
use crate::tensor::Array;
use crate::tokenizer::TokenizerModel;
use crate::trainer::{masked_nll, Conditioning, TokenCorpus};

use super::metrics::{psnr, ssim, video_metric};
use super::synth::VideoDataset;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalProtocol {
    pub context_frames: usize,
    /// Decoding trials per video; the best score over trials is reported.
    pub trials: usize,
    pub schedule: MaskSchedule,
    pub conditioning: Conditioning,
    /// Mask ratio of the masked-NLL column.
    pub nll_ratio: f64,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            context_frames: 2,
            trials: 1,
            schedule: MaskSchedule::default(),
            conditioning: Conditioning::None,
            nll_ratio: 0.95,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoScore {
    pub clip: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub copy_last_psnr: f64,
    pub copy_last_ssim: f64,
    pub masked_nll: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub videos: Vec<VideoScore>,
}

pub const EVAL_HEADER: &str = "clip,psnr,ssim,copy_last_psnr,copy_last_ssim,masked_nll";

impl EvalReport {
    fn mean(&self, f: impl Fn(&VideoScore) -> f64) -> f64 {
        self.videos.iter().map(f).sum::<f64>() / self.videos.len().max(1) as f64
    }

    pub fn mean_psnr(&self) -> f64 {
        self.mean(|v| v.psnr)
    }

    pub fn mean_ssim(&self) -> f64 {
        self.mean(|v| v.ssim)
    }

    pub fn mean_copy_last_psnr(&self) -> f64 {
        self.mean(|v| v.copy_last_psnr)
    }

    pub fn mean_copy_last_ssim(&self) -> f64 {
        self.mean(|v| v.copy_last_ssim)
    }

    pub fn mean_masked_nll(&self) -> f64 {
        self.mean(|v| v.masked_nll)
    }

    /// One row per clip and a final `mean` row.
    pub fn write_csv(&self, out: &mut dyn Write) -> Result<()> {
        writeln!(out, "{EVAL_HEADER}")?;
        for v in &self.videos {
            writeln!(
                out,
                "{},{:.4},{:.5},{:.4},{:.5},{:.5}",
                v.clip, v.psnr, v.ssim, v.copy_last_psnr, v.copy_last_ssim, v.masked_nll
            )?;
        }
        writeln!(
            out,
            "mean,{:.4},{:.5},{:.4},{:.5},{:.5}",
            self.mean_psnr(),
            self.mean_ssim(),
            self.mean_copy_last_psnr(),
            self.mean_copy_last_ssim(),
            self.mean_masked_nll()
        )?;
        Ok(())
    }
}

fn frames_slice(video: &Array, from: usize, to: usize) -> Array {
    let s = video.shape();
    let per: usize = s[1..].iter().product();
    let mut shape = s.to_vec();
    shape[0] = to - from;
    Array::new(shape, video.data()[from * per..to * per].to_vec()).expect("frame range")
}

/// Repeats frame `index` of `video` `count` times.
pub fn repeat_frame(video: &Array, index: usize, count: usize) -> Array {
    let s = video.shape();
    let per: usize = s[1..].iter().product();
    let frame = &video.data()[index * per..(index + 1) * per];
    let mut shape = s.to_vec();
    shape[0] = count;
    Array::new(shape, frame.repeat(count)).expect("frame repeat")
}

/// Scores predicted frames (after the context, and before the goal frame under
/// goal conditioning) of every listed clip.
pub fn evaluate(
    model: &MaskVit,
    tokenizer: &TokenizerModel,
    videos: &VideoDataset,
    corpus: &TokenCorpus,
    clips: &[usize],
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    if protocol.trials == 0 {
        return Err(Error::invalid("evaluation needs at least one trial"));
    }
    let geo = corpus.geometry;
    let goal = protocol.conditioning == Conditioning::Goal;
    let tc = protocol.context_frames;
    let end = if goal { geo.frames - 1 } else { geo.frames };
    if tc == 0 || tc >= end {
        return Err(Error::invalid("evaluation needs at least one context and one predicted frame"));
    }
    let mut report = EvalReport::default();
    for &clip in clips {
        let truth = frames_slice(&videos.clips[clip], tc, end);
        let context = TokenGrid::with_masked_future(geo, corpus.codebook_size, tc, goal, &corpus.videos[clip])?;
        let actions = if protocol.conditioning == Conditioning::Action {
            let one = corpus
                .action_batch(&[clip])
                .ok_or_else(|| Error::invalid("action conditioning without actions"))?;
            let a = one.last_dim();
            Some(Array::new(vec![protocol.trials, geo.frames, a], one.data().repeat(protocol.trials))?)
        } else {
            None
        };
        let mut gen = Generator::new(splitmix64(protocol.seed ^ splitmix64(clip as u64)));
        let out = iterative_decode_batch(
            model,
            vec![context; protocol.trials],
            &protocol.schedule,
            actions.as_ref(),
            &mut gen,
        )?;
        let (mut best_psnr, mut best_ssim) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for grid in &out.grids {
            let per = geo.frame_tokens();
            let pred_tokens = &grid.indices[tc * per..end * per];
            let pred = tokenizer.decode(pred_tokens, end - tc, geo.height, geo.width)?;
            best_psnr = best_psnr.max(video_metric(&pred, &truth, psnr)?);
            best_ssim = best_ssim.max(video_metric(&pred, &truth, ssim)?);
        }
        let copy = repeat_frame(&videos.clips[clip], tc - 1, end - tc);
        report.videos.push(VideoScore {
            clip,
            psnr: best_psnr,
            ssim: best_ssim,
            copy_last_psnr: video_metric(&copy, &truth, psnr)?,
            copy_last_ssim: video_metric(&copy, &truth, ssim)?,
            masked_nll: masked_nll(model, corpus, &[clip], protocol.conditioning, tc, protocol.nll_ratio, protocol.seed)?,
        });
    }
    Ok(report)
}
