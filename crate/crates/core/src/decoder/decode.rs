use std::cell::Cell;

use crate::error::{Error, Result};
use crate::model::{MaskVit, TokenGrid};
use crate::rng::Generator;
use crate::tensor::Array;

use super::schedule::MaskSchedule;

/// Anything that maps a batch of (partially masked) grids to logits
/// `[B, T, h, w, K]`.
pub trait TokenPredictor {
    fn predict(&self, grids: &[&TokenGrid], actions: Option<&Array>) -> Result<Array>;
}

impl TokenPredictor for MaskVit {
    fn predict(&self, grids: &[&TokenGrid], actions: Option<&Array>) -> Result<Array> {
        self.logits(grids, actions)
    }
}

/// Wraps a predictor and counts batched forward passes.
pub struct CountingPredictor<'a, P: TokenPredictor + ?Sized> {
    inner: &'a P,
    calls: Cell<usize>,
}

impl<'a, P: TokenPredictor + ?Sized> CountingPredictor<'a, P> {
    pub fn new(inner: &'a P) -> Self {
        Self {
            inner,
            calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl<P: TokenPredictor + ?Sized> TokenPredictor for CountingPredictor<'_, P> {
    fn predict(&self, grids: &[&TokenGrid], actions: Option<&Array>) -> Result<Array> {
        self.calls.set(self.calls.get() + 1);
        self.inner.predict(grids, actions)
    }
}

/// Progress of one video through iterative decoding.
#[derive(Clone, Debug)]
pub struct DecodeState {
    pub grid: TokenGrid,
    /// Positions whose token is final (conditioning frames included).
    pub kept: Vec<bool>,
    /// Decoding steps completed.
    pub step: usize,
    /// Confidence of each position's sample in the latest step (`-inf` where not sampled).
    pub confidence: Vec<f64>,
}

impl DecodeState {
    pub fn new(grid: TokenGrid) -> Result<Self> {
        grid.validate()?;
        let mask = grid.mask_token();
        let kept: Vec<bool> = grid.indices.iter().map(|&t| t != mask).collect();
        let n = grid.len();
        Ok(Self {
            grid,
            kept,
            step: 0,
            confidence: vec![f64::NEG_INFINITY; n],
        })
    }

    pub fn kept_count(&self) -> usize {
        self.kept.iter().filter(|&&k| k).count()
    }

    pub fn is_complete(&self) -> bool {
        self.kept.iter().all(|&k| k)
    }
}

/// Keeps the `p` mass of a distribution: the smallest set of most likely tokens
/// whose cumulative probability reaches `p`, renormalized.
pub fn top_p_filter(probs: &mut [f64], p: f64) {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut cum = 0.0;
    let mut cut = order.len();
    for (i, &k) in order.iter().enumerate() {
        cum += probs[k];
        if cum >= p {
            cut = i + 1;
            break;
        }
    }
    for &k in &order[cut..] {
        probs[k] = 0.0;
    }
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|x| *x /= z);
}

fn softmax_row(row: &[f32]) -> Vec<f64> {
    let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let e: Vec<f64> = row.iter().map(|&x| (x as f64 - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn sample(probs: &[f64], gen: &mut Generator) -> usize {
    let u = gen.uniform();
    let mut cum = 0.0;
    let mut last = 0;
    for (k, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            cum += p;
            last = k;
            if u < cum {
                return k;
            }
        }
    }
    last
}

/// One decoding step for one video.
///
/// `logits` is `[N, K]` for all grid positions. At every position not yet kept a
/// token is sampled and scored by `log p + τ·(1 − t/T)·g`, `g ~ Gumbel(0, 1)`.
/// The highest-scoring `N_f − n_{t+1} − kept_f` new positions are kept (ties
/// broken by position), where `N_f` counts predictable positions; the rest
/// return to `[MASK]`.
pub fn select_tokens(logits: &[f32], state: &mut DecodeState, schedule: &MaskSchedule, gen: &mut Generator) -> Result<()> {
    schedule.validate()?;
    let n = state.grid.len();
    let k = state.grid.codebook_size;
    if logits.len() != n * k {
        return Err(Error::InvalidShape(format!(
            "{} logits for {n} positions of {k} classes",
            logits.len()
        )));
    }
    let t = state.step;
    if t >= schedule.iterations {
        return Err(Error::invalid("decoding already finished"));
    }
    let predictable: Vec<usize> = state.grid.predicted_positions();
    let total = predictable.len();
    let kept_pred = predictable.iter().filter(|&&p| state.kept[p]).count();
    let still_masked = schedule.tokens_to_mask(t + 1, total)?;
    let quota = total.saturating_sub(still_masked).saturating_sub(kept_pred);
    let noise_scale = schedule.temperature * (1.0 - t as f64 / schedule.iterations as f64);

    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for p in 0..n {
        if state.kept[p] {
            continue;
        }
        let mut probs = softmax_row(&logits[p * k..(p + 1) * k]);
        if let Some(top) = schedule.top_p {
            top_p_filter(&mut probs, top);
        }
        let token = sample(&probs, gen);
        let mut conf = probs[token].ln();
        if noise_scale > 0.0 {
            conf += noise_scale * gen.gumbel();
        }
        state.confidence[p] = conf;
        candidates.push((conf, p, token));
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mask = state.grid.mask_token();
    for (i, &(_, p, token)) in candidates.iter().enumerate() {
        if i < quota {
            state.kept[p] = true;
            state.grid.indices[p] = token;
        } else {
            state.grid.indices[p] = mask;
        }
    }
    state.step += 1;
    Ok(())
}

/// Result of decoding a batch.
#[derive(Clone, Debug)]
pub struct DecodeOutput {
    pub grids: Vec<TokenGrid>,
    /// Batched forward passes issued (one per iteration).
    pub forward_passes: usize,
    /// New positions kept at each step, per video.
    pub kept_per_step: Vec<Vec<usize>>,
}

/// Iterative decoding of a batch of grids whose future positions are `[MASK]`.
///
/// Runs exactly `schedule.iterations` batched forward passes. Video `b` draws
/// its randomness from `gen.fork(b)`.
pub fn iterative_decode_batch<P: TokenPredictor + ?Sized>(
    model: &P,
    grids: Vec<TokenGrid>,
    schedule: &MaskSchedule,
    actions: Option<&Array>,
    gen: &mut Generator,
) -> Result<DecodeOutput> {
    schedule.validate()?;
    let mut states: Vec<DecodeState> = grids.into_iter().map(DecodeState::new).collect::<Result<_>>()?;
    let mut gens: Vec<Generator> = (0..states.len()).map(|b| gen.fork(b as u64)).collect();
    let mut kept_per_step = vec![Vec::with_capacity(schedule.iterations); states.len()];
    let mut passes = 0;
    for _ in 0..schedule.iterations {
        let refs: Vec<&TokenGrid> = states.iter().map(|s| &s.grid).collect();
        let logits = model.predict(&refs, actions)?;
        passes += 1;
        let per = logits.len() / states.len().max(1);
        for (b, state) in states.iter_mut().enumerate() {
            let before = state.kept_count();
            select_tokens(&logits.data()[b * per..(b + 1) * per], state, schedule, &mut gens[b])?;
            kept_per_step[b].push(state.kept_count() - before);
        }
    }
    debug_assert!(states.iter().all(DecodeState::is_complete));
    Ok(DecodeOutput {
        grids: states.into_iter().map(|s| s.grid).collect(),
        forward_passes: passes,
        kept_per_step,
    })
}

/// Decodes one video; see [`iterative_decode_batch`].
pub fn iterative_decode<P: TokenPredictor + ?Sized>(
    model: &P,
    context: TokenGrid,
    schedule: &MaskSchedule,
    actions: Option<&Array>,
    gen: &mut Generator,
) -> Result<TokenGrid> {
    let mut out = iterative_decode_batch(model, vec![context], schedule, actions, gen)?;
    Ok(out.grids.remove(0))
}

/// Forward passes needed to generate `T_p × h × w` tokens.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardPassCount {
    /// One pass per generated token.
    pub autoregressive: usize,
    /// One pass per decoding iteration.
    pub iterative: usize,
    pub speedup: f64,
}

pub fn count_forward_passes(frames: usize, h: usize, w: usize, iterations: usize) -> Result<ForwardPassCount> {
    if frames == 0 || h == 0 || w == 0 || iterations == 0 {
        return Err(Error::invalid("forward-pass accounting needs positive extents"));
    }
    let autoregressive = frames * h * w;
    Ok(ForwardPassCount {
        autoregressive,
        iterative: iterations,
        speedup: autoregressive as f64 / iterations as f64,
    })
}
