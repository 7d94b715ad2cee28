//! Scoring candidate action sequences by predicted rollouts, and the
//! plan/execute loop.

use crate::decoder::{iterative_decode_batch, MaskSchedule};
use crate::error::{Error, Result};
use crate::model::{MaskVit, TokenGrid};
use crate::rng::Generator;
use crate::tensor::Array;
use crate::tokenizer::TokenizerModel;

use super::cem::{action_row, cem_optimize, sample_correlated_actions, ActionSequence, CemOutcome, PlannerConfig};
use super::env::{PushEnv, PushState, PushTask};

/// Context frames a predictor conditions on.
pub const CONTEXT_FRAMES: usize = 2;

/// What the planner knows when it plans.
#[derive(Clone, Debug)]
pub struct PlanContext {
    /// The two most recent frames, `[2, S, S, 3]`.
    pub frames: Array,
    /// The action that produced the most recent frame.
    pub last_action: Vec<f64>,
    /// True environment state; only privileged predictors may read it.
    pub state: PushState,
}

/// Predicts the `H` frames that follow the context under each candidate.
pub trait RolloutPredictor {
    /// One `[H, S, S, 3]` array per candidate.
    fn rollouts(&self, ctx: &PlanContext, candidates: &[ActionSequence], gen: &mut Generator) -> Result<Vec<Array>>;
}

/// Uses the environment's own dynamics and renderer.
pub struct OraclePredictor {
    pub env: PushEnv,
}

impl RolloutPredictor for OraclePredictor {
    fn rollouts(&self, ctx: &PlanContext, candidates: &[ActionSequence], _gen: &mut Generator) -> Result<Vec<Array>> {
        candidates
            .iter()
            .map(|c| {
                let rows: Vec<Vec<f64>> = (0..c.shape()[0]).map(|i| action_row(c, i)).collect();
                let (frames, _) = self.env.rollout(&ctx.state, &rows);
                let s = self.env.config.frame_size;
                let per = s * s * 3;
                Array::new(vec![rows.len(), s, s, 3], frames.data()[per..].to_vec())
            })
            .collect()
    }
}

/// Action-conditioned rollouts: tokenize the context, decode the future with
/// iterative decoding, detokenize.
///
/// Frame `t` of the model input carries the action that produced it; frame 0
/// carries zeros.
pub struct LearnedPredictor<'a> {
    pub model: &'a MaskVit,
    pub tokenizer: &'a TokenizerModel,
    pub schedule: MaskSchedule,
    /// Candidates decoded per batched forward pass.
    pub batch: usize,
}

impl RolloutPredictor for LearnedPredictor<'_> {
    fn rollouts(&self, ctx: &PlanContext, candidates: &[ActionSequence], gen: &mut Generator) -> Result<Vec<Array>> {
        let cfg = self.model.config();
        let geo = cfg.geometry();
        let Some(first) = candidates.first() else {
            return Ok(Vec::new());
        };
        let (h, a) = (first.shape()[0], first.shape()[1]);
        if geo.frames != CONTEXT_FRAMES + h || cfg.action_dim != a {
            return Err(Error::InvalidShape(format!(
                "model of {} frames and {} action dims cannot roll out {h} steps of {a}-dim actions",
                geo.frames, cfg.action_dim
            )));
        }
        let tokens = self.tokenizer.tokenize(&ctx.frames)?;
        let grid = TokenGrid::with_masked_future(geo, cfg.codebook_size, CONTEXT_FRAMES, false, &tokens)?;
        let per = geo.frame_tokens();
        let mut out = Vec::with_capacity(candidates.len());
        for chunk in candidates.chunks(self.batch.max(1)) {
            let mut actions = Vec::with_capacity(chunk.len() * geo.frames * a);
            for c in chunk {
                if c.shape() != first.shape() {
                    return Err(Error::invalid("candidates differ in shape"));
                }
                actions.extend(std::iter::repeat_n(0.0f32, a));
                actions.extend(ctx.last_action.iter().map(|&v| v as f32));
                actions.extend(c.data().iter().map(|&v| v as f32));
            }
            let actions = Array::new(vec![chunk.len(), geo.frames, a], actions)?;
            let decoded = iterative_decode_batch(
                self.model,
                vec![grid.clone(); chunk.len()],
                &self.schedule,
                Some(&actions),
                gen,
            )?;
            for g in &decoded.grids {
                out.push(self.tokenizer.decode(&g.indices[CONTEXT_FRAMES * per..], h, geo.height, geo.width)?);
            }
        }
        Ok(out)
    }
}

/// `Σ_i c_i ‖frame_i − goal‖²` for each rollout.
pub fn rollout_costs(rollouts: &[Array], goal: &Array, weights: &[f64]) -> Result<Vec<f64>> {
    rollouts
        .iter()
        .map(|r| {
            let per = goal.len();
            if r.len() != weights.len() * per || r.shape()[1..] != *goal.shape() {
                return Err(Error::ShapeMismatch {
                    op: "rollout_costs",
                    left: r.shape().to_vec(),
                    right: goal.shape().to_vec(),
                });
            }
            Ok(weights
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let sq: f64 = r.data()[i * per..(i + 1) * per]
                        .iter()
                        .zip(goal.data())
                        .map(|(&x, &g)| (x as f64 - g as f64).powi(2))
                        .sum();
                    c * sq
                })
                .sum())
        })
        .collect()
}

pub fn score_candidates(
    predictor: &dyn RolloutPredictor,
    ctx: &PlanContext,
    candidates: &[ActionSequence],
    goal: &Array,
    weights: &[f64],
    gen: &mut Generator,
) -> Result<Vec<f64>> {
    let rollouts = predictor.rollouts(ctx, candidates, gen)?;
    rollout_costs(&rollouts, goal, weights)
}

pub fn cem_plan(
    predictor: &dyn RolloutPredictor,
    ctx: &PlanContext,
    goal: &Array,
    config: &PlannerConfig,
    gen: &mut Generator,
) -> Result<CemOutcome> {
    cem_optimize(config, gen, |cands, g| {
        score_candidates(predictor, ctx, cands, goal, &config.cost_weights, g)
    })
}

pub enum Policy<'a> {
    /// Actions drawn from the initial sampling distribution.
    Random,
    Cem(&'a dyn RolloutPredictor),
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub success: bool,
    pub final_distance: f64,
    /// Executed frames `[total_steps + 1, S, S, 3]`, the start frame first.
    pub frames: Array,
    pub actions: Vec<Vec<f64>>,
    /// Best sequence of every planning round and the context it was planned from.
    pub plans: Vec<(PlanContext, ActionSequence)>,
    /// Wall-clock seconds of every CEM iteration.
    pub iteration_seconds: Vec<f64>,
}

/// Executes the initial action, then alternates planning and executing the
/// first `replan_every` planned actions until `total_steps` actions ran.
pub fn run_episode(
    env: &PushEnv,
    task: &PushTask,
    policy: &Policy,
    config: &PlannerConfig,
    gen: &mut Generator,
) -> Result<Episode> {
    config.validate()?;
    let s = env.config.frame_size;
    let per = s * s * 3;
    let mut state = task.start;
    let mut frames = env.render(&state).into_data();
    let mut actions = Vec::with_capacity(config.total_steps);
    let mut plans = Vec::new();
    let mut seconds = Vec::new();
    let execute = |state: &mut PushState, a: Vec<f64>, frames: &mut Vec<f32>, actions: &mut Vec<Vec<f64>>| {
        *state = env.step(state, &a);
        frames.extend(env.render(state).into_data());
        actions.push(a);
    };
    execute(&mut state, config.initial_action.clone(), &mut frames, &mut actions);
    match policy {
        Policy::Random => {
            let rest = config.total_steps - 1;
            if rest > 0 {
                let a = config.action_dim();
                let mean = Array::new(vec![rest, a], config.init_mean.repeat(rest))?;
                let var = Array::new(vec![rest, a], config.init_var.repeat(rest))?;
                let draw = sample_correlated_actions(gen, &mean, &var, config.beta, 1, config.gripper_dim)?;
                for i in 0..rest {
                    execute(&mut state, action_row(&draw.actions[0], i), &mut frames, &mut actions);
                }
            }
        }
        Policy::Cem(predictor) => {
            let goal = env.render_goal(task.goal);
            let mut done = 1;
            while done < config.total_steps {
                let n = frames.len() / per;
                let ctx = PlanContext {
                    frames: Array::new(vec![2, s, s, 3], frames[(n - 2) * per..].to_vec())?,
                    last_action: actions.last().cloned().expect("initial action"),
                    state,
                };
                let outcome = cem_plan(*predictor, &ctx, &goal, config, gen)?;
                let k = config.replan_every.min(config.total_steps - done);
                for i in 0..k {
                    execute(&mut state, action_row(&outcome.best, i), &mut frames, &mut actions);
                }
                done += k;
                seconds.extend(outcome.iteration_seconds);
                plans.push((ctx, outcome.best));
            }
        }
    }
    let count = frames.len() / per;
    Ok(Episode {
        success: env.is_success(&state, task.goal),
        final_distance: env.goal_distance(&state, task.goal),
        frames: Array::new(vec![count, s, s, 3], frames)?,
        actions,
        plans,
        iteration_seconds: seconds,
    })
}
