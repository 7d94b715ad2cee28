//! Visual model-predictive control: the cross-entropy method over action
//! sequences, scored by predicted rollouts against a goal image, on a
//! synthetic planar pushing task.

mod cem;
mod env;
mod mpc;

pub use cem::{
    action_row, cem_optimize, elite_indices, refit, round_gripper, sample_correlated_actions, ActionSequence,
    CemOutcome, CorrelatedSample, PlannerConfig,
};
pub use env::{generate_push_dataset, push_clip, PushEnv, PushEnvConfig, PushState, PushTask, ACTION_DIM};
pub use mpc::{
    cem_plan, rollout_costs, run_episode, score_candidates, Episode, LearnedPredictor, OraclePredictor, PlanContext,
    Policy, RolloutPredictor, CONTEXT_FRAMES,
};
