//! Planar pushing environment: a point effector and one circular object.

use crate::error::{Error, Result};
use crate::harness::config::KvConfig;
use crate::harness::synth::{render_discs, Split, VideoDataset};
use crate::planner::cem::{sample_correlated_actions, PlannerConfig};
use crate::rng::{splitmix64, Generator};
use crate::tensor::Array;

/// Action length: `[Δx, Δy, Δz, Δθ, gripper]`. Only the planar translation
/// moves the effector; the remaining dims are carried for interface parity.
pub const ACTION_DIM: usize = 5;

const OBJECT_COLOR: [f32; 3] = [0.95, 0.3, 0.2];
const EFFECTOR_COLOR: [f32; 3] = [0.3, 0.9, 0.95];
const BACKGROUND: [f32; 3] = [0.05, 0.05, 0.05];

#[derive(Clone, Debug, PartialEq)]
pub struct PushEnvConfig {
    pub frame_size: usize,
    pub object_radius: f64,
    pub effector_radius: f64,
    /// Effector displacement per unit of `(Δx, Δy)`.
    pub action_scale: f64,
    /// Largest effector displacement per step (Euclidean).
    pub max_step: f64,
    /// Distance between the object's start and its goal.
    pub goal_offset: f64,
    /// Free space between effector and object at the start of a task.
    pub start_gap: f64,
    /// Success radius around the goal, in workspace units (workspace extent 1).
    pub success_threshold: f64,
}

impl Default for PushEnvConfig {
    fn default() -> Self {
        Self {
            frame_size: 16,
            object_radius: 0.15,
            effector_radius: 0.06,
            action_scale: 0.25,
            max_step: 0.06,
            goal_offset: 0.25,
            start_gap: 0.02,
            success_threshold: 0.08,
        }
    }
}

impl PushEnvConfig {
    pub fn take_from(kv: &mut KvConfig) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            frame_size: kv.take_or("frame_size", d.frame_size)?,
            object_radius: kv.take_or("object_radius", d.object_radius)?,
            effector_radius: kv.take_or("effector_radius", d.effector_radius)?,
            action_scale: kv.take_or("action_scale", d.action_scale)?,
            max_step: kv.take_or("max_step", d.max_step)?,
            goal_offset: kv.take_or("goal_offset", d.goal_offset)?,
            start_gap: kv.take_or("start_gap", d.start_gap)?,
            success_threshold: kv.take_or("success_threshold", d.success_threshold)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let reach = self.object_radius + self.effector_radius + self.start_gap;
        if self.frame_size == 0 || !(self.object_radius > 0.0) || !(self.effector_radius > 0.0) {
            return Err(Error::Config("push env needs positive frame size and radii".into()));
        }
        if !(self.max_step > 0.0 && self.action_scale > 0.0 && self.success_threshold > 0.0) {
            return Err(Error::Config("push env needs positive step, scale and threshold".into()));
        }
        // Start, goal and effector must fit in the unit square along any direction.
        if 2.0 * (self.goal_offset.max(reach) + self.object_radius) >= 1.0 {
            return Err(Error::Config("push task does not fit in the workspace".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PushState {
    pub effector: [f64; 2],
    pub object: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PushTask {
    pub start: PushState,
    pub goal: [f64; 2],
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PushEnv {
    pub config: PushEnvConfig,
}

impl PushEnv {
    pub fn new(config: PushEnvConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    /// Effector displacement for `action`: scaled `(Δx, Δy)`, shortened to `max_step`.
    pub fn displacement(&self, action: &[f64]) -> [f64; 2] {
        let c = &self.config;
        let (dx, dy) = (action[0] * c.action_scale, action[1] * c.action_scale);
        let n = (dx * dx + dy * dy).sqrt();
        if n > c.max_step {
            [dx * c.max_step / n, dy * c.max_step / n]
        } else {
            [dx, dy]
        }
    }

    /// Rigid push: the effector moves; if it then overlaps the object while
    /// moving towards it, the object is displaced by the same amount. Both stay
    /// inside the workspace.
    pub fn step(&self, state: &PushState, action: &[f64]) -> PushState {
        let c = &self.config;
        let d = self.displacement(action);
        let clamp = |p: f64, r: f64| p.clamp(r, 1.0 - r);
        let effector = [
            clamp(state.effector[0] + d[0], c.effector_radius),
            clamp(state.effector[1] + d[1], c.effector_radius),
        ];
        let moved = [effector[0] - state.effector[0], effector[1] - state.effector[1]];
        let mut object = state.object;
        let towards = moved[0] * (object[0] - effector[0]) + moved[1] * (object[1] - effector[1]);
        if dist(effector, object) < c.object_radius + c.effector_radius && towards > 0.0 {
            object = [
                clamp(object[0] + moved[0], c.object_radius),
                clamp(object[1] + moved[1], c.object_radius),
            ];
        }
        PushState { effector, object }
    }

    /// `[S, S, 3]` frame: object disc under the effector disc.
    pub fn render(&self, state: &PushState) -> Array {
        let c = &self.config;
        let img = render_discs(
            c.frame_size,
            BACKGROUND,
            &[
                (state.object[0], state.object[1], c.object_radius, OBJECT_COLOR),
                (state.effector[0], state.effector[1], c.effector_radius, EFFECTOR_COLOR),
            ],
        );
        Array::new(vec![c.frame_size, c.frame_size, 3], img).expect("frame layout")
    }

    /// Goal image: the object at `goal`, no effector.
    pub fn render_goal(&self, goal: [f64; 2]) -> Array {
        let c = &self.config;
        let img = render_discs(c.frame_size, BACKGROUND, &[(goal[0], goal[1], c.object_radius, OBJECT_COLOR)]);
        Array::new(vec![c.frame_size, c.frame_size, 3], img).expect("frame layout")
    }

    pub fn goal_distance(&self, state: &PushState, goal: [f64; 2]) -> f64 {
        dist(state.object, goal)
    }

    pub fn is_success(&self, state: &PushState, goal: [f64; 2]) -> bool {
        self.goal_distance(state, goal) < self.config.success_threshold
    }

    /// Object placed so its goal lies `goal_offset` away in a random direction,
    /// effector just behind the object on the far side from the goal.
    pub fn sample_task(&self, gen: &mut Generator) -> PushTask {
        let c = &self.config;
        let reach = c.object_radius + c.effector_radius + c.start_gap;
        let margin = c.object_radius + c.goal_offset.max(reach);
        let object = [gen.uniform_range(margin, 1.0 - margin), gen.uniform_range(margin, 1.0 - margin)];
        let theta = gen.uniform_range(0.0, std::f64::consts::TAU);
        let (s, co) = theta.sin_cos();
        PushTask {
            start: PushState {
                effector: [object[0] - reach * co, object[1] - reach * s],
                object,
            },
            goal: [object[0] + c.goal_offset * co, object[1] + c.goal_offset * s],
        }
    }

    /// Task `index` of the suite seeded by `seed`.
    pub fn task(&self, seed: u64, index: usize) -> PushTask {
        self.sample_task(&mut Generator::new(splitmix64(seed ^ splitmix64(index as u64 + 0x5eed))))
    }

    /// Frames `[T, S, S, 3]` of executing `actions` from `state`, starting with
    /// the frame of `state` itself.
    pub fn rollout(&self, state: &PushState, actions: &[Vec<f64>]) -> (Array, PushState) {
        let s = self.config.frame_size;
        let mut data = self.render(state).into_data();
        let mut st = *state;
        for a in actions {
            st = self.step(&st, a);
            data.extend(self.render(&st).into_data());
        }
        (Array::new(vec![actions.len() + 1, s, s, 3], data).expect("rollout layout"), st)
    }
}

/// Steps executed before a clip starts recording, drawn from `0..MAX_PREFIX`,
/// so that frame 0 is not always a fresh task start.
const MAX_PREFIX: usize = 6;

/// One exploratory clip: half of the clips steer the effector into the
/// object, the rest follow correlated noise from the planner's initial
/// sampling distribution. `actions[t]` produced frame `t` (`actions[0] = 0`).
pub fn push_clip(env: &PushEnv, clip_len: usize, gen: &mut Generator) -> (Array, Array) {
    let c = &env.config;
    let mut state = env.sample_task(gen).start;
    let steer = gen.uniform() < 0.5;
    let prefix = gen.below(MAX_PREFIX);
    let steps = prefix + clip_len.saturating_sub(1);
    let wander = if steer || steps == 0 {
        None
    } else {
        let p = PlannerConfig::default();
        let mean = Array::new(vec![steps, ACTION_DIM], p.init_mean.repeat(steps)).expect("mean layout");
        let var = Array::new(vec![steps, ACTION_DIM], p.init_var.repeat(steps)).expect("var layout");
        let draw = sample_correlated_actions(gen, &mean, &var, p.beta, 1, p.gripper_dim).expect("valid distribution");
        Some(draw.actions.into_iter().next().expect("one sample"))
    };
    let mut frames = Vec::with_capacity(clip_len * c.frame_size * c.frame_size * 3);
    let mut actions = vec![0.0f32; ACTION_DIM];
    for t in 0..steps {
        if t == prefix {
            frames.extend(env.render(&state).into_data());
        }
        let a: Vec<f64> = match &wander {
            Some(seq) => seq.data()[t * ACTION_DIM..(t + 1) * ACTION_DIM].to_vec(),
            None => {
                let mut a: Vec<f64> = (0..ACTION_DIM).map(|_| gen.normal() * 0.2).collect();
                let to = [state.object[0] - state.effector[0], state.object[1] - state.effector[1]];
                let n = (to[0] * to[0] + to[1] * to[1]).sqrt().max(1e-9);
                let speed = gen.uniform_range(0.3, 1.0) * c.max_step / c.action_scale;
                a[0] = a[0] * 0.5 + speed * to[0] / n;
                a[1] = a[1] * 0.5 + speed * to[1] / n;
                a[4] = if gen.uniform() < 0.5 { -1.0 } else { 1.0 };
                a
            }
        };
        state = env.step(&state, &a);
        if t >= prefix {
            frames.extend(env.render(&state).into_data());
            actions.extend(a.iter().map(|&v| v as f32));
        }
    }
    if frames.is_empty() && clip_len > 0 {
        frames.extend(env.render(&state).into_data());
    }
    let s = c.frame_size;
    (
        Array::new(vec![clip_len, s, s, 3], frames).expect("clip layout"),
        Array::new(vec![clip_len, ACTION_DIM], actions).expect("action layout"),
    )
}

/// Push clips with per-frame actions; clip `i` depends only on `(seed, i)`.
pub fn generate_push_dataset(env: &PushEnv, clip_len: usize, count: usize, seed: u64, val_fraction: f64) -> VideoDataset {
    let mut ds = VideoDataset {
        actions: Some(Vec::with_capacity(count)),
        ..Default::default()
    };
    for i in 0..count {
        let mut gen = Generator::new(splitmix64(seed.wrapping_add(i as u64)));
        let (frames, actions) = push_clip(env, clip_len, &mut gen);
        ds.clips.push(frames);
        ds.actions.as_mut().expect("actions").push(actions);
        ds.splits.push(Split::assign(seed, i, val_fraction));
    }
    ds
}
