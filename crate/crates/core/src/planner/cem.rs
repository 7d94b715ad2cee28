//! Cross-entropy method over action sequences with temporally correlated noise.

use std::f64::consts::PI;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::harness::config::KvConfig;
use crate::rng::Generator;
use crate::tensor::Array;

/// `[H, A]` actions, one row per step.
pub type ActionSequence = Array<f64>;

#[derive(Clone, Debug, PartialEq)]
pub struct PlannerConfig {
    /// Planning horizon `H`.
    pub horizon: usize,
    /// Samples `M` per CEM iteration.
    pub samples: usize,
    pub iterations: usize,
    pub elite_fraction: f64,
    /// Noise correlation `β`.
    pub beta: f64,
    /// Per-step cost weights, length `H`.
    pub cost_weights: Vec<f64>,
    /// Initial per-step mean.
    pub init_mean: Vec<f64>,
    /// Initial per-step diagonal covariance.
    pub init_var: Vec<f64>,
    pub replan_every: usize,
    /// Executed steps per episode, the initial action included.
    pub total_steps: usize,
    pub initial_action: Vec<f64>,
    /// Action dim rounded to ±1 after sampling.
    pub gripper_dim: Option<usize>,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        let mut cost_weights = vec![1.0; 10];
        cost_weights[9] = 10.0;
        Self {
            horizon: 10,
            samples: 256,
            iterations: 3,
            elite_fraction: 0.05,
            beta: 0.3,
            cost_weights,
            init_mean: vec![0.0, 0.0, -0.5, 0.0, 0.0],
            init_var: vec![0.05, 0.05, 0.08, PI / 18.0, 2.0],
            replan_every: 3,
            total_steps: 15,
            initial_action: vec![0.0, 0.0, -0.08, 0.1, 0.0],
            gripper_dim: Some(4),
        }
    }
}

fn parse_list(key: &str, raw: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("{key}: `{v}` is not a number ({e})")))
        })
        .collect()
}

impl PlannerConfig {
    /// Reads planner keys; list values are comma-separated.
    pub fn take_from(kv: &mut KvConfig) -> Result<Self> {
        let d = Self::default();
        let horizon = kv.take_or("horizon", d.horizon)?;
        let mut list = |key: &str, default: Vec<f64>| -> Result<Vec<f64>> {
            match kv.take::<String>(key)? {
                Some(raw) => parse_list(key, &raw),
                None => Ok(default),
            }
        };
        let cost_weights = if horizon == d.horizon {
            list("cost_weights", d.cost_weights.clone())?
        } else {
            let mut w = vec![1.0; horizon];
            if let Some(last) = w.last_mut() {
                *last = 10.0;
            }
            list("cost_weights", w)?
        };
        let init_mean = list("init_mean", d.init_mean.clone())?;
        let init_var = list("init_var", d.init_var.clone())?;
        let initial_action = list("initial_action", d.initial_action.clone())?;
        let gripper: i64 = kv.take_or("gripper_dim", 4)?;
        let cfg = Self {
            horizon,
            samples: kv.take_or("samples", d.samples)?,
            iterations: kv.take_or("cem_iterations", d.iterations)?,
            elite_fraction: kv.take_or("elite_fraction", d.elite_fraction)?,
            beta: kv.take_or("beta", d.beta)?,
            cost_weights,
            init_mean,
            init_var,
            replan_every: kv.take_or("replan_every", d.replan_every)?,
            total_steps: kv.take_or("total_steps", d.total_steps)?,
            initial_action,
            gripper_dim: usize::try_from(gripper).ok(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn action_dim(&self) -> usize {
        self.init_mean.len()
    }

    /// `⌊M · elite_fraction⌋`.
    pub fn elite_count(&self) -> usize {
        (self.samples as f64 * self.elite_fraction + 1e-9).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.elite_fraction > 0.0 && self.elite_fraction < 1.0) {
            return bad(format!("elite fraction {} outside (0, 1)", self.elite_fraction));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return bad(format!("beta {} outside [0, 1)", self.beta));
        }
        if self.horizon == 0 || self.cost_weights.len() != self.horizon {
            return bad(format!(
                "{} cost weights for horizon {}",
                self.cost_weights.len(),
                self.horizon
            ));
        }
        if self.elite_count() < 1 {
            return bad(format!(
                "{} samples at elite fraction {} leave no elites",
                self.samples, self.elite_fraction
            ));
        }
        let a = self.action_dim();
        if a == 0 || self.init_var.len() != a || self.initial_action.len() != a {
            return bad("init_mean, init_var and initial_action must share one length".into());
        }
        if self.init_var.iter().any(|&v| !(v > 0.0)) {
            return bad("init_var entries must be positive".into());
        }
        if self.gripper_dim.is_some_and(|g| g >= a) {
            return bad("gripper_dim outside the action".into());
        }
        if self.iterations == 0 || self.replan_every == 0 || self.replan_every > self.horizon || self.total_steps == 0 {
            return bad("iterations, replan interval and total steps must be positive, replan <= horizon".into());
        }
        Ok(())
    }

    /// Initial `(μ, Σ)` as `[H, A]` arrays.
    pub fn initial_distribution(&self) -> (Array<f64>, Array<f64>) {
        let h = self.horizon;
        let a = self.action_dim();
        (
            Array::new(vec![h, a], self.init_mean.repeat(h)).expect("mean layout"),
            Array::new(vec![h, a], self.init_var.repeat(h)).expect("var layout"),
        )
    }
}

/// Draws of [`sample_correlated_actions`] with the underlying noise exposed.
#[derive(Clone, Debug)]
pub struct CorrelatedSample {
    /// Independent draws `u ~ N(0, Σ)`, `[H, A]` each.
    pub u: Vec<Array<f64>>,
    /// Correlated noise `n_i = (1 − β) u_i + β n_{i−1}`, `n_0 = u_0`.
    pub noise: Vec<Array<f64>>,
    /// `μ + n`, with the gripper dim rounded to ±1.
    pub actions: Vec<ActionSequence>,
}

/// Rounds to whichever of −1 and +1 is closer (+1 at 0).
pub fn round_gripper(v: f64) -> f64 {
    if v < 0.0 {
        -1.0
    } else {
        1.0
    }
}

pub fn sample_correlated_actions(
    gen: &mut Generator,
    mean: &Array<f64>,
    var: &Array<f64>,
    beta: f64,
    samples: usize,
    gripper_dim: Option<usize>,
) -> Result<CorrelatedSample> {
    if mean.shape() != var.shape() || mean.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "sample_correlated_actions",
            left: mean.shape().to_vec(),
            right: var.shape().to_vec(),
        });
    }
    if var.data().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid("action variance must be finite and non-negative"));
    }
    let (h, a) = (mean.shape()[0], mean.shape()[1]);
    let std: Vec<f64> = var.data().iter().map(|v| v.sqrt()).collect();
    let mut out = CorrelatedSample {
        u: Vec::with_capacity(samples),
        noise: Vec::with_capacity(samples),
        actions: Vec::with_capacity(samples),
    };
    for _ in 0..samples {
        let u: Vec<f64> = (0..h * a).map(|i| gen.normal() * std[i]).collect();
        let mut n = u.clone();
        for i in 1..h {
            for d in 0..a {
                n[i * a + d] = (1.0 - beta) * u[i * a + d] + beta * n[(i - 1) * a + d];
            }
        }
        let mut act: Vec<f64> = mean.data().iter().zip(&n).map(|(m, x)| m + x).collect();
        if let Some(g) = gripper_dim {
            for i in 0..h {
                act[i * a + g] = round_gripper(act[i * a + g]);
            }
        }
        out.u.push(Array::new(vec![h, a], u)?);
        out.noise.push(Array::new(vec![h, a], n)?);
        out.actions.push(Array::new(vec![h, a], act)?);
    }
    Ok(out)
}

/// Per-step mean and population variance of the elite sequences.
pub fn refit(elites: &[&ActionSequence]) -> Result<(Array<f64>, Array<f64>)> {
    let first = elites.first().ok_or_else(|| Error::invalid("refit needs at least one elite"))?;
    let shape = first.shape().to_vec();
    let len = first.len();
    let n = elites.len() as f64;
    let mut mean = vec![0.0; len];
    for e in elites {
        if e.shape() != shape.as_slice() {
            return Err(Error::invalid("elite sequences differ in shape"));
        }
        for (m, &v) in mean.iter_mut().zip(e.data()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; len];
    for e in elites {
        for ((s, &v), &m) in var.iter_mut().zip(e.data()).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    Ok((Array::new(shape.clone(), mean)?, Array::new(shape, var)?))
}

/// Indices of the `k` lowest costs, ties by index.
pub fn elite_indices(costs: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..costs.len()).collect();
    order.sort_by(|&a, &b| costs[a].total_cmp(&costs[b]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

#[derive(Clone, Debug)]
pub struct CemOutcome {
    /// Lowest-cost sequence of the final iteration.
    pub best: ActionSequence,
    pub best_cost: f64,
    /// Sampling distribution after the final refit.
    pub mean: Array<f64>,
    pub var: Array<f64>,
    /// Wall-clock seconds of each iteration.
    pub iteration_seconds: Vec<f64>,
}

/// Runs `config.iterations` rounds of sample, score, select, refit starting
/// from the configured initial distribution.
pub fn cem_optimize(
    config: &PlannerConfig,
    gen: &mut Generator,
    mut cost: impl FnMut(&[ActionSequence], &mut Generator) -> Result<Vec<f64>>,
) -> Result<CemOutcome> {
    config.validate()?;
    let (mut mean, mut var) = config.initial_distribution();
    let k = config.elite_count();
    let mut best = None;
    let mut seconds = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let start = Instant::now();
        let draw = sample_correlated_actions(gen, &mean, &var, config.beta, config.samples, config.gripper_dim)?;
        let costs = cost(&draw.actions, gen)?;
        if costs.len() != draw.actions.len() {
            return Err(Error::invalid("cost function returned the wrong number of costs"));
        }
        let elites = elite_indices(&costs, k);
        let chosen: Vec<&ActionSequence> = elites.iter().map(|&i| &draw.actions[i]).collect();
        (mean, var) = refit(&chosen)?;
        best = Some((draw.actions[elites[0]].clone(), costs[elites[0]]));
        seconds.push(start.elapsed().as_secs_f64());
    }
    let (best, best_cost) = best.expect("at least one iteration");
    Ok(CemOutcome {
        best,
        best_cost,
        mean,
        var,
        iteration_seconds: seconds,
    })
}

/// Row `i` of an action sequence as a vector.
pub fn action_row(seq: &ActionSequence, i: usize) -> Vec<f64> {
    let a = seq.last_dim();
    seq.data()[i * a..(i + 1) * a].to_vec()
}
