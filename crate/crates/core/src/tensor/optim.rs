use super::array::{Array, Scalar};
use super::params::ParamStore;

/// Linear warmup followed by cosine decay to zero at `total` steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup: u64,
    pub total: u64,
}

impl LrSchedule {
    /// `base · min(t / warmup, ½(1 + cos(π (t − warmup) / (total − warmup))))`.
    pub fn at(&self, step: u64) -> f64 {
        let t = step as f64;
        let warm = if self.warmup == 0 {
            f64::INFINITY
        } else {
            t / self.warmup as f64
        };
        let span = self.total.saturating_sub(self.warmup).max(1) as f64;
        let progress = ((t - self.warmup as f64) / span).clamp(0.0, 1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.base * warm.min(cosine)
    }
}

/// Adam with per-parameter moments and a warmup/cosine learning rate.
#[derive(Clone, Debug)]
pub struct Adam<S: Scalar = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
    step: u64,
    m: Vec<Array<S>>,
    v: Vec<Array<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(params: &ParamStore<S>, schedule: LrSchedule) -> Self {
        let zeros = |p: &super::params::Param<S>| Array::zeros(p.value.shape().to_vec());
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule,
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Learning rate the next call to [`Adam::step`] will use.
    pub fn next_lr(&self) -> f64 {
        self.schedule.at(self.step + 1)
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, params: &mut ParamStore<S>) {
        self.step += 1;
        let t = self.step as i32;
        let lr = self.schedule.at(self.step);
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let (ob1, ob2) = (S::lit(1.0 - self.beta1), S::lit(1.0 - self.beta2));
        let step_size = S::lit(lr / bc1);
        let inv_bc2 = S::lit(1.0 / bc2);
        let eps = S::lit(self.eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                md[i] = b1 * md[i] + ob1 * g[i];
                vd[i] = b2 * vd[i] + ob2 * g[i] * g[i];
                *w -= step_size * md[i] / ((vd[i] * inv_bc2).sqrt() + eps);
            }
            p.grad.fill(S::zero());
        }
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm<S: Scalar>(params: &mut ParamStore<S>, max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .flat_map(|p| p.grad.data().iter())
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let f = S::lit(max_norm / norm);
        for p in params.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= f);
        }
    }
    norm
}
