use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::harness::config::KvConfig;

/// Sharpness of the exponential schedule.
pub const EXP_SHARPNESS: f64 = 3.0;

/// Mask scheduling function family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScheduleKind {
    Cosine,
    Linear,
    Square,
    Cubic,
    Exponential,
    Sqrt,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 6] = [
        ScheduleKind::Cosine,
        ScheduleKind::Linear,
        ScheduleKind::Square,
        ScheduleKind::Cubic,
        ScheduleKind::Exponential,
        ScheduleKind::Sqrt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Linear => "linear",
            ScheduleKind::Square => "square",
            ScheduleKind::Cubic => "cubic",
            ScheduleKind::Exponential => "exponential",
            ScheduleKind::Sqrt => "sqrt",
        }
    }

    /// Sign of the curvature on `(0, 1)`: −1 concave, 0 linear, +1 convex.
    pub fn curvature(self) -> i8 {
        match self {
            ScheduleKind::Linear => 0,
            ScheduleKind::Sqrt => 1,
            _ => -1,
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScheduleKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        ScheduleKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown schedule `{s}` (cosine|linear|square|cubic|exponential|sqrt)"))
    }
}

/// Fraction of tokens still masked at decoding progress `u ∈ [0, 1]`.
///
/// Every kind satisfies `γ(0) = 1` and `γ(1) = 0` exactly.
pub fn gamma(kind: ScheduleKind, u: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::invalid(format!("schedule argument {u} outside [0, 1]")));
    }
    if u == 1.0 {
        return Ok(0.0);
    }
    Ok(match kind {
        ScheduleKind::Cosine => (FRAC_PI_2 * u).cos(),
        ScheduleKind::Linear => 1.0 - u,
        ScheduleKind::Square => 1.0 - u * u,
        ScheduleKind::Cubic => 1.0 - u * u * u,
        ScheduleKind::Sqrt => 1.0 - u.sqrt(),
        // concave: (e^k − e^{ku}) / (e^k − 1)
        ScheduleKind::Exponential => {
            let k = EXP_SHARPNESS;
            (k.exp() - (k * u).exp()) / k.exp_m1()
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSchedule {
    pub kind: ScheduleKind,
    /// Decoding iterations `T`.
    pub iterations: usize,
    /// Gumbel-noise temperature `τ`.
    pub temperature: f64,
    pub top_p: Option<f64>,
}

impl Default for MaskSchedule {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            iterations: 8,
            temperature: 4.5,
            top_p: None,
        }
    }
}

impl MaskSchedule {
    /// Reads `schedule`, `iterations`, `temperature` and `top_p`.
    pub fn take_from(kv: &mut KvConfig) -> Result<Self> {
        let d = Self::default();
        let s = Self {
            kind: kv.take_or("schedule", d.kind)?,
            iterations: kv.take_or("iterations", d.iterations)?,
            temperature: kv.take_or("temperature", d.temperature)?,
            top_p: kv.take("top_p")?,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::invalid("decoding needs at least one iteration"));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::invalid("temperature must be non-negative"));
        }
        if let Some(p) = self.top_p {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::invalid(format!("top_p {p} outside (0, 1]")));
            }
        }
        Ok(())
    }

    /// Tokens still masked after `t` of `T` steps: `⌈γ(t/T)·N⌉`, with `n_T = 0`.
    pub fn tokens_to_mask(&self, t: usize, n: usize) -> Result<usize> {
        tokens_to_mask(self.kind, self.iterations, t, n)
    }
}

/// `⌈γ(t/T)·N⌉` for `0 ≤ t ≤ T`; products within `1e-9` of an integer are not rounded up.
pub fn tokens_to_mask(kind: ScheduleKind, iterations: usize, t: usize, n: usize) -> Result<usize> {
    if iterations == 0 || t > iterations {
        return Err(Error::invalid(format!("step {t} outside 0..={iterations}")));
    }
    let x = gamma(kind, t as f64 / iterations as f64)? * n as f64;
    let r = x.round();
    let m = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    Ok((m as usize).min(n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_values() {
        assert!((gamma(ScheduleKind::Cosine, 0.5).unwrap() - 0.707_106_781).abs() < 1e-6);
        assert!((gamma(ScheduleKind::Sqrt, 0.25).unwrap() - 0.5).abs() < 1e-15);
        assert!((gamma(ScheduleKind::Square, 0.5).unwrap() - 0.75).abs() < 1e-15);
        assert!(gamma(ScheduleKind::Linear, 1.5).is_err());
    }

    #[test]
    fn names_round_trip() {
        for k in ScheduleKind::ALL {
            assert_eq!(k.name().parse::<ScheduleKind>().unwrap(), k);
        }
    }
}
