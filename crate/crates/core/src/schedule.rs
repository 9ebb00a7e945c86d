//! Corruption schedules, the training loss weight and the unmask-count rule.
//!
//! A schedule is stored as the survival probabilities `alpha[0..=T]`. The
//! per-step survival `beta_t = alpha_t / alpha_{t-1}` is derived on demand,
//! never accumulated, so `alpha` is reproduced bit-for-bit from `(T, family)`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleFamily {
    /// Masking ratio `1 - alpha_t = t / T`.
    #[default]
    LinearMaskRatio,
    /// `alpha_t = cos(pi t / 2T)`.
    CosineMaskRatio,
}

impl fmt::Display for ScheduleFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleFamily::LinearMaskRatio => "linear",
            ScheduleFamily::CosineMaskRatio => "cosine",
        })
    }
}

impl FromStr for ScheduleFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" | "linear-mask-ratio" => Ok(ScheduleFamily::LinearMaskRatio),
            "cosine" | "cosine-mask-ratio" => Ok(ScheduleFamily::CosineMaskRatio),
            other => Err(Error::invalid(format!("unknown schedule family `{other}`"))),
        }
    }
}

/// The serialized form of a schedule. `alpha` is always recomputed from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub family: ScheduleFamily,
}

impl Default for ScheduleSpec {
    /// Fifty linear steps.
    fn default() -> Self {
        Self {
            steps: 50,
            family: ScheduleFamily::LinearMaskRatio,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    family: ScheduleFamily,
    alpha: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, family: ScheduleFamily) -> Result<Self> {
        if steps == 0 {
            return Err(Error::ZeroSteps);
        }
        let total = steps as f64;
        let alpha = (0..=steps)
            .map(|t| {
                if t == steps {
                    // absorbing: nothing survives the last step
                    return 0.0;
                }
                match family {
                    ScheduleFamily::LinearMaskRatio => (steps - t) as f64 / total,
                    ScheduleFamily::CosineMaskRatio => (PI * t as f64 / (2.0 * total)).cos(),
                }
            })
            .collect();
        Ok(Self {
            steps,
            family,
            alpha,
        })
    }

    pub fn linear(steps: usize) -> Result<Self> {
        Self::new(steps, ScheduleFamily::LinearMaskRatio)
    }

    pub fn cosine(steps: usize) -> Result<Self> {
        Self::new(steps, ScheduleFamily::CosineMaskRatio)
    }

    pub fn from_spec(spec: ScheduleSpec) -> Result<Self> {
        Self::new(spec.steps, spec.family)
    }

    pub fn spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            steps: self.steps,
            family: self.family,
        }
    }

    /// Total number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn family(&self) -> ScheduleFamily {
        self.family
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn check_t(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.steps {
            return Err(Error::Timestep {
                t,
                min,
                max: self.steps,
            });
        }
        Ok(())
    }

    /// Survival probability after `t` forward steps.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn mask_ratio(&self, t: usize) -> f64 {
        1.0 - self.alpha[t]
    }

    /// Per-step survival `alpha_t / alpha_{t-1}`, for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        debug_assert!(t >= 1);
        self.alpha[t] / self.alpha[t - 1]
    }

    /// Probability that a position masked at `t` is revealed at `t - 1`.
    pub fn reveal_prob(&self, t: usize) -> f64 {
        debug_assert!(t >= 1);
        (self.alpha[t - 1] - self.alpha[t]) / (1.0 - self.alpha[t])
    }

    pub fn loss_weight(&self, t: usize) -> Result<f64> {
        loss_weight(t, self.steps)
    }

    pub fn unmask_count(&self, n: usize, t: usize) -> Result<usize> {
        unmask_count(n, t, self.steps)
    }

    pub fn unmask_plan(&self, n: usize) -> Result<UnmaskPlan> {
        UnmaskPlan::new(n, self.steps)
    }
}

/// Training weight `1 - (t - 1) / T` applied to the step-`t` cross-entropy.
pub fn loss_weight(t: usize, steps: usize) -> Result<f64> {
    if steps == 0 {
        return Err(Error::ZeroSteps);
    }
    if t < 1 || t > steps {
        return Err(Error::Timestep {
            t,
            min: 1,
            max: steps,
        });
    }
    Ok(1.0 - (t - 1) as f64 / steps as f64)
}

/// Number of committed positions at timestep `t`: `floor(N cos(pi t / 2T))`.
pub fn unmask_count(n: usize, t: usize, steps: usize) -> Result<usize> {
    if steps == 0 {
        return Err(Error::ZeroSteps);
    }
    if t > steps {
        return Err(Error::Timestep {
            t,
            min: 0,
            max: steps,
        });
    }
    let frac = (PI * t as f64 / (2.0 * steps as f64)).cos();
    let k = (n as f64 * frac).floor();
    Ok((k.max(0.0) as usize).min(n))
}

/// Committed-position counts for every timestep of a length-`n` decode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnmaskPlan {
    pub n: usize,
    pub counts: Vec<usize>,
}

impl UnmaskPlan {
    pub fn new(n: usize, steps: usize) -> Result<Self> {
        let counts = (0..=steps)
            .map(|t| unmask_count(n, t, steps))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { n, counts })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn linear_midpoint_and_ends() {
        let s = NoiseSchedule::linear(50).unwrap();
        assert_eq!(s.alpha(25), 0.5);
        assert_eq!(s.alpha(0), 1.0);
        assert_eq!(s.alpha(50), 0.0);
    }

    #[test]
    fn cosine_first_step() {
        let s = NoiseSchedule::cosine(4).unwrap();
        assert!((s.alpha(1) - 0.923_879_532_511_286_7).abs() < 1e-15);
        assert_eq!(s.alpha(4), 0.0);
    }

    #[test]
    fn rejects_zero_steps() {
        assert!(matches!(NoiseSchedule::linear(0), Err(Error::ZeroSteps)));
    }

    #[test]
    fn loss_weight_values() {
        assert_eq!(loss_weight(1, 50).unwrap(), 1.0);
        assert!((loss_weight(50, 50).unwrap() - 0.02).abs() < 1e-15);
        assert_eq!(loss_weight(26, 50).unwrap(), 0.5);
        assert!(loss_weight(0, 50).is_err());
        assert!(loss_weight(51, 50).is_err());
    }

    #[test]
    fn unmask_count_values() {
        assert_eq!(unmask_count(10, 50, 50).unwrap(), 0);
        assert_eq!(unmask_count(10, 0, 50).unwrap(), 10);
        assert_eq!(unmask_count(10, 25, 50).unwrap(), 7);
        assert!(unmask_count(10, 51, 50).is_err());
    }

    #[test]
    fn plan_endpoints() {
        let plan = UnmaskPlan::new(12, 50).unwrap();
        assert_eq!(plan.counts.len(), 51);
        assert_eq!(plan.counts[0], 12);
        assert_eq!(plan.counts[50], 0);
    }

    #[test]
    fn unmask_count_monotone_exhaustive_small() {
        for steps in 1..=200 {
            for n in 1..=256 {
                let mut prev = usize::MAX;
                for t in 0..=steps {
                    let k = unmask_count(n, t, steps).unwrap();
                    assert!(k <= prev && k <= n);
                    prev = k;
                }
                assert_eq!(prev, 0);
            }
        }
    }

    #[test]
    fn reveal_prob_linear() {
        let s = NoiseSchedule::linear(4).unwrap();
        assert_eq!(s.reveal_prob(2), 0.5);
        assert_eq!(s.reveal_prob(1), 1.0);
    }

    proptest! {
        #[test]
        fn schedule_invariants(steps in 1usize..400, cosine in any::<bool>()) {
            let family = if cosine { ScheduleFamily::CosineMaskRatio } else { ScheduleFamily::LinearMaskRatio };
            let s = NoiseSchedule::new(steps, family).unwrap();
            prop_assert_eq!(s.alpha(0), 1.0);
            prop_assert!(s.alpha(steps) <= 1e-6);
            for t in 1..=steps {
                prop_assert!(s.alpha(t - 1) > s.alpha(t));
                prop_assert!((0.0..=1.0).contains(&s.alpha(t)));
                let b = s.beta(t);
                prop_assert!((0.0..1.0).contains(&b));
            }
        }

        #[test]
        fn loss_weight_strictly_decreasing(steps in 1usize..1000) {
            let mut prev = f64::INFINITY;
            for t in 1..=steps {
                let w = loss_weight(t, steps).unwrap();
                prop_assert!(w > 0.0 && w <= 1.0 && w < prev);
                prev = w;
            }
        }
    }
}
