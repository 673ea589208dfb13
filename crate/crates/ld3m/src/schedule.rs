//! Noise schedules for the forward and reverse diffusion processes.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Default linear-schedule endpoints, independent of the step count.
///
/// Longer chains therefore accumulate more total noising: the cumulative
/// signal coefficient `gamma_T` falls from roughly 0.73 at T = 10 to about
/// 0.06 at T = 90. This keeps the initial latent visible in short chains
/// (so initialization from encoded real images matters) while long chains
/// approach pure noise.
pub const DEFAULT_BETA_START: f64 = 2e-3;
pub const DEFAULT_BETA_END: f64 = 0.06;

/// Policy for the per-step injected-noise variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SigmaPolicy {
    /// Deterministic sampler: every sigma^2 is zero.
    Zero,
    /// sigma^2_t = beta_t.
    Beta,
    /// Posterior variance: sigma^2_t = beta_t * (1 - gamma_{t-1}) / (1 - gamma_t).
    #[default]
    Scaled,
}

/// Per-step coefficients of a T-step diffusion process.
///
/// Indexing is 1-based over steps `1..=T`, matching the reverse-process
/// convention where step `t` maps `z_t` to `z_{t-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    gamma: Vec<f64>,
    sigma2: Vec<f64>,
}

impl NoiseSchedule {
    /// Build from per-step betas in (0, 1).
    pub fn from_betas(betas: &[f64], policy: SigmaPolicy) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        for (i, &b) in betas.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!(
                    "beta[{}] = {} outside (0, 1)",
                    i + 1,
                    b
                )));
            }
        }
        let alpha: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut gamma = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for &a in &alpha {
            acc *= a;
            gamma.push(acc);
        }
        let mut s = NoiseSchedule {
            beta: betas.to_vec(),
            alpha,
            gamma,
            sigma2: vec![0.0; betas.len()],
        };
        s.apply_sigma_policy(policy);
        Ok(s)
    }

    /// Build from raw alpha and sigma^2 vectors.
    ///
    /// Relaxed validation (`alpha` in (0, 1]) so that limit cases like a
    /// no-noise step with `gamma = 1` can be constructed for testing;
    /// operations that would divide by `1 - gamma` guard it themselves.
    pub fn from_parts(alpha: Vec<f64>, sigma2: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() || alpha.len() != sigma2.len() {
            return Err(Error::Config("alpha/sigma2 length mismatch".into()));
        }
        for &a in &alpha {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::Config(format!("alpha = {a} outside (0, 1]")));
            }
        }
        for &s in &sigma2 {
            if s < 0.0 {
                return Err(Error::Config(format!("sigma2 = {s} negative")));
            }
        }
        let beta: Vec<f64> = alpha.iter().map(|a| 1.0 - a).collect();
        let mut gamma = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for &a in &alpha {
            acc *= a;
            gamma.push(acc);
        }
        Ok(NoiseSchedule {
            beta,
            alpha,
            gamma,
            sigma2,
        })
    }

    fn apply_sigma_policy(&mut self, policy: SigmaPolicy) {
        let t_max = self.beta.len();
        for t in 1..=t_max {
            self.sigma2[t - 1] = match policy {
                SigmaPolicy::Zero => 0.0,
                SigmaPolicy::Beta => self.beta[t - 1],
                SigmaPolicy::Scaled => {
                    let prev = if t == 1 { 1.0 } else { self.gamma[t - 2] };
                    self.beta[t - 1] * (1.0 - prev) / (1.0 - self.gamma[t - 1])
                }
            };
        }
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn gamma(&self, t: usize) -> f64 {
        self.gamma[t - 1]
    }

    pub fn sigma2(&self, t: usize) -> f64 {
        self.sigma2[t - 1]
    }

    /// Cumulative signal coefficient at the end of the forward process.
    pub fn gamma_final(&self) -> f64 {
        *self.gamma.last().expect("nonempty schedule")
    }
}

/// Linear beta schedule over `t_max` steps, endpoints inclusive.
pub fn make_linear_schedule(
    t_max: usize,
    beta_start: f64,
    beta_end: f64,
    policy: SigmaPolicy,
) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(Error::Config("t_max must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let betas: Vec<f64> = if t_max == 1 {
        vec![beta_start]
    } else {
        (0..t_max)
            .map(|i| {
                let f = i as f64 / (t_max - 1) as f64;
                beta_start + f * (beta_end - beta_start)
            })
            .collect()
    };
    NoiseSchedule::from_betas(&betas, policy)
}

/// The default schedule family used by probes and distillation runs.
pub fn default_schedule(t_max: usize, policy: SigmaPolicy) -> NoiseSchedule {
    make_linear_schedule(t_max, DEFAULT_BETA_START, DEFAULT_BETA_END, policy)
        .expect("default endpoints are valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_step_arithmetic() {
        let s = NoiseSchedule::from_betas(&[0.1, 0.2], SigmaPolicy::Zero).unwrap();
        assert!((s.alpha(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha(2) - 0.8).abs() < 1e-15);
        assert!((s.gamma(1) - 0.9).abs() < 1e-15);
        assert!((s.gamma(2) - 0.72).abs() < 1e-15);
    }

    #[test]
    fn single_step_gamma() {
        let s = make_linear_schedule(1, 0.3, 0.3, SigmaPolicy::Zero).unwrap();
        assert!((s.gamma(1) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn zero_policy_all_zero() {
        let s = make_linear_schedule(7, 1e-3, 0.4, SigmaPolicy::Zero).unwrap();
        assert!((1..=7).all(|t| s.sigma2(t) == 0.0));
    }

    #[test]
    fn scaled_policy_first_step_is_zero() {
        let s = make_linear_schedule(5, 1e-2, 0.3, SigmaPolicy::Scaled).unwrap();
        assert_eq!(s.sigma2(1), 0.0);
        assert!((2..=5).all(|t| s.sigma2(t) > 0.0));
    }

    #[test]
    fn beta_policy_copies_beta() {
        let s = make_linear_schedule(4, 1e-2, 0.2, SigmaPolicy::Beta).unwrap();
        assert!((1..=4).all(|t| s.sigma2(t) == s.beta(t)));
    }

    #[test]
    fn endpoint_violations_are_config_errors() {
        assert!(make_linear_schedule(3, 0.0, 0.5, SigmaPolicy::Zero).is_err());
        assert!(make_linear_schedule(3, 0.5, 0.4, SigmaPolicy::Zero).is_err());
        assert!(make_linear_schedule(3, 0.1, 1.0, SigmaPolicy::Zero).is_err());
        assert!(make_linear_schedule(0, 0.1, 0.2, SigmaPolicy::Zero).is_err());
    }

    proptest! {
        #[test]
        fn gamma_strictly_decreasing_and_consistent(
            t_max in 1usize..60,
            b0 in 1e-4f64..0.3,
            spread in 0.0f64..0.5,
        ) {
            let b1 = (b0 + spread).min(0.95);
            let s = make_linear_schedule(t_max, b0, b1, SigmaPolicy::Scaled).unwrap();
            let mut prev = 1.0;
            for t in 1..=t_max {
                prop_assert!(s.alpha(t) > 0.0 && s.alpha(t) < 1.0);
                prop_assert!(s.gamma(t) < prev);
                prop_assert!((s.gamma(t) - prev * s.alpha(t)).abs() < 1e-12);
                prop_assert!(s.sigma2(t) >= 0.0);
                prev = s.gamma(t);
            }
        }
    }
}
