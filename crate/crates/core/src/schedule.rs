//! Linear-β diffusion noise schedule.
//!
//! All per-step accessors are 1-based in `t` (`1..=N`); `alpha_bar(0)` is
//! defined as 1 so that step 0 is the clean sample.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("schedule needs at least one step")]
    NoSteps,
    #[error("betas must satisfy 0 < beta_start <= beta_end < 1 (got {start}, {end})")]
    BetaRange { start: f64, end: f64 },
}

/// Construction parameters; what checkpoints and configs store.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule, ScheduleError> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    /// Index 0 holds ᾱ_0 = 1.
    alpha_bars: Vec<f64>,
    /// Index 0 unused (0.0); index 1 is forced to 0.
    posterior_vars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, ScheduleError> {
        if steps == 0 {
            return Err(ScheduleError::NoSteps);
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(ScheduleError::BetaRange {
                start: beta_start,
                end: beta_end,
            });
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + i as f64 / (steps - 1) as f64 * (beta_end - beta_start))
                .collect()
        };
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        for b in &betas {
            let prev = *alpha_bars.last().unwrap();
            alpha_bars.push(prev * (1.0 - b));
        }
        let mut posterior_vars = vec![0.0; steps + 1];
        for t in 2..=steps {
            posterior_vars[t] = betas[t - 1] * (1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t]);
        }
        Ok(Self {
            params: ScheduleParams {
                steps,
                beta_start,
                beta_end,
            },
            betas,
            alpha_bars,
            posterior_vars,
        })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t), with β̃_1 = 0.
    pub fn posterior_var(&self, t: usize) -> f64 {
        assert!(t >= 1, "posterior variance is defined for t >= 1");
        self.posterior_vars[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// ᾱ_1..ᾱ_N (without the ᾱ_0 = 1 entry).
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars[1..]
    }

    /// ᾱ_t / (1 − ᾱ_t).
    pub fn snr(&self, t: usize) -> f64 {
        let ab = self.alpha_bar(t);
        ab / (1.0 - ab)
    }
}
