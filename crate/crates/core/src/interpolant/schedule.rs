use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Interpolant `x_t = alpha_t x0 + sigma_t eps`, data at `t = 0`, noise at
/// `t = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Linear,
    VariancePreserving,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleValues {
    pub alpha: f64,
    pub sigma: f64,
    pub d_alpha: f64,
    pub d_sigma: f64,
}

impl Schedule {
    pub fn eval(self, t: f64) -> Result<ScheduleValues> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::arg(format!("schedule time must lie in [0, 1], got {t}")));
        }
        Ok(self.eval_unchecked(t))
    }

    pub(crate) fn eval_unchecked(self, t: f64) -> ScheduleValues {
        match self {
            Schedule::Linear => ScheduleValues {
                alpha: 1.0 - t,
                sigma: t,
                d_alpha: -1.0,
                d_sigma: 1.0,
            },
            Schedule::VariancePreserving => {
                let (s, c) = (FRAC_PI_2 * t).sin_cos();
                ScheduleValues {
                    alpha: c,
                    sigma: s,
                    d_alpha: -FRAC_PI_2 * s,
                    d_sigma: FRAC_PI_2 * c,
                }
            }
        }
    }
}

/// `(alpha_t, sigma_t, d alpha_t, d sigma_t)`.
pub fn schedule_eval(schedule: Schedule, t: f64) -> Result<(f64, f64, f64, f64)> {
    let v = schedule.eval(t)?;
    Ok((v.alpha, v.sigma, v.d_alpha, v.d_sigma))
}

/// Discrete DDPM noise schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaSchedule {
    /// `alpha_k = 1 - beta_k`, indexed from step 1 at position 0.
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl BetaSchedule {
    /// Betas spaced linearly from `beta_start` to `beta_end`.
    pub fn linear(k: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if k < 1 {
            return Err(Error::arg("beta schedule needs K >= 1"));
        }
        if !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
            return Err(Error::arg("betas must satisfy 0 < start <= end < 1"));
        }
        let alphas: Vec<f64> = (0..k)
            .map(|i| {
                let f = if k == 1 { 0.0 } else { i as f64 / (k - 1) as f64 };
                1.0 - (beta_start + f * (beta_end - beta_start))
            })
            .collect();
        Self::from_alphas(alphas)
    }

    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::arg("beta schedule needs K >= 1"));
        }
        if alphas.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::arg("alpha_k must lie in (0, 1]"));
        }
        let mut acc = 1.0;
        let alpha_bars = alphas
            .iter()
            .map(|a| {
                acc *= a;
                acc
            })
            .collect();
        Ok(Self { alphas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    /// `alpha_bar_k` for `k` in `1..=K`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k - 1]
    }
}
