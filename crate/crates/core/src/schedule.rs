//! Forward-process variance schedule and derived constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The forward-process constants of a diffusion chain.
///
/// Timesteps are 1-indexed: `t` runs over `1..=num_steps`, with `t = 0`
/// denoting clean data (never stored here). `alpha_bar(t)` is the
/// cumulative product of `1 - beta` up to `t` and is precomputed at
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// The serialized form of a schedule inside experiment configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub num_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.num_steps, self.beta_min, self.beta_max)
    }
}

impl NoiseSchedule {
    /// Builds a schedule with `beta` linearly interpolated from `beta_min`
    /// at `t = 1` to `beta_max` at `t = num_steps`.
    pub fn linear(num_steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::InvalidSchedule("num_steps must be >= 1".into()));
        }
        if !(beta_min > 0.0 && beta_min < 1.0) || !(beta_max > 0.0 && beta_max < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "beta bounds must lie in (0, 1), got [{beta_min}, {beta_max}]"
            )));
        }
        if beta_min > beta_max {
            return Err(Error::InvalidSchedule(format!(
                "beta_min {beta_min} exceeds beta_max {beta_max}"
            )));
        }
        let betas: Vec<f64> = (0..num_steps)
            .map(|i| {
                if num_steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (num_steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(num_steps);
        let mut prod = 1.0;
        for &beta in &betas {
            prod *= 1.0 - beta;
            alpha_bars.push(prod);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            Err(Error::TimestepOutOfRange {
                t,
                num_steps: self.num_steps(),
            })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    /// `alpha_bar` extended to `t = 0`, where the chain holds clean data.
    pub fn alpha_bar_or_one(&self, t: usize) -> Result<f64> {
        if t == 0 {
            Ok(1.0)
        } else {
            self.alpha_bar(t)
        }
    }
}
