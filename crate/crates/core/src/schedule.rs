//! Cosine annealing with warm restarts.
//!
//! Stage one restarts with doubling cycle lengths and decays the cycle peak by
//! a constant factor at every restart. Large-margin fine-tuning restarts on a
//! fixed period with no decay.

use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("invalid schedule: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CosineRestartConfig {
    pub lr_max0: f64,
    pub lr_min: f64,
    /// Peak multiplier applied at every restart.
    pub decay: f64,
    /// Length of the first cycle in steps.
    pub cycle0_steps: u64,
    pub doubling: bool,
    /// Cycle length when `doubling` is off; falls back to `cycle0_steps`.
    #[serde(default)]
    pub fixed_period_steps: Option<u64>,
}

impl CosineRestartConfig {
    /// Initial training: peak 0.02, floor 5e-6, ×0.8 per restart, doubling cycles.
    pub fn stage_one(cycle0_steps: u64) -> Self {
        Self { lr_max0: 0.02, lr_min: 5e-6, decay: 0.8, cycle0_steps, doubling: true, fixed_period_steps: None }
    }

    /// Large-margin fine-tuning: peak 1e-4, restart every 11,000 steps, no decay.
    pub fn large_margin_finetune() -> Self {
        Self {
            lr_max0: 1e-4,
            lr_min: 5e-6,
            decay: 1.0,
            cycle0_steps: 11_000,
            doubling: false,
            fixed_period_steps: Some(11_000),
        }
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        let bad = |m: String| Err(ScheduleError::Invalid(m));
        if !(self.lr_min > 0.0 && self.lr_max0 > self.lr_min && self.lr_max0.is_finite()) {
            return bad(format!("need lr_max0 > lr_min > 0, got {} and {}", self.lr_max0, self.lr_min));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("decay must be in (0, 1], got {}", self.decay));
        }
        if self.cycle0_steps == 0 || self.fixed_period_steps == Some(0) {
            return bad("cycle lengths must be at least 1 step".into());
        }
        Ok(())
    }

    fn period(&self) -> u64 {
        self.fixed_period_steps.unwrap_or(self.cycle0_steps)
    }

    /// `(start step, length)` of cycle `c`. Doubling cycle starts saturate at `u64::MAX`.
    pub fn cycle_bounds(&self, c: u32) -> (u64, u64) {
        if self.doubling {
            let pow = 1u128 << c.min(127);
            let start = u128::from(self.cycle0_steps) * (pow - 1);
            let len = u128::from(self.cycle0_steps) * pow;
            (u64::try_from(start).unwrap_or(u64::MAX), u64::try_from(len).unwrap_or(u64::MAX))
        } else {
            let p = self.period();
            (p.saturating_mul(u64::from(c)), p)
        }
    }

    /// Cycle index containing `step`.
    pub fn cycle_of(&self, step: u64) -> u64 {
        if self.doubling {
            // start(c) <= step  <=>  2^c <= step / cycle0 + 1
            (step / self.cycle0_steps + 1).ilog2().into()
        } else {
            step / self.period()
        }
    }

    /// Peak learning rate of cycle `c`, never below `lr_min`.
    pub fn cycle_peak(&self, c: u64) -> f64 {
        let exp = i32::try_from(c).unwrap_or(i32::MAX);
        (self.lr_max0 * self.decay.powi(exp)).max(self.lr_min)
    }
}

/// Learning rate at `step` and the index of the cycle it falls in.
pub fn lr_at(cfg: &CosineRestartConfig, step: u64) -> (f64, u64) {
    let c = cfg.cycle_of(step);
    let (start, len) = if cfg.doubling {
        cfg.cycle_bounds(c as u32)
    } else {
        (c * cfg.period(), cfg.period())
    };
    let frac = (step - start) as f64 / len as f64;
    (lr_in_cycle(cfg, c, frac), c)
}

/// Learning rate at fractional position `frac ∈ [0, 1]` of cycle `c`.
pub fn lr_in_cycle(cfg: &CosineRestartConfig, c: u64, frac: f64) -> f64 {
    let peak = cfg.cycle_peak(c);
    cfg.lr_min + 0.5 * (peak - cfg.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}
