use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    InverseSqrt,
    Cosine,
}

/// Learning-rate schedule. Inverse-sqrt warms up linearly from 0;
/// cosine warms up linearly from `lr_start` and anneals to `lr_floor` at
/// `total_steps` in a single cycle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub warmup_steps: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_floor: f64,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return Err(Error::config("lr_peak", "must be positive and finite"));
        }
        match self.kind {
            ScheduleKind::InverseSqrt => {
                if self.warmup_steps == 0 {
                    return Err(Error::config("warmup_steps", "inverse_sqrt needs at least one warmup step"));
                }
            }
            ScheduleKind::Cosine => {
                if !(self.lr_start > 0.0 && self.lr_start <= self.lr_peak) {
                    return Err(Error::config("lr_start", "cosine needs 0 < lr_start <= lr_peak"));
                }
                if !(self.lr_floor > 0.0 && self.lr_floor <= self.lr_peak) {
                    return Err(Error::config("lr_floor", "cosine needs 0 < lr_floor <= lr_peak"));
                }
                if self.total_steps <= self.warmup_steps {
                    return Err(Error::config("steps", "cosine needs total steps beyond warmup"));
                }
            }
        }
        Ok(())
    }

    /// Learning rate for update `step` (1-based; step 0 is the warmup
    /// origin).
    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr_at_real(step as f64)
    }

    /// The same curve at a real-valued step.
    pub fn lr_at_real(&self, t: f64) -> f64 {
        let w = self.warmup_steps as f64;
        match self.kind {
            ScheduleKind::InverseSqrt => {
                if t <= w {
                    self.lr_peak * t / w
                } else {
                    self.lr_peak * math::sqrt(w / t)
                }
            }
            ScheduleKind::Cosine => {
                let total = self.total_steps as f64;
                if t < w {
                    self.lr_start + (self.lr_peak - self.lr_start) * t / w
                } else if t >= total {
                    self.lr_floor
                } else {
                    let phase = (t - w) / (total - w);
                    self.lr_floor + 0.5 * (self.lr_peak - self.lr_floor) * (1.0 + math::cos(PI * phase))
                }
            }
        }
    }
}
