use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Warmup {
    LinearFromZero,
    /// Geometric interpolation from `floor` to the peak.
    ExponentialFromFloor {
        floor: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decay {
    LinearTo { end: f64 },
    LinearToZero,
}

impl Decay {
    pub fn end(self) -> f64 {
        match self {
            Decay::LinearTo { end } => end,
            Decay::LinearToZero => 0.0,
        }
    }
}

/// Warmup to `peak` over `warmup_steps`, then linear decay to the end value
/// at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub warmup: Warmup,
    pub decay: Decay,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn linear(peak: f64, warmup_steps: u64, end: f64, total_steps: u64) -> Self {
        LrSchedule {
            peak,
            warmup_steps,
            warmup: Warmup::LinearFromZero,
            decay: if end == 0.0 {
                Decay::LinearToZero
            } else {
                Decay::LinearTo { end }
            },
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::invalid(format!(
                "warmup of {} steps exceeds the schedule's {} steps",
                self.warmup_steps, self.total_steps
            )));
        }
        let end = self.decay.end();
        if !(self.peak > end && end >= 0.0) {
            return Err(Error::invalid(
                "learning rates must satisfy peak > end >= 0",
            ));
        }
        if let Warmup::ExponentialFromFloor { floor } = self.warmup {
            if !(floor > 0.0 && floor < self.peak) {
                return Err(Error::invalid(
                    "exponential warmup floor must be in (0, peak)",
                ));
            }
        }
        Ok(())
    }

    /// Learning rate at `step` in `[0, total_steps]`.
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        self.validate()?;
        if step > self.total_steps {
            return Err(Error::invalid(format!(
                "step {step} is past the schedule's {} steps",
                self.total_steps
            )));
        }
        if step < self.warmup_steps {
            let frac = step as f64 / self.warmup_steps as f64;
            return Ok(match self.warmup {
                Warmup::LinearFromZero => self.peak * frac,
                Warmup::ExponentialFromFloor { floor } => floor * (self.peak / floor).powf(frac),
            });
        }
        let span = self.total_steps - self.warmup_steps;
        if span == 0 {
            return Ok(self.peak);
        }
        let end = self.decay.end();
        let left = (self.total_steps - step) as f64 / span as f64;
        Ok(end + (self.peak - end) * left)
    }
}
