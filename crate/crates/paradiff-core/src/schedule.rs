//! Per-modality reveal schedules and the shared-time decode plan.
//!
//! A schedule maps step `k` of `K` to the cumulative number of output tokens
//! that must be unmasked after that step. Images default to the cosine
//! schedule (slow start, fast finish); text defaults to linear, consumed
//! block-by-block when semi-autoregressive decoding is on.
//!
//! A [`DecodePlan`] places both schedules on one shared time axis. Delays
//! express the sequential and semi-parallel decoding strategies as ordinary
//! plans, so "sequential" is literally the parallel decoder run with the
//! image schedule occupying the steps after the text schedule finishes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

/// Decoding strategy over the shared time axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    Parallel,
    Sequential,
    SemiParallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevealSchedule {
    pub kind: ScheduleKind,
    /// Total steps K for this modality.
    pub steps: usize,
}

impl RevealSchedule {
    pub fn cosine(steps: usize) -> Self {
        RevealSchedule {
            kind: ScheduleKind::Cosine,
            steps,
        }
    }

    pub fn linear(steps: usize) -> Self {
        RevealSchedule {
            kind: ScheduleKind::Linear,
            steps,
        }
    }

    /// Cumulative unmasked count `n(k)` for `m` output tokens after step `k`.
    ///
    /// Cosine: `masked(k) = ceil(m * cos((k/K) * pi/2))`, `n = m - masked`.
    /// Linear: `n(k) = ceil(m * k / K)`. Both reach `n(K) = m`; cosine's
    /// endpoint is taken from the exact value `cos(pi/2) = 0` rather than
    /// its floating-point neighborhood.
    pub fn unmask_targets(&self, k: usize, m: usize) -> Result<usize> {
        if k == 0 || k > self.steps {
            return Err(Error::Contract(format!(
                "schedule step {k} outside 1..={}",
                self.steps
            )));
        }
        if k == self.steps {
            return Ok(m);
        }
        Ok(match self.kind {
            ScheduleKind::Cosine => {
                let frac = k as f64 / self.steps as f64;
                let masked = (m as f64 * (frac * std::f64::consts::FRAC_PI_2).cos()).ceil();
                m - (masked as usize).min(m)
            }
            ScheduleKind::Linear => {
                ((m as f64 * k as f64 / self.steps as f64).ceil() as usize).min(m)
            }
        })
    }
}

/// Both schedules on the shared reverse-diffusion time axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodePlan {
    pub image: RevealSchedule,
    pub text: RevealSchedule,
    /// Shared steps to wait before the image schedule starts.
    pub image_delay: usize,
    /// Shared steps to wait before the text schedule starts.
    pub text_delay: usize,
    /// Semi-autoregressive text: reveal block-by-block, left to right.
    pub semi_ar_text: bool,
    /// Text block size when semi-autoregressive.
    pub text_block: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Image,
    Text,
}

impl DecodePlan {
    pub fn new(mode: DecodeMode, image: RevealSchedule, text: RevealSchedule, text_block: usize) -> Self {
        let (image_delay, text_delay) = match mode {
            DecodeMode::Parallel => (0, 0),
            // text runs to completion, then the image schedule begins
            DecodeMode::Sequential => (text.steps, 0),
            // text-only for the first half of the text steps, then interleave
            DecodeMode::SemiParallel => (text.steps.div_ceil(2), 0),
        };
        DecodePlan {
            image,
            text,
            image_delay,
            text_delay,
            semi_ar_text: true,
            text_block,
        }
    }

    /// Length of the shared time axis.
    pub fn total_steps(&self) -> usize {
        (self.image_delay + self.image.steps).max(self.text_delay + self.text.steps)
    }

    /// Cumulative reveal target for `modality` at shared step `k` (1-based),
    /// where `m` is that modality's output token count.
    pub fn target(&self, modality: Modality, k: usize, m: usize) -> Result<usize> {
        let (delay, sched) = match modality {
            Modality::Image => (self.image_delay, &self.image),
            Modality::Text => (self.text_delay, &self.text),
        };
        if k <= delay {
            return Ok(0);
        }
        let local = (k - delay).min(sched.steps);
        sched.unmask_targets(local, m)
    }
}
