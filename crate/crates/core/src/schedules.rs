//! Sparsity schedules: pure functions mapping a gradient-update index
//! `t in [0, T]` to a masking probability `p_t in [0, 1]`.
//!
//! The step schedule evaluates `f_step(i) = p_start + (i-1)(p_end-p_start)/N`
//! on segment `i`, and the exponential schedule evaluates
//! `f_exp(t) = p_start + (p_end-p_start)(1 - e^{-t/T})`, both verbatim.
//! Neither attains `p_end` when `p_start != p_end`; that gap is part of the
//! contract and is asserted in the tests rather than renormalized away.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Constant,
    Linear,
    Step,
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsitySchedule {
    pub kind: ScheduleKind,
    pub p_start: f64,
    /// Ignored for `Constant`.
    pub p_end: f64,
    /// Number of segments; only meaningful for `Step`.
    pub num_segments: u64,
    /// Total gradient updates `T`.
    pub total_steps: u64,
}

/// JSON fragment inside a training config: `total_steps` is injected from the
/// training plan, so it is not part of the serialized form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub p_start: f64,
    #[serde(default)]
    pub p_end: f64,
    #[serde(default = "default_segments")]
    pub segments: u64,
}

fn default_segments() -> u64 {
    1
}

impl ScheduleSpec {
    pub fn constant(p: f64) -> Self {
        Self { kind: ScheduleKind::Constant, p_start: p, p_end: p, segments: 1 }
    }

    pub fn with_total_steps(&self, total_steps: u64) -> Result<SparsitySchedule> {
        let s = SparsitySchedule {
            kind: self.kind,
            p_start: self.p_start,
            p_end: if self.kind == ScheduleKind::Constant { self.p_start } else { self.p_end },
            num_segments: self.segments,
            total_steps,
        };
        s.validate()?;
        Ok(s)
    }
}

impl SparsitySchedule {
    pub fn validate(&self) -> Result<()> {
        for p in [self.p_start, self.p_end] {
            if !(0.0..=1.0).contains(&p) || !p.is_finite() {
                return Err(Error::InvalidProbability(p));
            }
        }
        if self.num_segments == 0 || self.total_steps == 0 {
            return Err(Error::Config("schedule needs N >= 1 and T >= 1".into()));
        }
        Ok(())
    }

    /// The masking probability for gradient update `t`.
    pub fn sparsity_at(&self, t: u64) -> Result<f64> {
        if t > self.total_steps {
            return Err(Error::StepOutOfRange { t, total: self.total_steps });
        }
        let total = self.total_steps as f64;
        let span = self.p_end - self.p_start;
        let p = match self.kind {
            ScheduleKind::Constant => self.p_start,
            ScheduleKind::Linear => self.p_start + (t as f64 / total) * span,
            ScheduleKind::Step => {
                let n = self.num_segments;
                let i = ((t * n / self.total_steps) + 1).min(n);
                self.p_start + (i - 1) as f64 * span / n as f64
            }
            ScheduleKind::Exponential => self.p_start + span * (1.0 - (-(t as f64) / total).exp()),
        };
        // no-op when the invariants hold
        Ok(p.clamp(0.0, 1.0))
    }
}
