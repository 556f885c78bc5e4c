//! Per-gradient-update training records and their CSV form.

use crate::error::Result;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    /// Masking probability applied at this update.
    pub p_t: f64,
    pub recon: f64,
    /// 0 for models without a KL term.
    pub kl: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingReport {
    pub steps: Vec<StepRecord>,
}

impl TrainingReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "step", "p_t", "recon", "kl", "total"])?;
        for s in &self.steps {
            w.write_record([
                s.epoch.to_string(),
                s.step.to_string(),
                format!("{}", s.p_t),
                format!("{}", s.recon),
                format!("{}", s.kl),
                format!("{}", s.total),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
