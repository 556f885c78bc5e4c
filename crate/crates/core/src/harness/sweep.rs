//! Dataset-size and schedule sweeps, plus the shared sweep-result table.

use crate::data::PointCloudDataset;
use crate::error::{Error, Result};
use crate::mcvae::{McVae, VaeConfig};
use crate::schedules::ScheduleSpec;
use std::path::Path;

use super::eval::{eval_reconstruction_mse, spearman, EvalMode};

/// Fixed shuffle applied before prefix subsampling, so smaller sweep sizes
/// are prefixes of larger ones.
const SWEEP_SHUFFLE_SEED: u64 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    /// Value of the swept variable (a size, a schedule name, ...).
    pub sweep_var: String,
    /// Inference sparsity level.
    pub level: f64,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub seeds: usize,
}

impl SweepRow {
    pub fn aggregate(sweep_var: &str, level: f64, mses: &[f64]) -> Self {
        let n = mses.len();
        let mean = mses.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (mses.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { sweep_var: sweep_var.to_string(), level, mse_mean: mean, mse_std: std, seeds: n }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    /// Stable key order, so parallel cell execution cannot change the output.
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| {
            a.sweep_var
                .cmp(&b.sweep_var)
                .then(a.level.partial_cmp(&b.level).unwrap())
        });
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["sweep_var", "level", "mse_mean", "mse_std", "seeds"])?;
        for r in &self.rows {
            w.write_record([
                r.sweep_var.clone(),
                format!("{}", r.level),
                format!("{}", r.mse_mean),
                format!("{}", r.mse_std),
                r.seeds.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Spearman correlation between inference sparsity and mean MSE, one
    /// value per swept-variable group, in first-appearance order.
    pub fn trend(&self) -> Vec<(String, f64)> {
        let mut groups: Vec<String> = Vec::new();
        for r in &self.rows {
            if !groups.contains(&r.sweep_var) {
                groups.push(r.sweep_var.clone());
            }
        }
        groups
            .into_iter()
            .map(|g| {
                let (levels, mses): (Vec<f64>, Vec<f64>) = self
                    .rows
                    .iter()
                    .filter(|r| r.sweep_var == g)
                    .map(|r| (r.level, r.mse_mean))
                    .unzip();
                let s = spearman(&levels, &mses);
                (g, s)
            })
            .collect()
    }

    /// Companion file for the monotone-trend check. The main CSV header is
    /// pinned to five columns, so the Spearman column lives here.
    pub fn write_trend_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["sweep_var", "spearman"])?;
        for (g, s) in self.trend() {
            w.write_record([g, format!("{s}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Table-2-shaped sweep: for every (size, training sparsity, seed) train a
/// fresh model on a deterministic prefix of the shuffled dataset and evaluate
/// it over `inference_levels` on the held-out remainder beyond the largest
/// requested size. Rows are keyed `"{size}@{training sparsity}"` with `level`
/// carrying the inference sparsity.
pub fn sweep_dataset_size(
    base: &PointCloudDataset,
    sizes: &[usize],
    train_sparsities: &[f64],
    config: &VaeConfig,
    inference_levels: &[f64],
    seeds: &[u64],
) -> Result<SweepResult> {
    let max_size = *sizes.iter().max().ok_or_else(|| {
        Error::Config("size sweep needs at least one size".into())
    })?;
    if max_size >= base.len() {
        return Err(Error::SizeTooLarge { requested: max_size, available: base.len() });
    }
    let shuffled = base.shuffled(SWEEP_SHUFFLE_SEED);
    let test = {
        let idx: Vec<usize> = (max_size..shuffled.len()).collect();
        let mut t = shuffled.clone();
        t.keypoints = shuffled.keypoints.select(ndarray::Axis(0), &idx);
        t.conditions = idx.iter().map(|&i| shuffled.conditions[i].clone()).collect();
        t
    };

    let mut result = SweepResult::default();
    for &size in sizes {
        let train = shuffled.prefix(size)?;
        for &p in train_sparsities {
            let models: Vec<McVae> = seeds
                .iter()
                .map(|&seed| {
                    let mut model = McVae::init(config, &base.schema, seed)?;
                    model.train(&train, &ScheduleSpec::constant(p), seed)?;
                    Ok(model)
                })
                .collect::<Result<_>>()?;
            for &level in inference_levels {
                let mses: Vec<f64> = models
                    .iter()
                    .zip(seeds)
                    .map(|(m, &seed)| {
                        eval_reconstruction_mse(m, &test, level, seed, EvalMode::Posterior)
                    })
                    .collect::<Result<_>>()?;
                result.rows.push(SweepRow::aggregate(&format!("{size}@{p}"), level, &mses));
            }
        }
    }
    result.sort();
    Ok(result)
}

/// Table-3-shaped sweep: one model per (schedule, seed), each evaluated over
/// the given inference sparsity grid on a held-out split.
pub fn compare_schedules(
    dataset: &PointCloudDataset,
    schedule_specs: &[(String, ScheduleSpec)],
    config: &VaeConfig,
    inference_levels: &[f64],
    seeds: &[u64],
) -> Result<SweepResult> {
    let (train, test) = crate::data::split(dataset, 0.2, SWEEP_SHUFFLE_SEED)?;
    let mut result = SweepResult::default();
    for (name, spec) in schedule_specs {
        let models: Vec<McVae> = seeds
            .iter()
            .map(|&seed| {
                let mut m = McVae::init(config, &dataset.schema, seed)?;
                m.train(&train, spec, seed)?;
                Ok(m)
            })
            .collect::<Result<_>>()?;
        for &level in inference_levels {
            let mses: Vec<f64> = models
                .iter()
                .zip(seeds)
                .map(|(m, &seed)| {
                    eval_reconstruction_mse(m, &test, level, seed, EvalMode::Posterior)
                })
                .collect::<Result<_>>()?;
            result.rows.push(SweepRow::aggregate(name, level, &mses));
        }
    }
    result.sort();
    Ok(result)
}
