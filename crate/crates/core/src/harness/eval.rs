//! Reconstruction-quality evaluation at controlled inference sparsity.

use crate::conditions::mask_conditions;
use crate::data::PointCloudDataset;
use crate::error::{Error, Result};
use crate::mcvae::{GenerationMode, McVae};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::sweep::{SweepResult, SweepRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Latent drawn from the posterior of the ground-truth sample.
    Posterior,
    /// Latent drawn from the prior.
    Prior,
}

/// Mean per-coordinate squared reconstruction error in data units, with every
/// test sample's conditions masked independently at rate `level`.
pub fn eval_reconstruction_mse(
    model: &McVae,
    test: &PointCloudDataset,
    level: f64,
    seed: u64,
    mode: EvalMode,
) -> Result<f64> {
    if test.schema != *model.schema() {
        return Err(Error::SchemaMismatch("test schema differs from model schema".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for i in 0..test.len() {
        let cv = mask_conditions(&test.conditions[i], level, &mut rng)?;
        let x_ref = test.keypoints.row(i).to_vec();
        let gen_mode = match mode {
            EvalMode::Posterior => GenerationMode::Posterior(&x_ref),
            EvalMode::Prior => GenerationMode::Prior,
        };
        let xhat = model.generate(&cv, gen_mode, &mut rng)?;
        let mse = x_ref
            .iter()
            .zip(&xhat)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / x_ref.len() as f64;
        total += mse;
    }
    Ok(total / test.len() as f64)
}

/// One sweep row per inference sparsity level, aggregated over seeds. Each
/// (level, seed) cell uses a fresh random stream derived from the seed alone,
/// so duplicate levels produce identical rows.
pub fn eval_mse_vs_sparsity(
    model: &McVae,
    test: &PointCloudDataset,
    levels: &[f64],
    seeds: &[u64],
    mode: EvalMode,
) -> Result<SweepResult> {
    let mut rows = Vec::with_capacity(levels.len());
    for &level in levels {
        let mses: Vec<f64> = seeds
            .iter()
            .map(|&s| eval_reconstruction_mse(model, test, level, s, mode))
            .collect::<Result<_>>()?;
        rows.push(SweepRow::aggregate("sparsity", level, &mses));
    }
    Ok(SweepResult { rows })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rx = ranks(xs);
    let ry = ranks(ys);
    pearson(&rx, &ry)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_closed_forms() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[9.0, 5.0, 3.0, 1.0]), -1.0);
        // monotone in rank even when not in value
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 100.0, 101.0]), 1.0);
        // constant series carries no rank information
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]), 0.0);
    }

    #[test]
    fn spearman_handles_ties_with_average_ranks() {
        // x = [1, 2, 2, 3] -> ranks [1, 2.5, 2.5, 4]
        let r = ranks(&[1.0, 2.0, 2.0, 3.0]);
        assert_eq!(r, vec![1.0, 2.5, 2.5, 4.0]);
        let s = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 2.0, 3.0]);
        assert!((s - 1.0).abs() < 1e-12);
    }
}
