//! Acceptance gate: one test per criterion, each printing a pass/fail line.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines;
//! the final criterion needs an external dataset and is `#[ignore]`d.

use maskcond::conditions::{
    CategoricalEntry, ConditionVector, NumericalEntry,
};
use maskcond::data::{render_dataset, split, synth_generate, SynthSpec};
use maskcond::graph::{Arr, Graph};
use maskcond::harness::checkpoint::{load_vae, save_vae};
use maskcond::harness::{eval_mse_vs_sparsity, eval_reconstruction_mse, spearman, sweep_dataset_size, EvalMode};
use maskcond::mcdm::{init_noise_schedule, q_sample, DiffusionConfig, McDiffusion};
use maskcond::mcvae::{elbo_loss, GenerationMode, McVae, VaeConfig};
use maskcond::schedules::{ScheduleKind, ScheduleSpec, SparsitySchedule};
use ndarray::{Array2, Array4, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::process::Command;

fn verdict(name: &str, pass: bool, detail: &str) {
    println!("criterion {name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {name} failed: {detail}");
}

// --- 1. schedule exactness --------------------------------------------------

#[test]
fn criterion_01_schedule_exactness() {
    let (p_start, p_end, n, total) = (0.15, 0.85, 7u64, 10_000u64);
    let span = p_end - p_start;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ts: Vec<u64> = (0..998).map(|_| rng.gen_range(0..=total)).collect();
    ts.push(0);
    ts.push(total);

    let mut worst = 0.0f64;
    for kind in [
        ScheduleKind::Constant,
        ScheduleKind::Linear,
        ScheduleKind::Step,
        ScheduleKind::Exponential,
    ] {
        let s = SparsitySchedule { kind, p_start, p_end, num_segments: n, total_steps: total };
        for &t in &ts {
            let got = s.sparsity_at(t).unwrap();
            // independent closed forms
            let want = match kind {
                ScheduleKind::Constant => p_start,
                ScheduleKind::Linear => p_start + span * t as f64 / total as f64,
                ScheduleKind::Step => {
                    let seg = ((t * n) / total).min(n - 1);
                    p_start + span * seg as f64 / n as f64
                }
                ScheduleKind::Exponential => {
                    p_start + span * (1.0 - (-(t as f64) / total as f64).exp())
                }
            };
            worst = worst.max((got - want).abs());
        }
        // named endpoint values
        let last = s.sparsity_at(total).unwrap();
        let want_last = match kind {
            ScheduleKind::Constant => p_start,
            ScheduleKind::Linear => p_end,
            ScheduleKind::Step => p_end - span / n as f64,
            ScheduleKind::Exponential => p_start + span * (1.0 - (-1.0f64).exp()),
        };
        worst = worst.max((last - want_last).abs());
    }
    verdict("1 schedule exactness", worst < 1e-12, &format!("max |err| = {worst:.3e}"));
}

// --- 2. masking statistics --------------------------------------------------

#[test]
fn criterion_02_masking_statistics() {
    let cv = ConditionVector {
        categorical: vec![CategoricalEntry::Observed(1), CategoricalEntry::Observed(2)],
        numerical: vec![NumericalEntry::Observed(0.4)],
    };
    let per_cv = cv.len();
    let draws = 100_000usize.div_ceil(per_cv);
    let mut worst = 0.0f64;
    for p in [0.1, 0.3, 0.5, 0.8] {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut masked = 0usize;
        for _ in 0..draws {
            masked += maskcond::conditions::mask_conditions(&cv, p, &mut rng)
                .unwrap()
                .masked_count();
        }
        let rate = masked as f64 / (draws * per_cv) as f64;
        worst = worst.max((rate - p).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut exact = true;
    for _ in 0..10_000 {
        exact &= maskcond::conditions::mask_conditions(&cv, 0.0, &mut rng).unwrap().masked_count()
            == 0;
        exact &= maskcond::conditions::mask_conditions(&cv, 1.0, &mut rng).unwrap().masked_count()
            == per_cv;
    }
    verdict(
        "2 masking statistics",
        worst <= 0.015 && exact,
        &format!("max |rate - p| = {worst:.4}, endpoints exact = {exact}"),
    );
}

// --- 3. gradient correctness ------------------------------------------------

/// Flat probe indices: both ends plus the analytically largest coordinate.
fn probe_indices(grad: &Arr) -> Vec<usize> {
    let len = grad.len();
    let argmax = grad
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut idx = vec![0, len / 2, argmax];
    idx.sort_unstable();
    idx.dedup();
    idx
}

fn grad_close(ga: f64, gf: f64) -> bool {
    let denom = ga.abs().max(gf.abs());
    if denom < 1e-7 {
        (ga - gf).abs() < 1e-8
    } else {
        (ga - gf).abs() / denom < 1e-4
    }
}

#[test]
fn criterion_03_gradient_correctness() {
    // (a) VAE total loss on a d_z = 2, K = 3 toy model
    let spec = SynthSpec { num_styles: 3, num_variants: 2, noise_std: 0.05, k: 3 };
    let schema = spec.schema(3, 2);
    let config = VaeConfig {
        num_keypoints: 3,
        d_z: 2,
        keypoint_embedding_dim: 5,
        encoder_hidden: vec![4],
        decoder_hidden: vec![4],
        beta: 0.7,
        learning_rate: 1e-3,
        batch_size: 2,
        epochs: 1,
    };
    let mut model = McVae::init(&config, &schema, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let batch = 2usize;
    let x = Array2::from_shape_fn((batch, 6), |_| rng.gen::<f64>() - 0.5);
    let eps = Array2::from_shape_fn((batch, 2), |_| rng.gen::<f64>() - 0.5);
    // one fully observed and one partially masked row so mask pathways get grads
    let cvs = vec![
        ConditionVector {
            categorical: vec![CategoricalEntry::Observed(1), CategoricalEntry::Observed(0)],
            numerical: vec![NumericalEntry::Observed(0.3)],
        },
        ConditionVector {
            categorical: vec![CategoricalEntry::Masked, CategoricalEntry::Observed(1)],
            numerical: vec![NumericalEntry::Masked],
        },
    ];
    let vae_loss = |m: &McVae| -> f64 {
        let mut g = Graph::new();
        let ids = m.store.leaves(&mut g);
        let xi = g.leaf(x.clone().into_dyn());
        let (mu, logvar) = m.encode_graph(&mut g, &ids, xi);
        let half = g.scale(logvar, 0.5);
        let std = g.exp(half);
        let ei = g.leaf(eps.clone().into_dyn());
        let noise = g.mul(std, ei);
        let z = g.add(mu, noise);
        let xhat = m.decode_graph(&mut g, &ids, z, &cvs).unwrap();
        let diff = g.sub(xi, xhat);
        let sq = g.mul(diff, diff);
        let recon = g.mean_all(sq);
        let mu2 = g.mul(mu, mu);
        let ev = g.exp(logvar);
        let a = g.add(mu2, ev);
        let b = g.add_scalar(a, -1.0);
        let c = g.sub(b, logvar);
        let s = g.sum_all(c);
        let kl = g.scale(s, 0.5 / batch as f64);
        let w = g.scale(kl, config.beta);
        let total = g.add(recon, w);
        g.scalar(total)
    };
    let vae_grads = {
        let m = &model;
        let mut g = Graph::new();
        let ids = m.store.leaves(&mut g);
        let xi = g.leaf(x.clone().into_dyn());
        let (mu, logvar) = m.encode_graph(&mut g, &ids, xi);
        let half = g.scale(logvar, 0.5);
        let std = g.exp(half);
        let ei = g.leaf(eps.clone().into_dyn());
        let noise = g.mul(std, ei);
        let z = g.add(mu, noise);
        let xhat = m.decode_graph(&mut g, &ids, z, &cvs).unwrap();
        let diff = g.sub(xi, xhat);
        let sq = g.mul(diff, diff);
        let recon = g.mean_all(sq);
        let mu2 = g.mul(mu, mu);
        let ev = g.exp(logvar);
        let a = g.add(mu2, ev);
        let b = g.add_scalar(a, -1.0);
        let c = g.sub(b, logvar);
        let s = g.sum_all(c);
        let kl = g.scale(s, 0.5 / batch as f64);
        let w = g.scale(kl, config.beta);
        let total = g.add(recon, w);
        g.backward(total);
        ids.iter().map(|&id| g.take_grad(id)).collect::<Vec<_>>()
    };
    let mut checked = 0usize;
    for pi in 0..model.store.len() {
        let zero = Arr::zeros(model.store.value(pi).raw_dim());
        let ga = vae_grads[pi].clone().unwrap_or(zero);
        for flat in probe_indices(&ga) {
            let v0 = model.store.value(pi).as_slice().unwrap()[flat];
            let h = 1e-5 * v0.abs().max(1.0);
            model.store.value_mut(pi).as_slice_mut().unwrap()[flat] = v0 + h;
            let lp = vae_loss(&model);
            model.store.value_mut(pi).as_slice_mut().unwrap()[flat] = v0 - h;
            let lm = vae_loss(&model);
            model.store.value_mut(pi).as_slice_mut().unwrap()[flat] = v0;
            let gf = (lp - lm) / (2.0 * h);
            let gav = ga.as_slice().unwrap()[flat];
            assert!(
                grad_close(gav, gf),
                "vae param {} coord {flat}: analytic {gav:.6e} vs fd {gf:.6e}",
                model.store.name(pi)
            );
            checked += 1;
        }
    }

    // (b) diffusion loss on an 8x8 single-level U-Net with attention
    let dconfig = DiffusionConfig {
        image_channels: 1,
        image_size: 8,
        base_channels: 4,
        levels: 1,
        cond_channels: 2,
        time_embedding_dim: 8,
        attention_heads: 2,
        timesteps: 10,
        ..DiffusionConfig::default()
    };
    let mut dm = McDiffusion::init(&dconfig, &schema, 7).unwrap();
    // move the zero-initialized tensors off zero so gradients reach upstream
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for name in ["out.w", "attn.wo"] {
        let pi = dm.store.index_of(name).unwrap();
        for v in dm.store.value_mut(pi).iter_mut() {
            *v = 0.2 * (rng.gen::<f64>() - 0.5);
        }
    }
    let x_t = Array4::from_shape_fn((2, 1, 8, 8), |_| rng.gen::<f64>() - 0.5);
    let deps = Array4::from_shape_fn((2, 1, 8, 8), |_| rng.gen::<f64>() - 0.5);
    let ts = vec![3usize, 7];
    let (_, dgrads) = dm.loss_with_grads(&x_t, &deps, &ts, &cvs).unwrap();
    for pi in 0..dm.store.len() {
        let zero = Arr::zeros(dm.store.value(pi).raw_dim());
        let ga = dgrads[pi].clone().unwrap_or(zero);
        for flat in probe_indices(&ga) {
            let v0 = dm.store.value(pi).as_slice().unwrap()[flat];
            let h = 1e-5 * v0.abs().max(1.0);
            dm.store.value_mut(pi).as_slice_mut().unwrap()[flat] = v0 + h;
            let lp = dm.loss_with_grads(&x_t, &deps, &ts, &cvs).unwrap().0;
            dm.store.value_mut(pi).as_slice_mut().unwrap()[flat] = v0 - h;
            let lm = dm.loss_with_grads(&x_t, &deps, &ts, &cvs).unwrap().0;
            dm.store.value_mut(pi).as_slice_mut().unwrap()[flat] = v0;
            let gf = (lp - lm) / (2.0 * h);
            let gav = ga.as_slice().unwrap()[flat];
            assert!(
                grad_close(gav, gf),
                "diffusion param {} coord {flat}: analytic {gav:.6e} vs fd {gf:.6e}",
                dm.store.name(pi)
            );
            checked += 1;
        }
    }
    verdict("3 gradient correctness", true, &format!("{checked} coordinates within 1e-4"));
}

// --- 4. KL purity and closed form -------------------------------------------

#[test]
fn criterion_04_kl_purity() {
    let (_, kl0, _) = elbo_loss(&[0.0], &[0.0], &[0.0, 0.0], &[0.0, 0.0], 1.0);
    let (_, kl1, _) = elbo_loss(&[0.0], &[0.0], &[1.0], &[0.0], 1.0);
    let exact = kl0 == 0.0 && kl1 == 0.5;

    let schema = SynthSpec::default().schema(4, 4);
    let config = VaeConfig {
        num_keypoints: 6,
        d_z: 3,
        keypoint_embedding_dim: 8,
        encoder_hidden: vec![8],
        decoder_hidden: vec![8],
        beta: 1.0,
        learning_rate: 1e-3,
        batch_size: 4,
        epochs: 1,
    };
    let mut model = McVae::init(&config, &schema, 9).unwrap();
    let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
    let (mu_a, lv_a) = model.encode(&x).unwrap();
    // arbitrary embedder perturbation: KL reads only encoder outputs
    for &t in &model.embedder.cat_tables.clone() {
        for v in model.store.value_mut(t).iter_mut() {
            *v += 17.5;
        }
    }
    for &(w, b) in &model.embedder.num_projections.clone() {
        for v in model.store.value_mut(w).iter_mut() {
            *v -= 3.25;
        }
        for v in model.store.value_mut(b).iter_mut() {
            *v += 0.125;
        }
    }
    let (mu_b, lv_b) = model.encode(&x).unwrap();
    let invariant = mu_a == mu_b && lv_a == lv_b;
    verdict(
        "4 KL purity",
        exact && invariant,
        &format!("closed forms exact = {exact}, embedder-invariant = {invariant}"),
    );
}

// --- shared mcVAE fixtures for criteria 5-6 ----------------------------------

fn fidelity_config() -> VaeConfig {
    VaeConfig {
        num_keypoints: 6,
        d_z: 2,
        keypoint_embedding_dim: 32,
        encoder_hidden: vec![64],
        decoder_hidden: vec![64],
        beta: 1.0,
        learning_rate: 2e-3,
        batch_size: 64,
        epochs: 60,
    }
}

fn trained_fidelity_models() -> (Vec<McVae>, maskcond::data::PointCloudDataset) {
    let data = synth_generate(&SynthSpec::default(), 2500, 0, 8, 8).unwrap();
    let (train, test) = split(&data, 0.2, 0).unwrap();
    assert_eq!(train.len(), 2000);
    let config = fidelity_config();
    let models = [1u64, 2, 3]
        .iter()
        .map(|&seed| {
            let mut m = McVae::init(&config, &data.schema, seed).unwrap();
            m.train(&train, &ScheduleSpec::constant(0.3), seed).unwrap();
            m
        })
        .collect();
    (models, test)
}

// --- 5. conditional-fidelity oracle -----------------------------------------

#[test]
fn criterion_05_conditional_fidelity() {
    let (models, test) = trained_fidelity_models();
    let mut detail = String::new();
    let mut pass = true;
    for (i, m) in models.iter().enumerate() {
        let seed = (i + 1) as u64;
        let full = eval_reconstruction_mse(m, &test, 0.0, seed, EvalMode::Posterior).unwrap();
        let masked = eval_reconstruction_mse(m, &test, 1.0, seed, EvalMode::Posterior).unwrap();
        pass &= full < 0.8 * masked;
        detail.push_str(&format!("seed {seed}: {full:.4} vs {masked:.4}; "));
    }
    verdict("5 conditional fidelity", pass, detail.trim_end_matches("; "));
}

// --- 6. MSE rises with inference sparsity ------------------------------------

#[test]
fn criterion_06_sparsity_trend() {
    let (models, test) = trained_fidelity_models();
    let levels = [0.0, 0.2, 0.4, 0.6, 0.8, 0.9];
    let mut means = vec![0.0; levels.len()];
    for m in &models {
        let r = eval_mse_vs_sparsity(m, &test, &levels, &[1, 2, 3], EvalMode::Posterior).unwrap();
        for (j, row) in r.rows.iter().enumerate() {
            means[j] += row.mse_mean / models.len() as f64;
        }
    }
    let rho = spearman(&levels, &means);
    verdict("6 sparsity trend", rho >= 0.8, &format!("spearman = {rho:.3}"));
}

// --- 7. small-data inversion of training sparsity ----------------------------

#[test]
fn criterion_07_size_sweep_inversion() {
    // high-cardinality family: a 10-sample subset cannot cover the categories,
    // which is what makes dense conditioning overfit
    let spec = SynthSpec { num_styles: 40, num_variants: 40, noise_std: 0.05, k: 6 };
    let base = synth_generate(&spec, 2500, 0, 8, 8).unwrap();
    let config = VaeConfig { epochs: 150, ..fidelity_config() };
    let r = sweep_dataset_size(&base, &[10, 2000], &[0.0, 0.8], &config, &[0.0], &[1, 2, 3, 4, 5])
        .unwrap();
    let cell = |key: &str| {
        r.rows
            .iter()
            .find(|row| row.sweep_var == key && row.level == 0.0)
            .unwrap_or_else(|| panic!("missing sweep cell {key}"))
            .mse_mean
    };
    let (small_dense, small_sparse) = (cell("10@0"), cell("10@0.8"));
    let (big_dense, big_sparse) = (cell("2000@0"), cell("2000@0.8"));
    verdict(
        "7 size-sweep inversion",
        small_sparse <= small_dense && big_dense <= big_sparse,
        &format!(
            "size 10: {small_sparse:.4} vs {small_dense:.4}; size 2000: {big_dense:.4} vs {big_sparse:.4}"
        ),
    );
}

// --- 8. forward-process moments ----------------------------------------------

#[test]
fn criterion_08_forward_process_moments() {
    let schedule = init_noise_schedule(1000, 1e-4, 0.02).unwrap();
    let n = 100_000usize;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    for t in [1usize, 500, 1000] {
        let normal = |rng: &mut ChaCha8Rng| {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        let x0 = Arr::from_shape_fn(IxDyn(&[n]), |_| normal(&mut rng));
        let eps = Arr::from_shape_fn(IxDyn(&[n]), |_| normal(&mut rng));
        let xt = q_sample(&x0, &eps, t, &schedule).unwrap();
        let mean = xt.sum() / n as f64;
        let var = xt.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        let ab = schedule.alpha_bar(t).unwrap();
        let expect = ab + (1.0 - ab);
        worst = worst.max((var - expect).abs() / expect);
    }
    // brute-force cumulative product with independently computed betas
    let t_total = 1000;
    let mut prod = 1.0f64;
    for i in 0..t_total {
        let beta = 1e-4 + (i as f64 / (t_total - 1) as f64) * (0.02 - 1e-4);
        prod *= 1.0 - beta;
    }
    let ab_err = (schedule.alpha_bar(t_total).unwrap() - prod).abs();
    verdict(
        "8 forward-process moments",
        worst < 0.02 && ab_err < 1e-10,
        &format!("max var rel err = {worst:.4}, abar err = {ab_err:.2e}"),
    );
}

// --- 9. diffusion overfit recovery -------------------------------------------

#[test]
fn criterion_09_diffusion_overfit_recovery() {
    let pc = synth_generate(&SynthSpec::default(), 8, 0, 8, 8).unwrap();
    let images = render_dataset(&pc, (1, 32, 32), 2.5);
    let config = DiffusionConfig {
        image_channels: 1,
        image_size: 32,
        base_channels: 16,
        levels: 3,
        cond_channels: 8,
        time_embedding_dim: 32,
        attention_heads: 0,
        timesteps: 1000,
        beta_min: 1e-4,
        beta_max: 0.02,
        learning_rate: 1e-3,
        batch_size: 4,
        epochs: 2500, // 8 samples / batch 4 -> 2 updates per epoch = 5,000 steps
    };
    let mut model = McDiffusion::init(&config, &images.schema, 0).unwrap();
    let report = model.train(&images, &ScheduleSpec::constant(0.0), 0).unwrap();
    assert_eq!(report.steps.len(), 5000);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let samples = model.sample(&images.conditions, &mut rng).unwrap();
    let mut worst = 0.0f64;
    for s in 0..samples.dim().0 {
        let mut best = f64::INFINITY;
        for i in 0..images.len() {
            let mut mse = 0.0;
            let mut cnt = 0usize;
            for y in 0..32 {
                for x in 0..32 {
                    // both live in [-1,1]; compare in [0,1] pixel units
                    let a = (samples[[s, 0, y, x]] + 1.0) / 2.0;
                    let b = (images.images[[i, 0, y, x]] + 1.0) / 2.0;
                    mse += (a - b) * (a - b);
                    cnt += 1;
                }
            }
            best = best.min(mse / cnt as f64);
        }
        worst = worst.max(best);
    }
    verdict(
        "9 diffusion overfit recovery",
        worst < 0.05,
        &format!("worst nearest-train MSE = {worst:.4}"),
    );
}

// --- 10. injection invariants -------------------------------------------------

#[test]
fn criterion_10_injection_invariants() {
    let spec = SynthSpec::default();
    let schema = spec.schema(8, 8);
    let config = DiffusionConfig {
        image_size: 16,
        base_channels: 4,
        levels: 3,
        cond_channels: 3,
        timesteps: 20,
        ..DiffusionConfig::default()
    };
    let model = McDiffusion::init(&config, &schema, 11).unwrap();
    let cv_a = ConditionVector {
        categorical: vec![CategoricalEntry::Observed(0), CategoricalEntry::Observed(3)],
        numerical: vec![NumericalEntry::Observed(0.2)],
    };
    let cv_b = ConditionVector::all_masked(&schema);

    // injected maps are constant over space, at every level
    let mut spatially_constant = true;
    for l in 0..config.levels {
        let m = model.injected_condition_map(l, std::slice::from_ref(&cv_a)).unwrap();
        let (_, c, h, w) = m.dim();
        assert_eq!(c, config.cond_channels);
        for ci in 0..c {
            let v0 = m[[0, ci, 0, 0]];
            for y in 0..h {
                for x in 0..w {
                    spatially_constant &= m[[0, ci, y, x]] == v0;
                }
            }
        }
    }

    // channel arithmetic: each level's first conv consumes features + d_c
    let mut channels_ok = true;
    for l in 0..config.levels {
        let pi = model.store.index_of(&format!("down.{l}.conv1.w")).unwrap();
        let in_ch = if l == 0 { config.base_channels } else { config.level_channels(l - 1) };
        channels_ok &= model.store.value(pi).shape()[1] == in_ch + config.cond_channels;
    }

    // swapping conditions moves the prediction of an untrained model
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut model = model;
    let ow = model.store.index_of("out.w").unwrap();
    for v in model.store.value_mut(ow).iter_mut() {
        *v = 0.1 * (rng.gen::<f64>() - 0.5);
    }
    let x = Array4::from_shape_fn((1, 1, 16, 16), |_| rng.gen::<f64>() - 0.5);
    let ea = model.predict_noise(&x, &[5], std::slice::from_ref(&cv_a)).unwrap();
    let eb = model.predict_noise(&x, &[5], std::slice::from_ref(&cv_b)).unwrap();
    let diff: f64 = ea.iter().zip(eb.iter()).map(|(a, b)| (a - b).abs()).sum();
    verdict(
        "10 injection invariants",
        spatially_constant && channels_ok && diff > 0.0,
        &format!(
            "spatially constant = {spatially_constant}, channels ok = {channels_ok}, |d eps| = {diff:.3e}"
        ),
    );
}

// --- 11. determinism and persistence ------------------------------------------

#[test]
fn criterion_11_determinism_and_persistence() {
    let bin = env!("CARGO_BIN_EXE_maskcond");
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s);
    let run = |args: &[&str]| {
        let out = Command::new(bin).args(args).output().unwrap();
        assert!(out.status.success(), "maskcond {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    std::fs::write(
        p("cfg.json"),
        r#"{"model":{"num_keypoints":6,"d_z":2,"keypoint_embedding_dim":8,"encoder_hidden":[16],"decoder_hidden":[16],"beta":1.0,"learning_rate":0.002,"batch_size":16,"epochs":3},"schedule":{"kind":"linear","p_start":0.2,"p_end":0.6}}"#,
    )
    .unwrap();

    let mut identical = true;
    for pass in ["a", "b"] {
        let data = format!("{}/data_{pass}", dir.path().display());
        let model = format!("{}/model_{pass}", dir.path().display());
        let eval = format!("{}/eval_{pass}", dir.path().display());
        run(&["gen-synth", "--samples", "80", "--seed", "3", "--out", &data]);
        run(&[
            "train", "vae", "--config", p("cfg.json").to_str().unwrap(), "--data", &data,
            "--out", &model, "--seed", "4",
        ]);
        run(&[
            "eval", "sparsity", "--checkpoint", &format!("{model}/vae.ckpt"), "--data", &data,
            "--out", &eval, "--levels", "0.0,0.5,0.9", "--seed", "5", "--seeds", "2",
        ]);
    }
    for f in [
        "data_a/dataset.csv",
        "data_a/schema.json",
        "model_a/vae.ckpt",
        "model_a/report.csv",
        "eval_a/sparsity.csv",
        "eval_a/sparsity_trend.csv",
    ] {
        let a = std::fs::read(p(f)).unwrap();
        let b = std::fs::read(p(&f.replace("_a/", "_b/"))).unwrap();
        identical &= a == b;
        assert!(identical, "{f} differs between identical invocations");
    }

    // checkpoint: load -> forward bit-exact, save -> byte-identical
    let ckpt = p("model_a/vae.ckpt");
    let m1 = load_vae(&ckpt).unwrap();
    let m2 = load_vae(&ckpt).unwrap();
    let cv = ConditionVector::all_masked(m1.schema());
    let mut r1 = ChaCha8Rng::seed_from_u64(6);
    let mut r2 = ChaCha8Rng::seed_from_u64(6);
    let g1 = m1.generate(&cv, GenerationMode::Prior, &mut r1).unwrap();
    let g2 = m2.generate(&cv, GenerationMode::Prior, &mut r2).unwrap();
    let bit_exact = g1 == g2;
    save_vae(&m1, &p("resaved.ckpt")).unwrap();
    let resave_identical =
        std::fs::read(&ckpt).unwrap() == std::fs::read(p("resaved.ckpt")).unwrap();
    verdict(
        "11 determinism & persistence",
        identical && bit_exact && resave_identical,
        &format!(
            "csv identical = {identical}, forward bit-exact = {bit_exact}, resave identical = {resave_identical}"
        ),
    );
}

// --- 12. extended GeoBiked reproduction (optional) ----------------------------

/// Needs `MASKCOND_GEOBIKED_DIR` pointing at a directory with `dataset.csv`
/// and `schema.json` in the ingestion layout (kp{i}_x/kp{i}_y columns plus one
/// column per condition). Not part of CI; run with `--ignored`.
#[test]
#[ignore = "needs the external GeoBiked dataset"]
fn criterion_12_geobiked_band() {
    let Some(dir) = std::env::var_os("MASKCOND_GEOBIKED_DIR") else {
        println!("criterion 12 geobiked band: SKIP (MASKCOND_GEOBIKED_DIR unset)");
        return;
    };
    let dir = std::path::PathBuf::from(dir);
    let data =
        maskcond::data::load_pointcloud_csv(&dir.join("dataset.csv"), &dir.join("schema.json"))
            .unwrap();
    let (train, test) = split(&data, 0.2, 0).unwrap();
    let config = VaeConfig {
        num_keypoints: 12,
        d_z: 2,
        keypoint_embedding_dim: 203,
        encoder_hidden: vec![203],
        decoder_hidden: vec![203],
        beta: 1.0,
        learning_rate: 2e-3,
        batch_size: 140,
        epochs: 393,
    };
    let mut model = McVae::init(&config, &data.schema, 0).unwrap();
    model.train(&train, &ScheduleSpec::constant(0.3), 0).unwrap();
    let levels = [0.0, 0.2, 0.4, 0.6, 0.8];
    let r = eval_mse_vs_sparsity(&model, &test, &levels, &[0, 1, 2], EvalMode::Posterior).unwrap();
    let mean: f64 = r.rows.iter().map(|row| row.mse_mean).sum::<f64>() / r.rows.len() as f64;
    verdict(
        "12 geobiked band",
        (0.045..=0.18).contains(&mean),
        &format!("mean MSE across sparsity levels = {mean:.4}"),
    );
}
