//! Masked-conditioning VAE for structured 2D point clouds.
//!
//! The encoder is unconditioned: it maps the standardized keypoint vector to
//! a Gaussian posterior over `z`. Conditioning enters only at the decoder,
//! which consumes `z_c = [z; e_y]`. The KL term is computed solely on the
//! unconditioned latent, so no embedder parameter can influence it.

use crate::conditions::{ConditionEmbedder, ConditionSchema, ConditionVector};
use crate::data::{PointCloudDataset, Standardization};
use crate::error::{Error, Result};
use crate::graph::{Arr, Graph, NodeId};
use crate::harness::report::{StepRecord, TrainingReport};
use crate::params::{Adam, ParamStore};
use crate::schedules::ScheduleSpec;
use ndarray::{Array2, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    /// Keypoints per sample; the input dimension is `2K`.
    pub num_keypoints: usize,
    pub d_z: usize,
    /// Width of the first encoder layer.
    pub keypoint_embedding_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    /// KL weight.
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_keypoints == 0
            || self.d_z == 0
            || self.keypoint_embedding_dim == 0
            || self.batch_size == 0
            || self.epochs == 0
            || self.encoder_hidden.iter().any(|&w| w == 0)
            || self.decoder_hidden.iter().any(|&w| w == 0)
        {
            return Err(Error::Config("all VAE dimensions must be positive".into()));
        }
        if self.beta < 0.0 || self.learning_rate <= 0.0 {
            return Err(Error::Config("need beta >= 0 and learning_rate > 0".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        2 * self.num_keypoints
    }
}

/// How [`McVae::generate`] obtains the latent.
pub enum GenerationMode<'a> {
    /// `z ~ N(0, I)`.
    Prior,
    /// `z ~ q(z | x_ref)`; the reference sample is in data units.
    Posterior(&'a [f64]),
}

pub struct McVae {
    pub config: VaeConfig,
    pub store: ParamStore,
    pub embedder: ConditionEmbedder,
    enc_layers: Vec<(usize, usize)>,
    dec_layers: Vec<(usize, usize)>,
    pub standardization: Option<Standardization>,
}

impl McVae {
    pub fn init(config: &VaeConfig, schema: &ConditionSchema, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embedder = ConditionEmbedder::init(&mut store, schema, "embedder", &mut rng)?;

        let mut enc_dims = vec![config.input_dim(), config.keypoint_embedding_dim];
        enc_dims.extend(&config.encoder_hidden);
        enc_dims.push(2 * config.d_z);
        let enc_layers = register_mlp(&mut store, "enc", &enc_dims, &mut rng);

        let mut dec_dims = vec![config.d_z + schema.d_y()];
        dec_dims.extend(&config.decoder_hidden);
        dec_dims.push(config.input_dim());
        let dec_layers = register_mlp(&mut store, "dec", &dec_dims, &mut rng);

        Ok(Self {
            config: config.clone(),
            store,
            embedder,
            enc_layers,
            dec_layers,
            standardization: None,
        })
    }

    pub fn schema(&self) -> &ConditionSchema {
        &self.embedder.schema
    }

    /// Encoder forward on the graph: `[B, 2K] -> (mu, logvar)`, both `[B, d_z]`.
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        ids: &[NodeId],
        x: NodeId,
    ) -> (NodeId, NodeId) {
        let h = mlp_forward(g, ids, &self.enc_layers, x);
        let d_z = self.config.d_z;
        let mu = g.slice_cols(h, 0, d_z);
        let logvar = g.slice_cols(h, d_z, 2 * d_z);
        (mu, logvar)
    }

    /// Decoder forward on the graph: `([B, d_z], conditions) -> [B, 2K]`.
    pub fn decode_graph(
        &self,
        g: &mut Graph,
        ids: &[NodeId],
        z: NodeId,
        cvs: &[ConditionVector],
    ) -> Result<NodeId> {
        let ey = self.embedder.embed_batch(g, ids, cvs)?;
        let zc = g.concat_cols(&[z, ey]);
        Ok(mlp_forward(g, ids, &self.dec_layers, zc))
    }

    /// Deterministic single-sample encode of a standardized input.
    pub fn encode(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.len() != self.config.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} inputs, got {}",
                self.config.input_dim(),
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        let mut g = Graph::new();
        let ids = self.store.leaves(&mut g);
        let xi = g.leaf(Arr::from_shape_vec(IxDyn(&[1, x.len()]), x.to_vec()).unwrap());
        let (mu, logvar) = self.encode_graph(&mut g, &ids, xi);
        Ok((g.value(mu).iter().copied().collect(), g.value(logvar).iter().copied().collect()))
    }

    /// Single-sample decode; output is in standardized units.
    pub fn decode(&self, z: &[f64], cv: &ConditionVector) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let ids = self.store.leaves(&mut g);
        let zi = g.leaf(Arr::from_shape_vec(IxDyn(&[1, z.len()]), z.to_vec()).unwrap());
        let out = self.decode_graph(&mut g, &ids, zi, std::slice::from_ref(cv))?;
        Ok(g.value(out).iter().copied().collect())
    }

    /// Draw keypoints for the given conditions, de-standardized to data units.
    pub fn generate(
        &self,
        cv: &ConditionVector,
        mode: GenerationMode<'_>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>> {
        let stats = self
            .standardization
            .as_ref()
            .ok_or_else(|| Error::Config("model has no standardization statistics".into()))?;
        let z = match mode {
            GenerationMode::Prior => {
                (0..self.config.d_z).map(|_| standard_normal(rng)).collect::<Vec<f64>>()
            }
            GenerationMode::Posterior(x_ref) => {
                let xs = stats.apply(x_ref);
                let (mu, logvar) = self.encode(&xs)?;
                reparameterize(&mu, &logvar, rng)
            }
        };
        let xhat = self.decode(&z, cv)?;
        Ok(stats.invert(&xhat))
    }

    /// Train on `dataset`, masking conditions at the schedule's rate per
    /// gradient update. Keypoints are standardized with the dataset's
    /// statistics (computed here when the dataset carries none).
    pub fn train(
        &mut self,
        dataset: &PointCloudDataset,
        schedule_spec: &ScheduleSpec,
        seed: u64,
    ) -> Result<TrainingReport> {
        if dataset.schema != *self.schema() {
            return Err(Error::SchemaMismatch("dataset schema differs from model schema".into()));
        }
        let stats = match &dataset.standardization {
            Some(s) => s.clone(),
            None => crate::data::compute_standardization(&dataset.keypoints)?,
        };
        let n = dataset.len();
        let batch = self.config.batch_size.min(n);
        let steps_per_epoch = n.div_ceil(batch);
        let total_steps = (self.config.epochs * steps_per_epoch) as u64;
        let schedule = schedule_spec.with_total_steps(total_steps.max(1))?;

        let x_std = {
            let mut m = Array2::zeros((n, self.config.input_dim()));
            for i in 0..n {
                let row = stats.apply(&dataset.keypoints.row(i).to_vec());
                for (j, v) in row.into_iter().enumerate() {
                    m[[i, j]] = v;
                }
            }
            m
        };

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut adam = Adam::new(&self.store, self.config.learning_rate);
        let mut report = TrainingReport::default();
        let mut order: Vec<usize> = (0..n).collect();
        let mut step: u64 = 0;
        for epoch in 0..self.config.epochs {
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            for chunk in order.chunks(batch) {
                let p_t = schedule.sparsity_at(step.min(schedule.total_steps))?;
                let mut xb = Array2::zeros((chunk.len(), self.config.input_dim()));
                let mut cvs = Vec::with_capacity(chunk.len());
                for (r, &i) in chunk.iter().enumerate() {
                    xb.row_mut(r).assign(&x_std.row(i));
                    cvs.push(crate::conditions::mask_conditions(
                        &dataset.conditions[i],
                        p_t,
                        &mut rng,
                    )?);
                }
                let eps = Array2::from_shape_fn((chunk.len(), self.config.d_z), |_| {
                    standard_normal(&mut rng)
                });

                let mut g = Graph::new();
                let ids = self.store.leaves(&mut g);
                let xi = g.leaf(xb.into_dyn());
                let (mu, logvar) = self.encode_graph(&mut g, &ids, xi);
                let half_logvar = g.scale(logvar, 0.5);
                let std = g.exp(half_logvar);
                let epsi = g.leaf(eps.into_dyn());
                let noise = g.mul(std, epsi);
                let z = g.add(mu, noise);
                let xhat = self.decode_graph(&mut g, &ids, z, &cvs)?;
                let (recon, kl, total) =
                    elbo_graph(&mut g, xi, xhat, mu, logvar, self.config.beta, chunk.len());

                let total_v = g.scalar(total);
                if !total_v.is_finite() {
                    return Err(Error::DivergenceDetected { step });
                }
                g.backward(total);
                let grads: Vec<Option<Arr>> = ids.iter().map(|&id| g.take_grad(id)).collect();
                adam.step(&mut self.store, &grads);
                if !self.store.all_finite() {
                    return Err(Error::DivergenceDetected { step });
                }
                report.steps.push(StepRecord {
                    epoch,
                    step,
                    p_t,
                    recon: g.scalar(recon),
                    kl: g.scalar(kl),
                    total: total_v,
                });
                step += 1;
            }
        }
        self.standardization = Some(stats);
        Ok(report)
    }
}

fn register_mlp(
    store: &mut ParamStore,
    prefix: &str,
    dims: &[usize],
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    dims.windows(2)
        .enumerate()
        .map(|(i, d)| {
            let w = store.register_uniform(&format!("{prefix}.{i}.w"), &[d[0], d[1]], d[0], rng);
            let b = store.register_zeros(&format!("{prefix}.{i}.b"), &[d[1]]);
            (w, b)
        })
        .collect()
}

fn mlp_forward(g: &mut Graph, ids: &[NodeId], layers: &[(usize, usize)], x: NodeId) -> NodeId {
    let mut h = x;
    for (i, &(w, b)) in layers.iter().enumerate() {
        h = g.linear(h, ids[w], ids[b]);
        if i + 1 < layers.len() {
            h = g.relu(h);
        }
    }
    h
}

/// Reconstruction + KL on the graph. `recon` is the MSE over all coordinates,
/// `kl` is `0.5 * sum(mu^2 + exp(logvar) - 1 - logvar)` averaged over the
/// batch; no conditioning quantity enters the KL.
fn elbo_graph(
    g: &mut Graph,
    x: NodeId,
    xhat: NodeId,
    mu: NodeId,
    logvar: NodeId,
    beta: f64,
    batch: usize,
) -> (NodeId, NodeId, NodeId) {
    let diff = g.sub(x, xhat);
    let sq = g.mul(diff, diff);
    let recon = g.mean_all(sq);
    let mu2 = g.mul(mu, mu);
    let ev = g.exp(logvar);
    let a = g.add(mu2, ev);
    let b = g.add_scalar(a, -1.0);
    let c = g.sub(b, logvar);
    let s = g.sum_all(c);
    let kl = g.scale(s, 0.5 / batch as f64);
    let weighted = g.scale(kl, beta);
    let total = g.add(recon, weighted);
    (recon, kl, total)
}

/// `z = mu + exp(logvar / 2) * eps` with `eps ~ N(0, I)`.
pub fn reparameterize(mu: &[f64], logvar: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    mu.iter()
        .zip(logvar)
        .map(|(m, lv)| m + (lv / 2.0).exp() * standard_normal(rng))
        .collect()
}

/// Closed-form ELBO pieces for a single sample: `(recon, kl, total)`.
pub fn elbo_loss(x: &[f64], xhat: &[f64], mu: &[f64], logvar: &[f64], beta: f64) -> (f64, f64, f64) {
    let recon =
        x.iter().zip(xhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    let kl = 0.5
        * mu.iter()
            .zip(logvar)
            .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
            .sum::<f64>();
    (recon, kl, recon + beta * kl)
}

pub(crate) fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
