//! Skeletal graph VAE: per-node Gaussian latents conditioned on topology.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;
use strokerig_core::validate::validate;
use strokerig_core::{Edge, SkeletonGraph};

use crate::autodiff::{Tape, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::error::ModelError;
use crate::gnn::{GraphBatch, GraphLayer, LayerKind, Linear};
use crate::params::{AdamConfig, AdamW, Bound, ParamSet};

pub const LOG_SIGMA_LIMIT: f64 = 10.0;
pub const CHECKPOINT_KIND: &str = "vae";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub width: usize,
    pub heads: usize,
    pub encoder_layers: Vec<LayerKind>,
    pub decoder_layers: Vec<LayerKind>,
    pub kl_beta: f64,
    /// Average the reconstruction error over joints instead of summing it.
    pub recon_mean: bool,
}

impl Default for VaeConfig {
    fn default() -> Self {
        let stack = vec![LayerKind::Gcn, LayerKind::Attention, LayerKind::Attention];
        Self {
            latent_dim: 8,
            width: 64,
            heads: 4,
            encoder_layers: stack.clone(),
            decoder_layers: stack,
            kl_beta: 1e-8,
            recon_mean: false,
        }
    }
}

impl VaeConfig {
    pub fn check(&self) -> Result<(), ModelError> {
        if self.latent_dim == 0 || self.width == 0 {
            return Err(ModelError::Config("latent_dim and width must be positive".into()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(ModelError::Config(format!("width {} not divisible by heads {}", self.width, self.heads)));
        }
        if !(self.kl_beta >= 0.0) {
            return Err(ModelError::Config("kl_beta must be non-negative".into()));
        }
        Ok(())
    }
}

/// Encoder output for one graph. `z` is filled by [`reparameterize`].
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSkeleton {
    pub mu: Tensor,
    pub log_sigma: Tensor,
    pub z: Option<Tensor>,
    pub edges: Vec<Edge>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeLoss {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

/// `z = μ + exp(log σ) ⊙ ε`.
pub fn reparameterize(latent: &LatentSkeleton, eps: &Tensor) -> Result<Tensor, ModelError> {
    if eps.shape() != latent.mu.shape() || latent.log_sigma.shape() != latent.mu.shape() {
        return Err(ModelError::Shape(format!("eps {:?} vs mu {:?}", eps.shape(), latent.mu.shape())));
    }
    let data = latent
        .mu
        .data
        .iter()
        .zip(&latent.log_sigma.data)
        .zip(&eps.data)
        .map(|((m, s), e)| m + s.exp() * e)
        .collect();
    Ok(Tensor::from_vec(eps.rows, eps.cols, data))
}

/// `½ Σ (μ² + σ² − ln σ² − 1)`.
pub fn kl_divergence(mu: &Tensor, log_sigma: &Tensor) -> f64 {
    0.5 * mu
        .data
        .iter()
        .zip(&log_sigma.data)
        .map(|(m, s)| m * m + (2.0 * s).exp() - 2.0 * s - 1.0)
        .sum::<f64>()
}

pub fn standard_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect())
}

pub(crate) fn joints_tensor(g: &SkeletonGraph) -> Tensor {
    Tensor::from_rows(&g.joints)
}

pub(crate) fn require_valid(g: &SkeletonGraph) -> Result<(), ModelError> {
    let report = validate(g);
    if report.is_valid() {
        Ok(())
    } else {
        Err(ModelError::Invalid(report))
    }
}

/// Tape handles of a batched loss evaluation.
pub struct LossVars {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
}

#[derive(Debug, Clone)]
pub struct SkVae {
    pub config: VaeConfig,
    pub params: ParamSet,
    embed: Linear,
    encoder: Vec<GraphLayer>,
    mu_head: Linear,
    log_sigma_head: Linear,
    latent_in: Linear,
    decoder: Vec<GraphLayer>,
    out: Linear,
}

impl SkVae {
    pub fn new(config: VaeConfig, seed: u64) -> Result<Self, ModelError> {
        config.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let (w, h, d) = (config.width, config.heads, config.latent_dim);
        let embed = Linear::new(&mut params, "enc.embed", 3, w, &mut rng);
        let encoder = config
            .encoder_layers
            .iter()
            .enumerate()
            .map(|(i, &k)| GraphLayer::new(k, &mut params, &format!("enc.{i}"), w, h, &mut rng))
            .collect();
        let mu_head = Linear::new(&mut params, "enc.mu", w, d, &mut rng);
        let log_sigma_head = Linear::new(&mut params, "enc.log_sigma", w, d, &mut rng);
        let latent_in = Linear::new(&mut params, "dec.embed", d, w, &mut rng);
        let decoder = config
            .decoder_layers
            .iter()
            .enumerate()
            .map(|(i, &k)| GraphLayer::new(k, &mut params, &format!("dec.{i}"), w, h, &mut rng))
            .collect();
        let out = Linear::new(&mut params, "dec.out", w, 3, &mut rng);
        Ok(Self { config, params, embed, encoder, mu_head, log_sigma_head, latent_in, decoder, out })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn encode_vars(&self, tape: &mut Tape, p: &Bound, x: Var, batch: &GraphBatch) -> (Var, Var) {
        let mut h = self.embed.forward(tape, p, x);
        for layer in &self.encoder {
            h = layer.forward(tape, p, h, batch);
        }
        let mu = self.mu_head.forward(tape, p, h);
        let ls = self.log_sigma_head.forward(tape, p, h);
        let ls = tape.clamp(ls, -LOG_SIGMA_LIMIT, LOG_SIGMA_LIMIT);
        (mu, ls)
    }

    pub fn decode_vars(&self, tape: &mut Tape, p: &Bound, z: Var, batch: &GraphBatch) -> Var {
        let mut h = self.latent_in.forward(tape, p, z);
        for layer in &self.decoder {
            h = layer.forward(tape, p, h, batch);
        }
        self.out.forward(tape, p, h)
    }

    /// Batch loss: per-graph `recon + β·kl`, averaged over graphs.
    pub fn loss_vars(&self, tape: &mut Tape, p: &Bound, x: Var, eps: Var, batch: &GraphBatch) -> LossVars {
        let (mu, ls) = self.encode_vars(tape, p, x, batch);
        let sigma = tape.exp(ls);
        let noise = tape.mul(sigma, eps);
        let z = tape.add(mu, noise);
        let xr = self.decode_vars(tape, p, z, batch);
        let diff = tape.sub(x, xr);
        let sq = tape.square(diff);
        let graphs = batch.num_graphs() as f64;
        let recon = if self.config.recon_mean {
            let per_graph = tape.segment_sum(sq, batch.offsets());
            let offs = batch.offsets();
            let inv = Tensor::from_vec(
                offs.len() - 1,
                1,
                offs.windows(2).map(|w| 1.0 / ((w[1] - w[0]).max(1) as f64 * graphs)).collect(),
            );
            let inv = tape.leaf(inv);
            let scaled = tape.mul(per_graph, inv);
            tape.sum(scaled)
        } else {
            let s = tape.sum(sq);
            tape.scale(s, 1.0 / graphs)
        };
        let mu2 = tape.square(mu);
        let ls2 = tape.scale(ls, 2.0);
        let var = tape.exp(ls2);
        let t = tape.add(mu2, var);
        let t = tape.sub(t, ls2);
        let t = tape.add_scalar(t, -1.0);
        let kl = tape.sum(t);
        let kl = tape.scale(kl, 0.5 / graphs);
        let weighted = tape.scale(kl, self.config.kl_beta);
        let total = tape.add(recon, weighted);
        LossVars { total, recon, kl }
    }

    pub fn encode(&self, graph: &SkeletonGraph) -> Result<LatentSkeleton, ModelError> {
        require_valid(graph)?;
        let batch = GraphBatch::single(graph.len(), &graph.edges)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let x = tape.leaf(joints_tensor(graph));
        let (mu, ls) = self.encode_vars(&mut tape, &p, x, &batch);
        Ok(LatentSkeleton {
            mu: tape.value(mu).clone(),
            log_sigma: tape.value(ls).clone(),
            z: None,
            edges: graph.edges.clone(),
        })
    }

    /// Encoder means for many graphs in one pass.
    pub fn encode_means(&self, graphs: &[SkeletonGraph]) -> Result<Vec<Tensor>, ModelError> {
        for g in graphs {
            require_valid(g)?;
        }
        let batch = GraphBatch::new(graphs.iter().map(|g| (g.len(), g.edges.as_slice())))?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let x = tape.leaf(stack_joints(graphs));
        let (mu, _) = self.encode_vars(&mut tape, &p, x, &batch);
        Ok(split_rows(tape.value(mu), &batch))
    }

    pub fn decode(&self, z: &Tensor, edges: &[Edge]) -> Result<Tensor, ModelError> {
        if z.cols != self.config.latent_dim {
            return Err(ModelError::Shape(format!("latent width {} but model uses {}", z.cols, self.config.latent_dim)));
        }
        let batch = GraphBatch::single(z.rows, edges)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let zv = tape.leaf(z.clone());
        let out = self.decode_vars(&mut tape, &p, zv, &batch);
        Ok(tape.value(out).clone())
    }

    /// Decodes the encoder mean: the deterministic round trip.
    pub fn reconstruct(&self, graph: &SkeletonGraph) -> Result<SkeletonGraph, ModelError> {
        let latent = self.encode(graph)?;
        let x = self.decode(&latent.mu, &graph.edges)?;
        let mut out = graph.clone();
        for (j, p) in out.joints.iter_mut().enumerate() {
            *p = [x.get(j, 0), x.get(j, 1), x.get(j, 2)];
        }
        Ok(out)
    }

    pub fn loss(&self, graph: &SkeletonGraph, eps: &Tensor) -> Result<VaeLoss, ModelError> {
        require_valid(graph)?;
        if eps.shape() != (graph.len(), self.config.latent_dim) {
            return Err(ModelError::Shape(format!("eps shape {:?}", eps.shape())));
        }
        let batch = GraphBatch::single(graph.len(), &graph.edges)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let x = tape.leaf(joints_tensor(graph));
        let e = tape.leaf(eps.clone());
        let l = self.loss_vars(&mut tape, &p, x, e, &batch);
        Ok(VaeLoss { total: tape.value(l.total).item(), recon: tape.value(l.recon).item(), kl: tape.value(l.kl).item() })
    }

    /// Loss for one graph with its gradient per parameter tensor.
    pub fn loss_and_grad(&self, graph: &SkeletonGraph, eps: &Tensor) -> Result<(VaeLoss, Vec<Tensor>), ModelError> {
        require_valid(graph)?;
        if eps.shape() != (graph.len(), self.config.latent_dim) {
            return Err(ModelError::Shape(format!("eps shape {:?}", eps.shape())));
        }
        let batch = GraphBatch::single(graph.len(), &graph.edges)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let x = tape.leaf(joints_tensor(graph));
        let e = tape.leaf(eps.clone());
        let l = self.loss_vars(&mut tape, &p, x, e, &batch);
        let loss = VaeLoss { total: tape.value(l.total).item(), recon: tape.value(l.recon).item(), kl: tape.value(l.kl).item() };
        Ok((loss, p.grads(tape.backward(l.total), &self.params)))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
            meta: json!({}),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        ckpt.expect_kind(CHECKPOINT_KIND)?;
        let config: VaeConfig =
            serde_json::from_value(ckpt.config.clone()).map_err(|e| ModelError::Checkpoint(format!("vae config: {e}")))?;
        let mut vae = Self::new(config, 0)?;
        vae.params.load_from(&ckpt.params).map_err(ModelError::Checkpoint)?;
        Ok(vae)
    }
}

pub(crate) fn stack_joints(graphs: &[SkeletonGraph]) -> Tensor {
    Tensor::from_rows(&graphs.iter().flat_map(|g| g.joints.iter().copied()).collect::<Vec<_>>())
}

pub(crate) fn split_rows(t: &Tensor, batch: &GraphBatch) -> Vec<Tensor> {
    (0..batch.num_graphs())
        .map(|g| {
            let r = batch.range(g);
            Tensor::from_vec(r.len(), t.cols, t.data[r.start * t.cols..r.end * t.cols].to_vec())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 64, adam: AdamConfig::with_lr(1e-4), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeCurveRow {
    pub step: usize,
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

/// Trains `vae` in place and returns one loss row per step.
pub fn train_vae(vae: &mut SkVae, dataset: &[SkeletonGraph], cfg: &VaeTrainConfig) -> Result<Vec<VaeCurveRow>, ModelError> {
    if dataset.is_empty() {
        return Err(ModelError::Config("empty training set".into()));
    }
    for g in dataset {
        require_valid(g)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.adam.clone(), &vae.params);
    let d = vae.config.latent_dim;
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let picks: Vec<usize> = if cfg.batch_size >= dataset.len() {
            (0..dataset.len()).collect()
        } else {
            sample(&mut rng, dataset.len(), cfg.batch_size.max(1)).into_vec()
        };
        let graphs: Vec<SkeletonGraph> = picks.iter().map(|&i| dataset[i].clone()).collect();
        let batch = GraphBatch::new(graphs.iter().map(|g| (g.len(), g.edges.as_slice())))?;
        let eps = standard_normal(&mut rng, batch.num_nodes(), d);
        let mut tape = Tape::new();
        let p = vae.params.bind(&mut tape);
        let x = tape.leaf(stack_joints(&graphs));
        let e = tape.leaf(eps);
        let l = vae.loss_vars(&mut tape, &p, x, e, &batch);
        let row = VaeCurveRow {
            step,
            total: tape.value(l.total).item(),
            recon: tape.value(l.recon).item(),
            kl: tape.value(l.kl).item(),
        };
        if !row.total.is_finite() {
            return Err(ModelError::Diverged(step));
        }
        let grads = p.grads(tape.backward(l.total), &vae.params);
        opt.step(&mut vae.params, &grads);
        curve.push(row);
    }
    Ok(curve)
}

/// Mean Euclidean error per joint of the deterministic round trip.
pub fn mean_joint_error(vae: &SkVae, graphs: &[SkeletonGraph]) -> Result<f64, ModelError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for g in graphs {
        let r = vae.reconstruct(g)?;
        for (a, b) in g.joints.iter().zip(&r.joints) {
            total += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
        }
        count += g.len();
    }
    Ok(total / count.max(1) as f64)
}
