//! Latent graph diffusion: noise schedule, stroke- and text-conditioned
//! denoiser, training loop and ancestral sampler.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use strokerig_core::datakit::{sampled_prompt, DatasetRecord};
use strokerig_core::stroke::{simulate_stroke, StrokeSimConfig};
use strokerig_core::textenc::TextEmbedder;
use strokerig_core::validate::validate_stroke;
use strokerig_core::{Edge, SkeletonGraph, StrokeGraph2D};

use crate::autodiff::{Csr, Tape, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::error::ModelError;
use crate::gnn::{AttentionCore, GraphBatch, Linear};
use crate::params::{AdamConfig, AdamW, Bound, ParamSet};
use crate::skvae::{standard_normal, SkVae};

pub const CHECKPOINT_KIND: &str = "dit";

/// Cumulative signal coefficients `ᾱ_0..=ᾱ_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Value of `ᾱ_T`.
    pub const ALPHA_MIN: f64 = 1e-4;

    /// Cosine profile `f(t) = cos²(((t/T + s)/(1 + s))·π/2)` with `s = 0.008`,
    /// mapped affinely so that `ᾱ_0 = 1` and `ᾱ_T = ALPHA_MIN`.
    pub fn cosine(steps: usize) -> Self {
        assert!(steps > 0, "schedule needs at least one step");
        let s = 0.008;
        let f = |t: usize| (((t as f64 / steps as f64) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let f0 = f(0);
        let alpha_bar = (0..=steps)
            .map(|t| Self::ALPHA_MIN + (1.0 - Self::ALPHA_MIN) * (f(t) / f0).clamp(0.0, 1.0))
            .collect();
        Self { alpha_bar }
    }

    /// Checks boundary values and strict monotonicity.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self, ModelError> {
        if alpha_bar.len() < 2 || alpha_bar[0] != 1.0 {
            return Err(ModelError::Config("schedule must start at alpha_bar = 1".into()));
        }
        if *alpha_bar.last().unwrap() > Self::ALPHA_MIN || *alpha_bar.last().unwrap() <= 0.0 {
            return Err(ModelError::Config("final alpha_bar must lie in (0, 1e-4]".into()));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(ModelError::Config("alpha_bar must be strictly decreasing".into()));
        }
        Ok(Self { alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Per-step `α_t = ᾱ_t / ᾱ_{t−1}` for `t ≥ 1`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha_bar[t] / self.alpha_bar[t - 1]
    }

    /// Variance of `q(z_{t−1} | z_t, z_0)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        let beta = 1.0 - self.alpha(t);
        beta * (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t])
    }
}

/// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε`.
pub fn add_noise(z0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor, ModelError> {
    if t > schedule.steps() {
        return Err(ModelError::Config(format!("timestep {t} outside 0..={}", schedule.steps())));
    }
    if z0.shape() != eps.shape() {
        return Err(ModelError::Shape(format!("z0 {:?} vs eps {:?}", z0.shape(), eps.shape())));
    }
    let a = schedule.alpha_bar(t);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(Tensor::from_vec(z0.rows, z0.cols, z0.data.iter().zip(&eps.data).map(|(z, e)| sa * z + sn * e).collect()))
}

/// Classifier-free guidance `ε_u + w·(ε_c − ε_u)`; `w = 1` returns `ε_c` as is.
pub fn guide(eps_uncond: &Tensor, eps_cond: &Tensor, w: f64) -> Tensor {
    if w == 1.0 {
        return eps_cond.clone();
    }
    Tensor::from_vec(
        eps_cond.rows,
        eps_cond.cols,
        eps_uncond.data.iter().zip(&eps_cond.data).map(|(u, c)| u + w * (c - u)).collect(),
    )
}

pub fn sinusoidal_embedding(t: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t * freq).cos();
        out[half + i] = (t * freq).sin();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DitConfig {
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub latent_dim: usize,
    pub text_dim: usize,
    /// Number of key/value tokens the text embedding is projected to.
    pub text_tokens: usize,
    pub mlp_ratio: usize,
    /// Diffusion steps `T`.
    pub timesteps: usize,
    /// When false the stroke coordinates are replaced by zeros (ablation).
    pub use_jxy: bool,
    /// Zero-initialise modulation and output maps so blocks start as identities.
    pub zero_init: bool,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self {
            width: 256,
            blocks: 6,
            heads: 4,
            latent_dim: 8,
            text_dim: strokerig_core::textenc::DEFAULT_TOY_WIDTH,
            text_tokens: 4,
            mlp_ratio: 4,
            timesteps: 1000,
            use_jxy: true,
            zero_init: true,
        }
    }
}

impl DitConfig {
    /// Four blocks of width 128 over a 50-step schedule.
    pub fn desk() -> Self {
        Self { width: 128, blocks: 4, timesteps: 50, ..Self::default() }
    }

    pub fn check(&self) -> Result<(), ModelError> {
        if self.width == 0 || self.width % 2 != 0 {
            return Err(ModelError::Config("width must be even and positive".into()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(ModelError::Config(format!("width {} not divisible by heads {}", self.width, self.heads)));
        }
        if self.latent_dim == 0 || self.text_dim == 0 || self.text_tokens == 0 || self.mlp_ratio == 0 {
            return Err(ModelError::Config("dimensions must be positive".into()));
        }
        if self.timesteps == 0 {
            return Err(ModelError::Config("timesteps must be positive".into()));
        }
        Ok(())
    }
}

/// Conditioning for one graph: stroke coordinates, topology, optional text
/// embedding and timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub jxy: Tensor,
    pub edges: Vec<Edge>,
    pub text: Option<Vec<f64>>,
    pub t: usize,
}

impl Conditioning {
    pub fn from_stroke(stroke: &StrokeGraph2D, text: Option<Vec<f64>>, t: usize) -> Self {
        Self { jxy: Tensor::from_rows(&stroke.joints2d), edges: stroke.edges.clone(), text, t }
    }

    pub fn len(&self) -> usize {
        self.jxy.rows
    }

    pub fn is_empty(&self) -> bool {
        self.jxy.rows == 0
    }
}

/// Several conditionings stacked for one forward pass.
pub struct DitInputs {
    pub graphs: GraphBatch,
    jxy: Tensor,
    time: Tensor,
    text: Option<Tensor>,
    cross: Rc<Csr>,
}

impl DitInputs {
    pub fn new(conds: &[&Conditioning], config: &DitConfig) -> Result<Self, ModelError> {
        for c in conds {
            if c.t > config.timesteps {
                return Err(ModelError::Config(format!("timestep {} outside 0..={}", c.t, config.timesteps)));
            }
            if c.jxy.cols != 2 {
                return Err(ModelError::Shape(format!("stroke coordinates have {} columns", c.jxy.cols)));
            }
            if let Some(t) = &c.text {
                if t.len() != config.text_dim {
                    return Err(ModelError::Shape(format!("text width {} but model uses {}", t.len(), config.text_dim)));
                }
            }
        }
        let graphs = GraphBatch::new(conds.iter().map(|c| (c.len(), c.edges.as_slice())))?;
        let mut jxy = Tensor::from_vec(0, 2, vec![]);
        for c in conds {
            jxy.data.extend_from_slice(&c.jxy.data);
            jxy.rows += c.jxy.rows;
        }
        if !config.use_jxy {
            jxy.data.fill(0.0);
        }
        let w = config.width;
        let mut time = Tensor::zeros(conds.len(), w);
        for (g, c) in conds.iter().enumerate() {
            time.row_mut(g).copy_from_slice(&sinusoidal_embedding(c.t as f64, w));
        }
        let k = config.text_tokens;
        let mut text_rows = Vec::new();
        let mut lists = vec![Vec::new(); graphs.num_nodes()];
        for (g, c) in conds.iter().enumerate() {
            if let Some(t) = &c.text {
                let slot = text_rows.len() / config.text_dim;
                text_rows.extend_from_slice(t);
                for i in graphs.range(g) {
                    lists[i] = (slot * k..(slot + 1) * k).collect();
                }
            }
        }
        let text = (!text_rows.is_empty()).then(|| Tensor::from_vec(text_rows.len() / config.text_dim, config.text_dim, text_rows));
        Ok(Self { graphs, jxy, time, text, cross: Rc::new(Csr::from_lists(&lists)) })
    }
}

#[derive(Debug, Clone)]
struct Block {
    modulation: Linear,
    self_attn: AttentionCore,
    cross_attn: AttentionCore,
    mlp_in: Linear,
    mlp_out: Linear,
}

#[derive(Debug, Clone)]
pub struct SkDit {
    pub config: DitConfig,
    pub params: ParamSet,
    /// Multiplier applied to encoder means to obtain diffusion targets.
    pub latent_scale: f64,
    jxy_embed: Linear,
    input: Linear,
    time_in: Linear,
    time_out: Linear,
    text_proj: Linear,
    blocks: Vec<Block>,
    final_modulation: Linear,
    out: Linear,
}

const LN_EPS: f64 = 1e-6;

impl SkDit {
    pub fn new(config: DitConfig, seed: u64) -> Result<Self, ModelError> {
        config.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let (w, d) = (config.width, config.latent_dim);
        let jxy_embed = Linear::new(&mut p, "jxy", 2, w, &mut rng);
        let input = Linear::new(&mut p, "input", w + d, w, &mut rng);
        let time_in = Linear::new(&mut p, "time.0", w, w, &mut rng);
        let time_out = Linear::new(&mut p, "time.1", w, w, &mut rng);
        let text_proj = Linear::new(&mut p, "text", config.text_dim, config.text_tokens * w, &mut rng);
        let mut blocks = Vec::new();
        for b in 0..config.blocks {
            let name = |s: &str| format!("block.{b}.{s}");
            let modulation = if config.zero_init {
                Linear::zeroed(&mut p, &name("ada"), w, 9 * w)
            } else {
                Linear::new(&mut p, &name("ada"), w, 9 * w, &mut rng)
            };
            blocks.push(Block {
                modulation,
                self_attn: AttentionCore::new(&mut p, &name("self"), w, w, config.heads, &mut rng),
                cross_attn: AttentionCore::new(&mut p, &name("cross"), w, w, config.heads, &mut rng),
                mlp_in: Linear::new(&mut p, &name("mlp.0"), w, config.mlp_ratio * w, &mut rng),
                mlp_out: Linear::new(&mut p, &name("mlp.1"), config.mlp_ratio * w, w, &mut rng),
            });
        }
        let (final_modulation, out) = if config.zero_init {
            (Linear::zeroed(&mut p, "final.ada", w, 2 * w), Linear::zeroed(&mut p, "final.out", w, d))
        } else {
            (Linear::new(&mut p, "final.ada", w, 2 * w, &mut rng), Linear::new(&mut p, "final.out", w, d, &mut rng))
        };
        Ok(Self {
            config,
            params: p,
            latent_scale: 1.0,
            jxy_embed,
            input,
            time_in,
            time_out,
            text_proj,
            blocks,
            final_modulation,
            out,
        })
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule::cosine(self.config.timesteps)
    }

    /// Output bias of the final projection; used by test harnesses.
    pub fn output_bias_mut(&mut self) -> &mut Tensor {
        self.params.get_mut(self.out.b.expect("output map has a bias"))
    }

    fn modulate(tape: &mut Tape, x: Var, shift: Var, scale: Var) -> Var {
        let n = tape.layer_norm(x, LN_EPS);
        let s = tape.add_scalar(scale, 1.0);
        let m = tape.mul(n, s);
        tape.add(m, shift)
    }

    /// Predicted noise for stacked noisy latents `z_t`.
    pub fn forward_vars(&self, tape: &mut Tape, p: &Bound, zt: Var, inputs: &DitInputs) -> Var {
        let w = self.config.width;
        let node_graph = inputs.graphs.node_graph();
        let jxy = tape.leaf(inputs.jxy.clone());
        let j = self.jxy_embed.forward(tape, p, jxy);
        let j = tape.gelu(j);
        let h = tape.concat_cols(&[j, zt]);
        let mut x = self.input.forward(tape, p, h);

        let time = tape.leaf(inputs.time.clone());
        let c = self.time_in.forward(tape, p, time);
        let c = tape.gelu(c);
        let c = self.time_out.forward(tape, p, c);
        let c = tape.gelu(c);

        let tokens = inputs.text.as_ref().map(|t| {
            let tv = tape.leaf(t.clone());
            let flat = self.text_proj.forward(tape, p, tv);
            tape.reshape(flat, t.rows * self.config.text_tokens, w)
        });

        for block in &self.blocks {
            let per_graph = block.modulation.forward(tape, p, c);
            let m = tape.gather_rows(per_graph, node_graph.clone());
            let chunk = |tape: &mut Tape, i: usize| tape.slice_cols(m, i * w, w);
            let (sh1, sc1, g1) = (chunk(tape, 0), chunk(tape, 1), chunk(tape, 2));
            let a = Self::modulate(tape, x, sh1, sc1);
            let a = block.self_attn.forward(tape, p, a, a, inputs.graphs.neighbourhood());
            let a = tape.mul(g1, a);
            x = tape.add(x, a);

            if let Some(tok) = tokens {
                let (sh2, sc2, g2) = (chunk(tape, 3), chunk(tape, 4), chunk(tape, 5));
                let q = Self::modulate(tape, x, sh2, sc2);
                let a = block.cross_attn.forward(tape, p, q, tok, inputs.cross.clone());
                let a = tape.mul(g2, a);
                x = tape.add(x, a);
            }

            let (sh3, sc3, g3) = (chunk(tape, 6), chunk(tape, 7), chunk(tape, 8));
            let f = Self::modulate(tape, x, sh3, sc3);
            let f = block.mlp_in.forward(tape, p, f);
            let f = tape.gelu(f);
            let f = block.mlp_out.forward(tape, p, f);
            let f = tape.mul(g3, f);
            x = tape.add(x, f);
        }

        let fm = self.final_modulation.forward(tape, p, c);
        let fm = tape.gather_rows(fm, node_graph);
        let shift = tape.slice_cols(fm, 0, w);
        let scale = tape.slice_cols(fm, w, w);
        let x = Self::modulate(tape, x, shift, scale);
        self.out.forward(tape, p, x)
    }

    fn check_latent(&self, zt: &Tensor, cond: &Conditioning) -> Result<(), ModelError> {
        if zt.shape() != (cond.len(), self.config.latent_dim) {
            return Err(ModelError::Shape(format!(
                "latent {:?} but conditioning has {} nodes and model latent width {}",
                zt.shape(),
                cond.len(),
                self.config.latent_dim
            )));
        }
        Ok(())
    }

    /// Noise prediction for a single graph.
    pub fn denoise(&self, zt: &Tensor, cond: &Conditioning) -> Result<Tensor, ModelError> {
        self.check_latent(zt, cond)?;
        let inputs = DitInputs::new(&[cond], &self.config)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let z = tape.leaf(zt.clone());
        let out = self.forward_vars(&mut tape, &p, z, &inputs);
        Ok(tape.value(out).clone())
    }

    /// Noise predictions for many graphs in one pass.
    pub fn denoise_batch(&self, zts: &[Tensor], conds: &[&Conditioning]) -> Result<Vec<Tensor>, ModelError> {
        for (z, c) in zts.iter().zip(conds) {
            self.check_latent(z, c)?;
        }
        let inputs = DitInputs::new(conds, &self.config)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let z = tape.leaf(stack(zts));
        let out = self.forward_vars(&mut tape, &p, z, &inputs);
        Ok(split(tape.value(out), &inputs.graphs))
    }

    /// `‖ε_φ(z_t, t, J_xy, E, c_text) − ε‖²` with `z_t` built from `z0` and `eps`.
    pub fn loss(&self, z0: &Tensor, cond: &Conditioning, eps: &Tensor) -> Result<f64, ModelError> {
        let zt = add_noise(z0, cond.t, eps, &self.schedule())?;
        let pred = self.denoise(&zt, cond)?;
        Ok(pred.data.iter().zip(&eps.data).map(|(a, b)| (a - b) * (a - b)).sum())
    }

    /// [`loss`](Self::loss) with its gradient per parameter tensor.
    pub fn loss_and_grad(&self, z0: &Tensor, cond: &Conditioning, eps: &Tensor) -> Result<(f64, Vec<Tensor>), ModelError> {
        let zt = add_noise(z0, cond.t, eps, &self.schedule())?;
        self.check_latent(&zt, cond)?;
        let inputs = DitInputs::new(&[cond], &self.config)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let z = tape.leaf(zt);
        let e = tape.leaf(eps.clone());
        let pred = self.forward_vars(&mut tape, &p, z, &inputs);
        let diff = tape.sub(pred, e);
        let sq = tape.square(diff);
        let loss = tape.sum(sq);
        let value = tape.value(loss).item();
        Ok((value, p.grads(tape.backward(loss), &self.params)))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
            meta: json!({ "latent_scale": self.latent_scale }),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        ckpt.expect_kind(CHECKPOINT_KIND)?;
        let config: DitConfig =
            serde_json::from_value(ckpt.config.clone()).map_err(|e| ModelError::Checkpoint(format!("dit config: {e}")))?;
        let latent_scale = ckpt
            .meta
            .get("latent_scale")
            .and_then(|v| v.as_f64())
            .ok_or_else(|| ModelError::Checkpoint("missing latent_scale".into()))?;
        let mut dit = Self::new(config, 0)?;
        dit.params.load_from(&ckpt.params).map_err(ModelError::Checkpoint)?;
        dit.latent_scale = latent_scale;
        Ok(dit)
    }
}

pub(crate) fn stack(ts: &[Tensor]) -> Tensor {
    let cols = ts.first().map(|t| t.cols).unwrap_or(0);
    let rows = ts.iter().map(|t| t.rows).sum();
    Tensor::from_vec(rows, cols, ts.iter().flat_map(|t| t.data.iter().copied()).collect())
}

pub(crate) fn split(t: &Tensor, graphs: &GraphBatch) -> Vec<Tensor> {
    crate::skvae::split_rows(t, graphs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DitTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Probability of dropping the caption for classifier-free guidance.
    pub p_uncond: f64,
    /// Probability of appending each descriptive or view tag to a caption.
    pub p_tag: f64,
    /// Train on sampled latents instead of encoder means.
    pub sample_latents: bool,
    pub stroke: StrokeSimConfig,
    /// Stop once the trailing mean loss falls below a threshold.
    pub early_stop: Option<EarlyStop>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    pub threshold: f64,
    pub window: usize,
}

impl Default for DitTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 128,
            adam: AdamConfig::with_lr(1e-4),
            seed: 0,
            p_uncond: 0.1,
            p_tag: 0.5,
            sample_latents: false,
            stroke: StrokeSimConfig::default(),
            early_stop: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DitTrainReport {
    /// Mean squared error per latent entry at every step.
    pub losses: Vec<f64>,
    pub conditional: usize,
    pub unconditional: usize,
}

impl DitTrainReport {
    /// First step after which the trailing `window`-step mean falls below `threshold`.
    pub fn steps_to(&self, threshold: f64, window: usize) -> Option<usize> {
        steps_to_threshold(&self.losses, threshold, window)
    }
}

pub fn steps_to_threshold(losses: &[f64], threshold: f64, window: usize) -> Option<usize> {
    let window = window.max(1);
    let mut sum = 0.0;
    for (i, l) in losses.iter().enumerate() {
        sum += l;
        if i >= window {
            sum -= losses[i - window];
        }
        if i + 1 >= window && sum / (window as f64) < threshold {
            return Some(i + 1);
        }
    }
    None
}

/// Embeds prompts once and remembers them.
pub struct EmbeddingCache<'a> {
    embedder: &'a dyn TextEmbedder,
    cache: BTreeMap<String, Vec<f64>>,
}

impl<'a> EmbeddingCache<'a> {
    pub fn new(embedder: &'a dyn TextEmbedder) -> Self {
        Self { embedder, cache: BTreeMap::new() }
    }

    pub fn get(&mut self, text: &str) -> Result<Vec<f64>, ModelError> {
        if let Some(v) = self.cache.get(text) {
            return Ok(v.clone());
        }
        let v = self.embedder.embed(text).map_err(|e| ModelError::Config(format!("text embedding: {e}")))?.vector;
        self.cache.insert(text.to_string(), v.clone());
        Ok(v)
    }
}

/// Root-mean-square of all encoder means; targets are scaled by its inverse.
pub fn latent_rms(means: &[Tensor]) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for m in means {
        s += m.data.iter().map(|v| v * v).sum::<f64>();
        n += m.data.len();
    }
    (s / n.max(1) as f64).sqrt()
}

/// Trains `dit` on encoder latents of `data` with simulated strokes.
///
/// On a fresh model (`latent_scale == 1` and no steps taken yet) the latent
/// scale is set from the data first.
pub fn train_dit(
    dit: &mut SkDit,
    vae: &SkVae,
    data: &[DatasetRecord],
    embedder: &dyn TextEmbedder,
    cfg: &DitTrainConfig,
) -> Result<DitTrainReport, ModelError> {
    if data.is_empty() {
        return Err(ModelError::Config("empty training set".into()));
    }
    if vae.latent_dim() != dit.config.latent_dim {
        return Err(ModelError::Config(format!(
            "VAE latent width {} does not match DiT latent width {}",
            vae.latent_dim(),
            dit.config.latent_dim
        )));
    }
    if embedder.width() != dit.config.text_dim {
        return Err(ModelError::Config(format!(
            "text embedder width {} does not match DiT text width {}",
            embedder.width(),
            dit.config.text_dim
        )));
    }
    let skeletons: Vec<SkeletonGraph> = data.iter().map(|r| r.skeleton.clone()).collect();
    let latents: Vec<_> = skeletons.iter().map(|g| vae.encode(g)).collect::<Result<_, _>>()?;
    let means: Vec<Tensor> = latents.iter().map(|l| l.mu.clone()).collect();
    if dit.latent_scale == 1.0 {
        let rms = latent_rms(&means);
        if rms > 0.0 && rms.is_finite() {
            dit.latent_scale = 1.0 / rms;
        }
    }
    let scale = dit.latent_scale;
    let schedule = dit.schedule();
    let mut texts = EmbeddingCache::new(embedder);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.adam.clone(), &dit.params);
    let d = dit.config.latent_dim;
    let mut report = DitTrainReport { losses: Vec::with_capacity(cfg.steps), conditional: 0, unconditional: 0 };
    for step in 0..cfg.steps {
        let mut conds = Vec::with_capacity(cfg.batch_size);
        let mut zts = Vec::with_capacity(cfg.batch_size);
        let mut epss = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size.max(1) {
            let i = rng.random_range(0..data.len());
            let rec = &data[i];
            let stroke = simulate_stroke(&rec.skeleton, &mut rng, &cfg.stroke);
            let prompt = sampled_prompt(&rec.caption, &rec.tags, stroke.view, cfg.p_tag, &mut rng);
            let dropped = rng.random::<f64>() < cfg.p_uncond;
            let text = if dropped {
                report.unconditional += 1;
                None
            } else {
                report.conditional += 1;
                Some(texts.get(&prompt)?)
            };
            let t = rng.random_range(1..=schedule.steps());
            let n = rec.skeleton.len();
            let z0 = if cfg.sample_latents {
                let e = standard_normal(&mut rng, n, d);
                crate::skvae::reparameterize(&latents[i], &e)?
            } else {
                means[i].clone()
            };
            let z0 = z0.map(|v| v * scale);
            let eps = standard_normal(&mut rng, n, d);
            zts.push(add_noise(&z0, t, &eps, &schedule)?);
            epss.push(eps);
            conds.push(Conditioning::from_stroke(&stroke, text, t));
        }
        let refs: Vec<&Conditioning> = conds.iter().collect();
        let inputs = DitInputs::new(&refs, &dit.config)?;
        let mut tape = Tape::new();
        let p = dit.params.bind(&mut tape);
        let z = tape.leaf(stack(&zts));
        let eps = tape.leaf(stack(&epss));
        let pred = dit.forward_vars(&mut tape, &p, z, &inputs);
        let diff = tape.sub(pred, eps);
        let sq = tape.square(diff);
        let loss = tape.mean(sq);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(ModelError::Diverged(step));
        }
        let grads = p.grads(tape.backward(loss), &dit.params);
        opt.step(&mut dit.params, &grads);
        report.losses.push(value);
        if let Some(stop) = cfg.early_stop {
            if steps_to_threshold(&report.losses[report.losses.len().saturating_sub(stop.window)..], stop.threshold, stop.window).is_some() {
                break;
            }
        }
    }
    Ok(report)
}

/// One generation request.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRequest {
    pub stroke: StrokeGraph2D,
    pub text: Option<Vec<f64>>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    /// Decoded joints over the stroke's topology.
    pub skeleton: SkeletonGraph,
    /// Final latent in diffusion (scaled) units.
    pub latent: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Classifier-free guidance weight on the text condition.
    pub guidance: f64,
    /// Number of reverse steps; fewer than `T` respaces the schedule evenly.
    pub steps: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { guidance: 3.0, steps: None }
    }
}

/// Increasing timesteps visited by the sampler, always ending at `T`.
pub fn respaced_timesteps(total: usize, steps: Option<usize>) -> Vec<usize> {
    let s = steps.unwrap_or(total).clamp(1, total);
    if s == total {
        return (1..=total).collect();
    }
    let mut ts: Vec<usize> = (0..s)
        .map(|i| if s == 1 { total } else { 1 + ((total - 1) as f64 * i as f64 / (s - 1) as f64).round() as usize })
        .collect();
    ts.dedup();
    ts
}

/// Ancestral sampling for a batch of requests, each with its own seeded noise
/// stream, followed by decoding over the stroke topology.
pub fn sample_batch(
    dit: &SkDit,
    vae: &SkVae,
    requests: &[SampleRequest],
    sampler: &SamplerConfig,
) -> Result<Vec<SampleOutput>, ModelError> {
    let schedule = dit.schedule();
    let d = dit.config.latent_dim;
    if !sampler.guidance.is_finite() || sampler.steps == Some(0) {
        return Err(ModelError::Config("guidance must be finite and steps positive".into()));
    }
    for r in requests {
        let report = validate_stroke(&r.stroke);
        if !report.is_valid() {
            return Err(ModelError::Invalid(report));
        }
        if let Some(t) = &r.text {
            if t.len() != dit.config.text_dim {
                return Err(ModelError::Shape(format!("text width {} but model uses {}", t.len(), dit.config.text_dim)));
            }
        }
    }
    let w = sampler.guidance;
    let mut rngs: Vec<ChaCha8Rng> = requests.iter().map(|r| ChaCha8Rng::seed_from_u64(r.seed)).collect();
    let mut z: Vec<Tensor> = requests.iter().zip(&mut rngs).map(|(r, rng)| standard_normal(rng, r.stroke.len(), d)).collect();
    let guided: Vec<bool> = requests.iter().map(|r| r.text.is_some() && w != 1.0).collect();
    let visits = respaced_timesteps(schedule.steps(), sampler.steps);
    for (k_step, &t) in visits.iter().enumerate().rev() {
        let t_prev = if k_step == 0 { 0 } else { visits[k_step - 1] };
        let mut conds = Vec::new();
        let mut zs = Vec::new();
        for (i, r) in requests.iter().enumerate() {
            conds.push(Conditioning::from_stroke(&r.stroke, r.text.clone(), t));
            zs.push(z[i].clone());
            if guided[i] {
                conds.push(Conditioning::from_stroke(&r.stroke, None, t));
                zs.push(z[i].clone());
            }
        }
        let refs: Vec<&Conditioning> = conds.iter().collect();
        let preds = dit.denoise_batch(&zs, &refs)?;
        let ab = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar(t_prev);
        let alpha = ab / ab_prev;
        let beta = 1.0 - alpha;
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let sd = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
        let mut k = 0;
        for i in 0..requests.len() {
            let eps = if guided[i] {
                let e = guide(&preds[k + 1], &preds[k], w);
                k += 2;
                e
            } else {
                k += 1;
                preds[k - 1].clone()
            };
            let zi = &z[i];
            let mut next = Tensor::zeros(zi.rows, zi.cols);
            for e in 0..zi.data.len() {
                let x0 = (zi.data[e] - (1.0 - ab).sqrt() * eps.data[e]) / ab.sqrt();
                next.data[e] = c0 * x0 + ct * zi.data[e];
            }
            if t_prev > 0 {
                let noise = standard_normal(&mut rngs[i], zi.rows, zi.cols);
                for (v, n) in next.data.iter_mut().zip(&noise.data) {
                    *v += sd * n;
                }
            }
            z[i] = next;
        }
    }
    let mut out = Vec::with_capacity(requests.len());
    for (r, latent) in requests.iter().zip(z) {
        let x = vae.decode(&latent.map(|v| v / dit.latent_scale), &r.stroke.edges)?;
        let joints = (0..x.rows).map(|j| [x.get(j, 0), x.get(j, 1), x.get(j, 2)]).collect();
        let skeleton = SkeletonGraph { joints, edges: r.stroke.edges.clone(), ..Default::default() };
        out.push(SampleOutput { skeleton, latent });
    }
    Ok(out)
}

pub fn sample(dit: &SkDit, vae: &SkVae, request: &SampleRequest, sampler: &SamplerConfig) -> Result<SampleOutput, ModelError> {
    Ok(sample_batch(dit, vae, std::slice::from_ref(request), sampler)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skvae::VaeConfig;
    use strokerig_core::textenc::HashEmbedder;

    fn tiny_config() -> DitConfig {
        DitConfig { width: 16, blocks: 1, heads: 2, text_dim: 8, text_tokens: 2, mlp_ratio: 2, timesteps: 10, ..DitConfig::default() }
    }

    fn path_cond(n: usize, t: usize, text: Option<Vec<f64>>) -> Conditioning {
        let jxy = Tensor::from_vec(n, 2, (0..2 * n).map(|i| (i as f64 * 0.3).sin()).collect());
        let edges = (1..n).map(|i| Edge::new(i - 1, i).unwrap()).collect();
        Conditioning { jxy, edges, text, t }
    }

    #[test]
    fn cosine_schedule_invariants() {
        for steps in [1, 10, 50, 1000] {
            let s = NoiseSchedule::cosine(steps);
            assert_eq!(s.alpha_bar(0), 1.0);
            assert!((s.alpha_bar(steps) - NoiseSchedule::ALPHA_MIN).abs() < 1e-18);
            assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
            assert!(NoiseSchedule::from_alpha_bar(s.alpha_bars().to_vec()).is_ok());
        }
        assert!(NoiseSchedule::from_alpha_bar(vec![1.0, 0.5, 0.5, 1e-5]).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![1.0, 0.01]).is_err());
    }

    #[test]
    fn add_noise_boundaries() {
        let s = NoiseSchedule::cosine(50);
        let z0 = Tensor::from_rows(&[[0.3, -1.2]]);
        let e = Tensor::from_rows(&[[1.5, 0.25]]);
        assert_eq!(add_noise(&z0, 0, &e, &s).unwrap(), z0);
        let zt = add_noise(&Tensor::zeros(1, 2), 50, &e, &s).unwrap();
        let k = 0.9999f64.sqrt();
        assert!((zt.data[0] - k * 1.5).abs() < 1e-15 && (zt.data[1] - k * 0.25).abs() < 1e-15);
        assert!(add_noise(&z0, 51, &e, &s).is_err());
    }

    #[test]
    fn perfect_denoiser_recovers_signal() {
        let s = NoiseSchedule::cosine(50);
        let z0 = Tensor::from_rows(&[[0.3, -1.2], [2.0, 0.1]]);
        let e = Tensor::from_rows(&[[1.5, 0.25], [-0.7, 0.9]]);
        for t in [1, 17, 50] {
            let zt = add_noise(&z0, t, &e, &s).unwrap();
            let a = s.alpha_bar(t);
            for k in 0..4 {
                assert!((zt.data[k] - (1.0 - a).sqrt() * e.data[k] - a.sqrt() * z0.data[k]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn guidance_identity_at_one() {
        let u = Tensor::from_rows(&[[0.1, 0.2]]);
        let c = Tensor::from_rows(&[[0.7, -0.3]]);
        assert_eq!(guide(&u, &c, 1.0), c);
        assert_eq!(guide(&u, &c, 0.0), u);
        assert!((guide(&u, &c, 3.0).data[0] - (0.1 + 3.0 * 0.6)).abs() < 1e-15);
    }

    #[test]
    fn rigged_output_gives_closed_form_loss() {
        let mut dit = SkDit::new(tiny_config(), 0).unwrap();
        let cond = path_cond(4, 5, None);
        let z0 = Tensor::from_vec(4, 8, (0..32).map(|i| i as f64 / 10.0).collect());
        let zero = Tensor::zeros(4, 8);
        // Zero-initialised output map predicts exactly zero noise.
        assert_eq!(dit.loss(&z0, &cond, &zero).unwrap(), 0.0);
        dit.output_bias_mut().data.fill(0.25);
        let l = dit.loss(&z0, &cond, &zero).unwrap();
        assert!((l - 4.0 * 8.0 * 0.0625).abs() < 1e-12);
    }

    #[test]
    fn denoise_is_deterministic_and_text_sensitive() {
        let mut dit = SkDit::new(DitConfig { zero_init: false, ..tiny_config() }, 1).unwrap();
        dit.params.perturb(&mut ChaCha8Rng::seed_from_u64(2), 0.1);
        let z = Tensor::from_vec(3, 8, (0..24).map(|i| (i as f64).cos()).collect());
        let text = HashEmbedder::new(8).embed_vec("a fox");
        let with = path_cond(3, 4, Some(text));
        let without = path_cond(3, 4, None);
        let a = dit.denoise(&z, &with).unwrap();
        assert_eq!(a, dit.denoise(&z, &with).unwrap());
        assert_ne!(a, dit.denoise(&z, &without).unwrap());
        assert!(dit.denoise(&Tensor::zeros(2, 8), &with).is_err());
    }

    #[test]
    fn single_block_is_local_in_stroke_coordinates() {
        let dit = SkDit::new(DitConfig { zero_init: false, ..tiny_config() }, 3).unwrap();
        let z = Tensor::from_vec(5, 8, (0..40).map(|i| (i as f64 * 0.7).sin()).collect());
        let cond = path_cond(5, 3, Some(HashEmbedder::new(8).embed_vec("tree")));
        let mut moved = cond.clone();
        moved.jxy.row_mut(4).copy_from_slice(&[3.0, -2.0]);
        let a = dit.denoise(&z, &cond).unwrap();
        let b = dit.denoise(&z, &moved).unwrap();
        for i in 0..3 {
            assert_eq!(a.row(i), b.row(i), "row {i} saw a non-neighbour");
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn batched_denoise_matches_single() {
        let dit = SkDit::new(DitConfig { zero_init: false, ..tiny_config() }, 4).unwrap();
        let c1 = path_cond(3, 2, Some(HashEmbedder::new(8).embed_vec("a")));
        let c2 = path_cond(4, 7, None);
        let z1 = Tensor::from_vec(3, 8, (0..24).map(|i| i as f64 * 0.01).collect());
        let z2 = Tensor::from_vec(4, 8, (0..32).map(|i| -(i as f64) * 0.02).collect());
        let batch = dit.denoise_batch(&[z1.clone(), z2.clone()], &[&c1, &c2]).unwrap();
        let single1 = dit.denoise(&z1, &c1).unwrap();
        let single2 = dit.denoise(&z2, &c2).unwrap();
        for (a, b) in batch[0].data.iter().zip(&single1.data).chain(batch[1].data.iter().zip(&single2.data)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn steps_to_threshold_uses_trailing_mean() {
        let l = [1.0, 0.5, 0.1, 0.02, 0.01, 0.2];
        assert_eq!(steps_to_threshold(&l, 0.05, 1), Some(4));
        assert_eq!(steps_to_threshold(&l, 0.05, 2), Some(5));
        assert_eq!(steps_to_threshold(&l, 0.001, 2), None);
    }

    #[test]
    fn training_counts_and_reproducibility() {
        let data = crate::toy::dataset(3, 0);
        let vae = SkVae::new(VaeConfig { width: 16, heads: 2, ..Default::default() }, 0).unwrap();
        let embed = HashEmbedder::new(8);
        let cfg = DitTrainConfig { steps: 3, batch_size: 4, p_uncond: 0.0, ..Default::default() };
        let mut a = SkDit::new(tiny_config(), 0).unwrap();
        let ra = train_dit(&mut a, &vae, &data, &embed, &cfg).unwrap();
        assert_eq!(ra.unconditional, 0);
        assert_eq!(ra.conditional, 12);
        let mut b = SkDit::new(tiny_config(), 0).unwrap();
        let rb = train_dit(&mut b, &vae, &data, &embed, &cfg).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.params, b.params);
        let all = DitTrainConfig { p_uncond: 1.0, ..cfg.clone() };
        let rc = train_dit(&mut SkDit::new(tiny_config(), 0).unwrap(), &vae, &data, &embed, &all).unwrap();
        assert_eq!(rc.conditional, 0);
        let stop = DitTrainConfig { steps: 10, early_stop: Some(EarlyStop { threshold: 1e9, window: 2 }), ..cfg };
        let rd = train_dit(&mut SkDit::new(tiny_config(), 0).unwrap(), &vae, &data, &embed, &stop).unwrap();
        assert_eq!(rd.losses.len(), 2);
    }

    #[test]
    fn sampling_passes_topology_through() {
        let vae = SkVae::new(VaeConfig { width: 16, heads: 2, ..Default::default() }, 0).unwrap();
        let mut dit = SkDit::new(DitConfig { zero_init: false, ..tiny_config() }, 5).unwrap();
        dit.params.perturb(&mut ChaCha8Rng::seed_from_u64(9), 0.05);
        let g = &crate::toy::dataset(1, 3)[0].skeleton;
        let stroke = g.project(strokerig_core::View::Front).unwrap();
        let req = SampleRequest { stroke: stroke.clone(), text: Some(HashEmbedder::new(8).embed_vec("a fox")), seed: 7 };
        let cfg = SamplerConfig::default();
        let a = sample(&dit, &vae, &req, &cfg).unwrap();
        assert_eq!(a.skeleton.edges, stroke.edges);
        assert_eq!(a.skeleton.len(), stroke.len());
        assert_eq!(a, sample(&dit, &vae, &req, &cfg).unwrap());
        let other = sample(&dit, &vae, &SampleRequest { seed: 8, ..req.clone() }, &cfg).unwrap();
        assert_ne!(a.skeleton.joints, other.skeleton.joints);
        let batch = sample_batch(&dit, &vae, &[req.clone(), SampleRequest { seed: 8, ..req }], &cfg).unwrap();
        assert_eq!(batch[1].skeleton, other.skeleton);
    }

    #[test]
    fn respacing_covers_both_ends() {
        assert_eq!(respaced_timesteps(50, None), (1..=50).collect::<Vec<_>>());
        assert_eq!(respaced_timesteps(50, Some(80)), (1..=50).collect::<Vec<_>>());
        let r = respaced_timesteps(50, Some(10));
        assert_eq!(r.len(), 10);
        assert_eq!((r[0], r[9]), (1, 50));
        assert!(r.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(respaced_timesteps(50, Some(1)), vec![50]);
    }

    #[test]
    fn checkpoint_round_trip_keeps_scale() {
        let mut dit = SkDit::new(tiny_config(), 0).unwrap();
        dit.latent_scale = 0.37;
        let back = SkDit::from_checkpoint(&dit.to_checkpoint()).unwrap();
        assert_eq!(back.latent_scale, 0.37);
        assert_eq!(back.params, dit.params);
    }
}
