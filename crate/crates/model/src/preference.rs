//! Preference pairs scored by a pluggable scorer and direct preference
//! finetuning of the denoiser against a frozen reference copy.

use std::collections::BTreeSet;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use strokerig_core::metrics::cd_j2j;
use strokerig_core::{SkeletonGraph, StrokeGraph2D, View};

use crate::autodiff::{log_sigmoid, Tape, Tensor, Var};
use crate::error::ModelError;
use crate::params::{AdamConfig, AdamW, Bound};
use crate::pipeline::{Job, Pipeline};
use crate::skdit::{add_noise, stack, Conditioning, DitInputs, SkDit};
use crate::skvae::standard_normal;

/// Scores how well a generated skeleton matches its condition; higher is better.
pub trait Scorer {
    fn name(&self) -> &str;
    /// A value in `[0, 1]`, deterministic in its inputs.
    fn score(&self, condition: &PreferenceCondition, sample: &SkeletonGraph) -> Result<f64, ModelError>;
}

/// `1 − clamp(J2J chamfer between the sample projected into the stroke's view
/// and the stroke, 0, 1)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct CdProxyScorer;

impl Scorer for CdProxyScorer {
    fn name(&self) -> &str {
        "cd-proxy"
    }

    fn score(&self, condition: &PreferenceCondition, sample: &SkeletonGraph) -> Result<f64, ModelError> {
        let stroke = &condition.stroke;
        let view = stroke.view.unwrap_or(View::Front);
        let projected = sample.project(view)?;
        let cd = cd_j2j(&projected.lift(), &stroke.lift()).map_err(|e| ModelError::Config(format!("scoring: {e}")))?;
        Ok(1.0 - cd.clamp(0.0, 1.0))
    }
}

/// A stroke and optional prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceCondition {
    pub id: String,
    pub stroke: StrokeGraph2D,
    #[serde(default)]
    pub prompt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Candidate {
    pub seed: u64,
    pub skeleton: SkeletonGraph,
    /// Final latent in diffusion units, one row per joint.
    pub latent: Vec<Vec<f64>>,
}

impl Candidate {
    pub fn latent_tensor(&self) -> Tensor {
        let cols = self.latent.first().map_or(0, Vec::len);
        Tensor::from_vec(self.latent.len(), cols, self.latent.concat())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferencePair {
    pub condition: PreferenceCondition,
    pub winner: Candidate,
    pub loser: Candidate,
    /// Winner score then loser score.
    pub scores: [f64; 2],
}

impl PreferencePair {
    pub fn seeds(&self) -> [u64; 2] {
        [self.winner.seed, self.loser.seed]
    }
}

/// Samples one candidate per seed for `condition`.
pub fn generate_candidates(
    pipeline: &Pipeline,
    condition: &PreferenceCondition,
    seeds: &[u64],
) -> Result<Vec<Candidate>, ModelError> {
    let distinct: BTreeSet<_> = seeds.iter().collect();
    if distinct.len() != seeds.len() {
        return Err(ModelError::Config(format!("candidate seeds must be distinct, got {seeds:?}")));
    }
    let jobs: Vec<Job> = seeds
        .iter()
        .map(|&seed| Job { stroke: condition.stroke.clone(), prompt: condition.prompt.clone(), seed })
        .collect();
    let outs = pipeline.generate_batch(&jobs)?;
    Ok(seeds.iter().zip(outs).map(|(&seed, o)| candidate(seed, o)).collect())
}

fn candidate(seed: u64, out: crate::skdit::SampleOutput) -> Candidate {
    let latent = (0..out.latent.rows).map(|r| out.latent.row(r).to_vec()).collect();
    Candidate { seed, skeleton: out.skeleton, latent }
}

/// Orders two scored candidates into a pair when their gap reaches `margin`.
pub fn make_pair(
    condition: &PreferenceCondition,
    a: (Candidate, f64),
    b: (Candidate, f64),
    margin: f64,
) -> Option<PreferencePair> {
    let gap = (a.1 - b.1).abs();
    if gap < margin || gap == 0.0 {
        return None;
    }
    let (w, l) = if a.1 > b.1 { (a, b) } else { (b, a) };
    Some(PreferencePair { condition: condition.clone(), scores: [w.1, l.1], winner: w.0, loser: l.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSet {
    pub pairs: Vec<PreferencePair>,
    /// Conditions whose two candidates were closer than the margin.
    pub skipped: usize,
}

/// Seeds used for condition `index`: `seed + 2·index` and the next integer.
pub fn candidate_seeds(seed: u64, index: usize) -> [u64; 2] {
    let s = seed.wrapping_add(2 * index as u64);
    [s, s.wrapping_add(1)]
}

/// Two candidates per condition, scored; a pair is kept when the score gap is
/// at least `margin`.
pub fn build_pairs(
    conditions: &[PreferenceCondition],
    pipeline: &Pipeline,
    scorer: &dyn Scorer,
    margin: f64,
    seed: u64,
) -> Result<PairSet, ModelError> {
    const CHUNK: usize = 32;
    let mut set = PairSet { pairs: Vec::new(), skipped: 0 };
    for (ci, chunk) in conditions.chunks(CHUNK).enumerate() {
        let mut jobs = Vec::with_capacity(2 * chunk.len());
        for (k, c) in chunk.iter().enumerate() {
            for s in candidate_seeds(seed, ci * CHUNK + k) {
                jobs.push(Job { stroke: c.stroke.clone(), prompt: c.prompt.clone(), seed: s });
            }
        }
        let mut outs = pipeline.generate_batch(&jobs)?.into_iter();
        for (k, c) in chunk.iter().enumerate() {
            let [s1, s2] = candidate_seeds(seed, ci * CHUNK + k);
            let a = candidate(s1, outs.next().expect("one output per job"));
            let b = candidate(s2, outs.next().expect("one output per job"));
            let (sa, sb) = (scorer.score(c, &a.skeleton)?, scorer.score(c, &b.skeleton)?);
            match make_pair(c, (a, sa), (b, sb), margin) {
                Some(p) => set.pairs.push(p),
                None => set.skipped += 1,
            }
        }
    }
    Ok(set)
}

/// `−log σ(−β·[(e_θ^w − e_ref^w) − (e_θ^l − e_ref^l)])` from squared errors.
pub fn dpo_objective(theta_win: f64, ref_win: f64, theta_lose: f64, ref_lose: f64, beta: f64) -> f64 {
    -log_sigmoid(-beta * ((theta_win - ref_win) - (theta_lose - ref_lose)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpoConfig {
    pub beta: f64,
    pub margin: f64,
    pub steps: usize,
    /// Pairs per optimiser step.
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self { beta: 1000.0, margin: 0.1, steps: 1000, batch_size: 4, adam: AdamConfig::with_lr(5e-6), seed: 0 }
    }
}

impl DpoConfig {
    pub fn check(&self) -> Result<(), ModelError> {
        if !(self.beta > 0.0) || !(self.margin >= 0.0) {
            return Err(ModelError::Config("dpo requires beta > 0 and margin >= 0".into()));
        }
        Ok(())
    }
}

/// Per-pair draw: shared timestep, separate noise for winner and loser.
#[derive(Debug, Clone, PartialEq)]
pub struct DpoDraw {
    pub t: usize,
    pub eps_win: Tensor,
    pub eps_lose: Tensor,
}

impl DpoDraw {
    pub fn sample<R: Rng + ?Sized>(pair: &PreferencePair, steps: usize, rng: &mut R) -> Self {
        let t = rng.random_range(1..=steps);
        let w = pair.winner.latent_tensor();
        let l = pair.loser.latent_tensor();
        let mut chacha = ChaCha8Rng::seed_from_u64(rng.random());
        Self { t, eps_win: standard_normal(&mut chacha, w.rows, w.cols), eps_lose: standard_normal(&mut chacha, l.rows, l.cols) }
    }
}

/// Noisy latents, targets and conditioning for `[w_0, l_0, w_1, l_1, …]`.
struct DpoBatch {
    zt: Vec<Tensor>,
    eps: Vec<Tensor>,
    conds: Vec<Conditioning>,
}

fn dpo_batch(
    pairs: &[&PreferencePair],
    draws: &[DpoDraw],
    texts: &[Option<Vec<f64>>],
    dit: &SkDit,
) -> Result<DpoBatch, ModelError> {
    let schedule = dit.schedule();
    let mut b = DpoBatch { zt: vec![], eps: vec![], conds: vec![] };
    for ((p, d), text) in pairs.iter().zip(draws).zip(texts) {
        for (c, e) in [(&p.winner, &d.eps_win), (&p.loser, &d.eps_lose)] {
            let z0 = c.latent_tensor();
            if z0.rows != p.condition.stroke.len() || z0.cols != dit.config.latent_dim {
                return Err(ModelError::Shape(format!(
                    "candidate latent {:?} does not fit a {}-joint stroke at latent width {}",
                    z0.shape(),
                    p.condition.stroke.len(),
                    dit.config.latent_dim
                )));
            }
            b.zt.push(add_noise(&z0, d.t, e, &schedule)?);
            b.eps.push(e.clone());
            b.conds.push(Conditioning::from_stroke(&p.condition.stroke, text.clone(), d.t));
        }
    }
    Ok(b)
}

fn squared_errors(pred: &[Tensor], eps: &[Tensor]) -> Vec<f64> {
    pred.iter()
        .zip(eps)
        .map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum())
        .collect()
}

/// Mean pair loss on the tape, with reference errors as constants.
fn dpo_loss_vars(
    tape: &mut Tape,
    theta: &SkDit,
    p: &Bound,
    batch: &DpoBatch,
    ref_errors: &[f64],
    beta: f64,
) -> Result<Var, ModelError> {
    let refs: Vec<&Conditioning> = batch.conds.iter().collect();
    let inputs = DitInputs::new(&refs, &theta.config)?;
    let z = tape.leaf(stack(&batch.zt));
    let eps = tape.leaf(stack(&batch.eps));
    let pred = theta.forward_vars(tape, p, z, &inputs);
    let diff = tape.sub(pred, eps);
    let sq = tape.square(diff);
    let err = tape.segment_sum(sq, inputs.graphs.offsets());
    let g = ref_errors.len();
    let refv = tape.leaf(Tensor::from_vec(g, 1, ref_errors.to_vec()));
    let delta = tape.sub(err, refv);
    let signs = tape.leaf(Tensor::from_vec(g, 1, (0..g).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect()));
    let signed = tape.mul(delta, signs);
    let pair_offsets = Rc::new((0..=g / 2).map(|i| 2 * i).collect::<Vec<_>>());
    let bracket = tape.segment_sum(signed, pair_offsets);
    let logits = tape.scale(bracket, -beta);
    let ls = tape.log_sigmoid(logits);
    let m = tape.mean(ls);
    Ok(tape.scale(m, -1.0))
}

fn check_same_architecture(theta: &SkDit, reference: &SkDit) -> Result<(), ModelError> {
    if theta.config != reference.config || !theta.params.same_layout(&reference.params) {
        return Err(ModelError::Config("policy and reference models differ in architecture".into()));
    }
    Ok(())
}

/// Mean DPO loss over `pairs` for fixed draws.
pub fn dpo_loss(
    theta: &SkDit,
    reference: &SkDit,
    pairs: &[&PreferencePair],
    draws: &[DpoDraw],
    texts: &[Option<Vec<f64>>],
    beta: f64,
) -> Result<f64, ModelError> {
    check_same_architecture(theta, reference)?;
    let batch = dpo_batch(pairs, draws, texts, theta)?;
    let refs: Vec<&Conditioning> = batch.conds.iter().collect();
    let ref_err = squared_errors(&reference.denoise_batch(&batch.zt, &refs)?, &batch.eps);
    let mut tape = Tape::new();
    let p = theta.params.bind(&mut tape);
    let loss = dpo_loss_vars(&mut tape, theta, &p, &batch, &ref_err, beta)?;
    Ok(tape.value(loss).item())
}

/// Loss and flattened parameter gradient, in [`ParamSet`](crate::params::ParamSet) order.
pub fn dpo_loss_and_grad(
    theta: &SkDit,
    reference: &SkDit,
    pairs: &[&PreferencePair],
    draws: &[DpoDraw],
    texts: &[Option<Vec<f64>>],
    beta: f64,
) -> Result<(f64, Vec<Tensor>), ModelError> {
    check_same_architecture(theta, reference)?;
    let batch = dpo_batch(pairs, draws, texts, theta)?;
    let refs: Vec<&Conditioning> = batch.conds.iter().collect();
    let ref_err = squared_errors(&reference.denoise_batch(&batch.zt, &refs)?, &batch.eps);
    let mut tape = Tape::new();
    let p = theta.params.bind(&mut tape);
    let loss = dpo_loss_vars(&mut tape, theta, &p, &batch, &ref_err, beta)?;
    let value = tape.value(loss).item();
    Ok((value, p.grads(tape.backward(loss), &theta.params)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoReport {
    pub losses: Vec<f64>,
    pub pre_score: f64,
    pub post_score: f64,
    pub pairs: usize,
    pub heldout: usize,
}

/// Mean scorer value of one sample per held-out condition, seeds fixed by index.
pub fn mean_score(
    pipeline: &Pipeline,
    conditions: &[PreferenceCondition],
    scorer: &dyn Scorer,
    seed: u64,
) -> Result<f64, ModelError> {
    if conditions.is_empty() {
        return Ok(0.0);
    }
    let jobs: Vec<Job> = conditions
        .iter()
        .enumerate()
        .map(|(i, c)| Job { stroke: c.stroke.clone(), prompt: c.prompt.clone(), seed: seed.wrapping_add(i as u64) })
        .collect();
    let outs = pipeline.generate_chunked(&jobs, 32)?;
    let mut total = 0.0;
    for (c, o) in conditions.iter().zip(&outs) {
        total += scorer.score(c, &o.skeleton)?;
    }
    Ok(total / conditions.len() as f64)
}

/// Finetunes `pipeline.dit` on `pairs` against a frozen copy taken at entry.
pub fn dpo_finetune(
    pipeline: &mut Pipeline,
    pairs: &[PreferencePair],
    heldout: &[PreferenceCondition],
    scorer: &dyn Scorer,
    cfg: &DpoConfig,
) -> Result<DpoReport, ModelError> {
    cfg.check()?;
    if pairs.is_empty() && cfg.steps > 0 {
        return Err(ModelError::Config("empty preference dataset".into()));
    }
    const EVAL_SEED: u64 = 1_000_003;
    let pre_score = mean_score(pipeline, heldout, scorer, EVAL_SEED)?;
    let reference = pipeline.dit.clone();
    let texts: Vec<Option<Vec<f64>>> =
        pairs.iter().map(|p| pipeline.embed(p.condition.prompt.as_deref())).collect::<Result<_, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.adam.clone(), &pipeline.dit.params);
    let steps_t = pipeline.dit.config.timesteps;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size.max(1)).map(|_| rng.random_range(0..pairs.len())).collect();
        let chosen: Vec<&PreferencePair> = idx.iter().map(|&i| &pairs[i]).collect();
        let draws: Vec<DpoDraw> = chosen.iter().map(|p| DpoDraw::sample(p, steps_t, &mut rng)).collect();
        let tx: Vec<Option<Vec<f64>>> = idx.iter().map(|&i| texts[i].clone()).collect();
        let (loss, grads) = dpo_loss_and_grad(&pipeline.dit, &reference, &chosen, &draws, &tx, cfg.beta)?;
        if !loss.is_finite() {
            return Err(ModelError::Diverged(step));
        }
        opt.step(&mut pipeline.dit.params, &grads);
        losses.push(loss);
    }
    let post_score = if cfg.steps == 0 { pre_score } else { mean_score(pipeline, heldout, scorer, EVAL_SEED)? };
    Ok(DpoReport { losses, pre_score, post_score, pairs: pairs.len(), heldout: heldout.len() })
}
