//! Evaluation harnesses: test-set scoring, the joint-drop robustness curve,
//! the stroke-conditioning overfit ablation and the toy preference run.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use strokerig_core::datakit::DatasetRecord;
use strokerig_core::metrics::{CdReport, EvalReport};
use strokerig_core::stroke::{drop_joints, simulate_stroke, StrokeSimConfig};
use strokerig_core::textenc::HashEmbedder;
use strokerig_core::{SkeletonGraph, StrokeGraph2D};

use crate::error::ModelError;
use crate::params::AdamConfig;
use crate::pipeline::{Job, Pipeline};
use crate::preference::{build_pairs, dpo_finetune, CdProxyScorer, DpoConfig, DpoReport, PreferenceCondition};
use crate::skdit::{train_dit, DitConfig, DitTrainConfig, EarlyStop, SkDit};
use crate::skvae::{train_vae, SkVae, VaeConfig, VaeTrainConfig};
use crate::toy;

/// A held-out example: ground truth plus the stroke and prompt the model sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCase {
    pub id: String,
    pub category: String,
    pub gt: SkeletonGraph,
    pub stroke: StrokeGraph2D,
    pub prompt: Option<String>,
}

fn case_rng(seed: u64, i: usize, salt: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ salt);
    r.set_stream(i as u64);
    r
}

/// Simulates one stroke per record; case `i` uses its own rng stream.
pub fn eval_cases(records: &[DatasetRecord], stroke: &StrokeSimConfig, seed: u64) -> Vec<EvalCase> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut rng = case_rng(seed, i, 0x5EED_57A0);
            EvalCase {
                id: r.source_id.clone(),
                category: r.category_label().to_string(),
                stroke: simulate_stroke(&r.skeleton, &mut rng, stroke),
                gt: r.skeleton.clone(),
                prompt: Some(r.caption.clone()).filter(|c| !c.trim().is_empty()),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub report: EvalReport,
    pub predictions: Vec<SkeletonGraph>,
}

const CHUNK: usize = 32;

fn score(pipeline: &Pipeline, cases: &[EvalCase], strokes: Vec<StrokeGraph2D>, seed: u64, spb: usize) -> Result<EvalRun, ModelError> {
    let jobs: Vec<Job> = cases
        .iter()
        .zip(strokes)
        .enumerate()
        .map(|(i, (c, stroke))| Job { stroke, prompt: c.prompt.clone(), seed: seed.wrapping_add(i as u64) })
        .collect();
    let out = pipeline.generate_chunked(&jobs, CHUNK)?;
    let mut items = Vec::with_capacity(cases.len());
    let mut predictions = Vec::with_capacity(cases.len());
    for (c, o) in cases.iter().zip(out) {
        let r = CdReport::compute(&o.skeleton, &c.gt, spb).map_err(|e| ModelError::Config(format!("{}: {e}", c.id)))?;
        items.push((c.category.as_str(), r));
        predictions.push(o.skeleton);
    }
    Ok(EvalRun { report: EvalReport::aggregate(items), predictions })
}

/// Generates for every case (seed `seed + i`) and scores against ground truth.
pub fn evaluate(pipeline: &Pipeline, cases: &[EvalCase], seed: u64, samples_per_bone: usize) -> Result<EvalRun, ModelError> {
    score(pipeline, cases, cases.iter().map(|c| c.stroke.clone()).collect(), seed, samples_per_bone)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropPoint {
    pub k: usize,
    pub report: EvalReport,
}

/// Drops `k` random joints from every stroke and re-evaluates against the
/// full ground truth. Sampling seeds match [`evaluate`], so `k = 0`
/// reproduces it exactly.
pub fn joint_drop_curve(
    pipeline: &Pipeline,
    cases: &[EvalCase],
    ks: &[usize],
    seed: u64,
    samples_per_bone: usize,
) -> Result<Vec<DropPoint>, ModelError> {
    ks.iter()
        .map(|&k| {
            let strokes = cases
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let mut rng = case_rng(seed, i, 0xD809 ^ (k as u64) << 20);
                    drop_joints(&c.stroke, k, &mut rng).map_err(|e| ModelError::Config(format!("{}: dropping {k} joints: {e}", c.id)))
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(DropPoint { k, report: score(pipeline, cases, strokes, seed, samples_per_bone)?.report })
        })
        .collect()
}

/// Settings for the overfit ablation on a handful of toy assets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub samples: usize,
    pub data_seed: u64,
    pub vae: VaeConfig,
    pub vae_steps: usize,
    pub vae_lr: f64,
    pub dit: DitConfig,
    pub batch_size: usize,
    pub lr: f64,
    pub threshold: f64,
    pub window: usize,
    pub max_steps: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            samples: 1,
            data_seed: 7,
            vae: VaeConfig::default(),
            vae_steps: 1500,
            vae_lr: 1e-3,
            dit: DitConfig::desk(),
            batch_size: 4,
            lr: 1e-3,
            threshold: 0.05,
            window: 50,
            max_steps: 2000,
        }
    }
}

impl AblationConfig {
    pub fn five_samples() -> Self {
        Self { samples: 5, batch_size: 8, ..Self::default() }
    }
}

/// Toy assets and the VAE pretrained on them, shared by every seed.
pub struct AblationData {
    pub records: Vec<DatasetRecord>,
    pub vae: SkVae,
}

pub fn ablation_data(cfg: &AblationConfig) -> Result<AblationData, ModelError> {
    let records = toy::dataset(cfg.samples, cfg.data_seed);
    let graphs: Vec<SkeletonGraph> = records.iter().map(|r| r.skeleton.clone()).collect();
    let mut vae = SkVae::new(cfg.vae.clone(), cfg.data_seed)?;
    let vcfg = VaeTrainConfig { steps: cfg.vae_steps, batch_size: 64, adam: AdamConfig::with_lr(cfg.vae_lr), seed: cfg.data_seed };
    train_vae(&mut vae, &graphs, &vcfg)?;
    Ok(AblationData { records, vae })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub seed: u64,
    /// Steps to threshold with stroke coordinates; `None` if the cap was hit.
    pub with_jxy: Option<usize>,
    /// Same for the arm without stroke coordinates, capped at the budget below.
    pub without_jxy: Option<usize>,
    pub without_budget: usize,
    pub seconds: f64,
}

impl AblationRun {
    pub fn jxy_faster(&self) -> bool {
        match (self.with_jxy, self.without_jxy) {
            (Some(w), Some(o)) => w < o,
            (Some(_), None) => true,
            _ => false,
        }
    }
}

fn arm(data: &AblationData, cfg: &AblationConfig, seed: u64, use_jxy: bool, steps: usize) -> Result<Option<usize>, ModelError> {
    let mut dit = SkDit::new(DitConfig { use_jxy, ..cfg.dit.clone() }, seed)?;
    let tcfg = DitTrainConfig {
        steps,
        batch_size: cfg.batch_size,
        adam: AdamConfig::with_lr(cfg.lr),
        seed,
        stroke: StrokeSimConfig::exact_front(),
        early_stop: Some(EarlyStop { threshold: cfg.threshold, window: cfg.window }),
        ..DitTrainConfig::default()
    };
    let embedder = HashEmbedder::new(cfg.dit.text_dim);
    let report = train_dit(&mut dit, &data.vae, &data.records, &embedder, &tcfg)?;
    Ok(report.steps_to(cfg.threshold, cfg.window))
}

/// Trains with and without stroke coordinates from the same seed. The second
/// arm only runs as long as the first needed, which is enough to decide
/// which is faster.
pub fn overfit_ablation(data: &AblationData, cfg: &AblationConfig, seed: u64) -> Result<AblationRun, ModelError> {
    let start = Instant::now();
    let with_jxy = arm(data, cfg, seed, true, cfg.max_steps)?;
    let budget = with_jxy.unwrap_or(cfg.max_steps);
    let without_jxy = arm(data, cfg, seed, false, budget)?;
    Ok(AblationRun { seed, with_jxy, without_jxy, without_budget: budget, seconds: start.elapsed().as_secs_f64() })
}

/// Preference fine-tuning on toy assets: a briefly trained reference model,
/// pairs from one set of conditions and scores on another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyDpoConfig {
    pub records: usize,
    pub data_seed: u64,
    pub vae_steps: usize,
    /// Reference training is kept short so that two samples of the same
    /// condition often differ by more than the margin.
    pub dit_steps: usize,
    pub dit_batch: usize,
    pub lr: f64,
    pub conditions: usize,
    pub pair_seed: u64,
    pub dpo: DpoConfig,
}

impl Default for ToyDpoConfig {
    fn default() -> Self {
        Self {
            records: 200,
            data_seed: 11,
            vae_steps: 1000,
            dit_steps: 150,
            dit_batch: 16,
            lr: 1e-3,
            conditions: 100,
            pair_seed: 5,
            dpo: DpoConfig::default(),
        }
    }
}

/// Conditions built from fresh toy assets with the default stroke perturbation.
pub fn toy_conditions(n: usize, seed: u64) -> Vec<PreferenceCondition> {
    eval_cases(&toy::dataset(n, seed), &StrokeSimConfig::default(), seed)
        .into_iter()
        .map(|c| PreferenceCondition { id: c.id, stroke: c.stroke, prompt: c.prompt })
        .collect()
}

pub fn toy_dpo(cfg: &ToyDpoConfig) -> Result<DpoReport, ModelError> {
    let records = toy::dataset(cfg.records, cfg.data_seed);
    let graphs: Vec<SkeletonGraph> = records.iter().map(|r| r.skeleton.clone()).collect();
    let mut vae = SkVae::new(VaeConfig::default(), 0)?;
    let vcfg = VaeTrainConfig { steps: cfg.vae_steps, batch_size: 32, adam: AdamConfig::with_lr(cfg.lr), seed: 1 };
    train_vae(&mut vae, &graphs, &vcfg)?;
    let dcfg = DitConfig::desk();
    let embedder = HashEmbedder::new(dcfg.text_dim);
    let mut dit = SkDit::new(dcfg.clone(), 0)?;
    let tcfg = DitTrainConfig { steps: cfg.dit_steps, batch_size: cfg.dit_batch, adam: AdamConfig::with_lr(cfg.lr), ..DitTrainConfig::default() };
    train_dit(&mut dit, &vae, &records, &embedder, &tcfg)?;
    let mut pipeline = Pipeline::new(vae, dit, Box::new(HashEmbedder::new(dcfg.text_dim)))?;
    let train = toy_conditions(cfg.conditions, cfg.data_seed + 1);
    let heldout = toy_conditions(cfg.conditions, cfg.data_seed + 2);
    let set = build_pairs(&train, &pipeline, &CdProxyScorer, cfg.dpo.margin, cfg.pair_seed)?;
    dpo_finetune(&mut pipeline, &set.pairs, &heldout, &CdProxyScorer, &cfg.dpo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skdit::SamplerConfig;

    fn tiny_pipeline() -> Pipeline {
        let vae = SkVae::new(VaeConfig { width: 8, heads: 2, latent_dim: 4, ..VaeConfig::default() }, 1).unwrap();
        let dit = SkDit::new(
            DitConfig { width: 8, blocks: 1, heads: 2, latent_dim: 4, text_dim: 16, timesteps: 6, ..DitConfig::default() },
            2,
        )
        .unwrap();
        let mut p = Pipeline::new(vae, dit, Box::new(HashEmbedder::new(16))).unwrap();
        p.sampler = SamplerConfig { guidance: 3.0, steps: None };
        p
    }

    #[test]
    fn drop_zero_matches_plain_evaluation() {
        let p = tiny_pipeline();
        let cases = eval_cases(&toy::dataset(6, 3), &StrokeSimConfig::default(), 4);
        let base = evaluate(&p, &cases, 11, 4).unwrap();
        let curve = joint_drop_curve(&p, &cases, &[0, 2], 11, 4).unwrap();
        assert_eq!(curve[0].report, base.report);
        assert_eq!(curve.len(), 2);
        assert_eq!(curve[1].report.count, 6);
    }

    #[test]
    fn cases_are_reproducible_and_categorised() {
        let recs = toy::dataset(4, 3);
        let a = eval_cases(&recs, &StrokeSimConfig::default(), 1);
        assert_eq!(a, eval_cases(&recs, &StrokeSimConfig::default(), 1));
        assert_ne!(a, eval_cases(&recs, &StrokeSimConfig::default(), 2));
        assert!(a.iter().zip(&recs).all(|(c, r)| c.category == r.category_label() && c.stroke.len() == r.skeleton.len()));
    }

    #[test]
    fn dropping_every_joint_is_an_error() {
        let p = tiny_pipeline();
        let cases = eval_cases(&toy::dataset(1, 3), &StrokeSimConfig::default(), 4);
        let n = cases[0].stroke.len();
        assert!(joint_drop_curve(&p, &cases, &[n], 0, 2).is_err());
    }

    #[test]
    fn faster_rule() {
        let r = |w, o| AblationRun { seed: 0, with_jxy: w, without_jxy: o, without_budget: 10, seconds: 0.0 };
        assert!(r(Some(5), None).jxy_faster());
        assert!(r(Some(5), Some(6)).jxy_faster());
        assert!(!r(Some(5), Some(5)).jxy_faster());
        assert!(!r(None, None).jxy_faster());
    }
}
