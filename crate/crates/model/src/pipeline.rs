//! Trained VAE + denoiser + text embedder bundled for generation.

use strokerig_core::textenc::TextEmbedder;
use strokerig_core::StrokeGraph2D;

use crate::error::ModelError;
use crate::skdit::{sample_batch, SampleOutput, SampleRequest, SamplerConfig, SkDit};
use crate::skvae::SkVae;

pub struct Pipeline {
    pub vae: SkVae,
    pub dit: SkDit,
    pub embedder: Box<dyn TextEmbedder>,
    pub sampler: SamplerConfig,
}

/// One generation call: stroke, optional prompt and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub stroke: StrokeGraph2D,
    pub prompt: Option<String>,
    pub seed: u64,
}

impl Pipeline {
    pub fn new(vae: SkVae, dit: SkDit, embedder: Box<dyn TextEmbedder>) -> Result<Self, ModelError> {
        if vae.latent_dim() != dit.config.latent_dim {
            return Err(ModelError::Config(format!(
                "VAE latent width {} does not match DiT latent width {}",
                vae.latent_dim(),
                dit.config.latent_dim
            )));
        }
        if embedder.width() != dit.config.text_dim {
            return Err(ModelError::Config(format!(
                "embedder width {} does not match DiT text width {}",
                embedder.width(),
                dit.config.text_dim
            )));
        }
        Ok(Self { vae, dit, embedder, sampler: SamplerConfig::default() })
    }

    /// Embeds a prompt; blank prompts count as no prompt.
    pub fn embed(&self, prompt: Option<&str>) -> Result<Option<Vec<f64>>, ModelError> {
        match prompt.map(str::trim).filter(|p| !p.is_empty()) {
            None => Ok(None),
            Some(p) => self
                .embedder
                .embed(p)
                .map(|e| Some(e.vector))
                .map_err(|e| ModelError::Config(format!("text embedding: {e}"))),
        }
    }

    pub fn generate(&self, job: &Job) -> Result<SampleOutput, ModelError> {
        Ok(self.generate_batch(std::slice::from_ref(job))?.remove(0))
    }

    /// Samples every job in one batched pass; each result depends only on its own job.
    pub fn generate_batch(&self, jobs: &[Job]) -> Result<Vec<SampleOutput>, ModelError> {
        self.generate_batch_with(jobs, &self.sampler)
    }

    /// [`generate_batch`](Self::generate_batch) with explicit sampler settings.
    pub fn generate_batch_with(&self, jobs: &[Job], sampler: &SamplerConfig) -> Result<Vec<SampleOutput>, ModelError> {
        let requests = jobs
            .iter()
            .map(|j| Ok(SampleRequest { stroke: j.stroke.clone(), text: self.embed(j.prompt.as_deref())?, seed: j.seed }))
            .collect::<Result<Vec<_>, ModelError>>()?;
        sample_batch(&self.dit, &self.vae, &requests, sampler)
    }

    /// Like [`generate_batch`](Self::generate_batch) in chunks of `chunk` jobs.
    pub fn generate_chunked(&self, jobs: &[Job], chunk: usize) -> Result<Vec<SampleOutput>, ModelError> {
        let mut out = Vec::with_capacity(jobs.len());
        for c in jobs.chunks(chunk.max(1)) {
            out.extend(self.generate_batch(c)?);
        }
        Ok(out)
    }
}
