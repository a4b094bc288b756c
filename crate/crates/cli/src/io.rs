use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::Serialize;
use strokerig_core::datakit::{read_manifest, write_manifest, DatasetRecord};
use strokerig_core::json::{skeleton_from_str, stroke_from_str, Mode};
use strokerig_core::{SkeletonGraph, StrokeGraph2D};
use strokerig_model::checkpoint::Checkpoint;
use strokerig_model::pipeline::Pipeline;
use strokerig_model::skdit::SkDit;
use strokerig_model::skvae::SkVae;

use crate::config::Config;
use crate::error::{CliError, Result};
use crate::manifest::sha256_file;
use crate::service::LoadedModel;

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::invalid(format!("cannot read {}: {e}", path.display())))
}

pub fn read_records(path: &Path) -> Result<Vec<DatasetRecord>> {
    let f = fs::File::open(path).map_err(|e| CliError::invalid(format!("cannot open {}: {e}", path.display())))?;
    read_manifest(BufReader::new(f)).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

pub fn write_records(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| CliError::internal(format!("creating {}: {e}", path.display())))?;
    write_manifest(std::io::BufWriter::new(f), records).map_err(CliError::internal)
}

pub fn read_skeleton(path: &Path) -> Result<SkeletonGraph> {
    skeleton_from_str(&read_text(path)?, Mode::Strict).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

pub fn read_stroke(path: &Path) -> Result<StrokeGraph2D> {
    stroke_from_str(&read_text(path)?, Mode::Strict).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::internal(format!("writing {}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value).map_err(CliError::internal)? + "\n"))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut s = String::new();
    for r in rows {
        s += &serde_json::to_string(r).map_err(CliError::internal)?;
        s.push('\n');
    }
    write_text(path, &s)
}

pub fn read_jsonl<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::invalid(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

/// Writes `header` and one line per row.
pub fn write_csv(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s += &r;
        s.push('\n');
    }
    write_text(path, &s)
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::internal(format!("creating {}: {e}", path.display())))
}

/// `out.json` -> `out.json.<suffix>`
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn checkpoint(path: &Path, what: &str, hint: &str) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(CliError::invalid(format!("no {what} checkpoint at {}; {hint}", path.display())));
    }
    Checkpoint::load(path).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

pub fn load_vae(path: &Path) -> Result<SkVae> {
    let c = checkpoint(path, "trained VAE", "train one with `strokerig train-vae <manifest> <dir>` and pass `--vae <dir>/vae.ckpt`")?;
    Ok(SkVae::from_checkpoint(&c)?)
}

pub fn load_dit(path: &Path) -> Result<SkDit> {
    let c = checkpoint(path, "trained denoiser", "train one with `strokerig train-dit <manifest> <dir> --vae <vae.ckpt>` and pass `--dit <dir>/dit.ckpt`")?;
    Ok(SkDit::from_checkpoint(&c)?)
}

/// Loads both checkpoints with the configured embedder and sampler defaults.
/// The version string is derived from the checkpoint bytes.
pub fn load_model(cfg: &Config, vae: &Path, dit: &Path) -> Result<LoadedModel> {
    let mut pipeline = Pipeline::new(load_vae(vae)?, load_dit(dit)?, cfg.text.build()?)?;
    pipeline.sampler = cfg.sampler.clone();
    let version = format!("{}-{}", &sha256_file(vae)?[..8], &sha256_file(dit)?[..8]);
    Ok(LoadedModel { pipeline, version })
}

/// File-name-safe form of a record id.
pub fn safe_name(id: &str) -> String {
    let s: String = id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    if s.is_empty() { "item".into() } else { s }
}
