//! Dataset records, manifest filtering, caption jobs and prompt tagging.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::align::mirror_symmetry_error;
use crate::skeleton::{SkeletonGraph, View};
use crate::validate::{validate, ViolationCode};
use crate::MAX_TRAINING_JOINTS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub skeleton: SkeletonGraph,
    pub caption: String,
    #[serde(default)]
    pub tags: Vec<String>,
    pub source_id: String,
}

impl DatasetRecord {
    pub fn category_label(&self) -> &str {
        self.skeleton.category.as_ref().map(|c| c.as_str()).unwrap_or("other")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("empty caption for {0}")]
    EmptyCaption(String),
    #[error("caption client failed: {0}")]
    Client(String),
}

/// Reads a JSON-Lines manifest. Blank lines are skipped.
pub fn read_manifest<R: BufRead>(reader: R) -> Result<Vec<DatasetRecord>, DataError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| DataError::Record { line: i + 1, message: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_manifest<W: Write>(mut writer: W, records: &[DatasetRecord]) -> Result<(), DataError> {
    for r in records {
        serde_json::to_writer(&mut writer, r).map_err(|e| DataError::Record { line: 0, message: e.to_string() })?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterCriteria {
    pub min_joints: usize,
    pub max_joints: usize,
    /// Accepted categories; `None` accepts everything.
    pub categories: Option<Vec<String>>,
    /// Strict mode fails on unreadable lines instead of counting them.
    pub strict: bool,
}

impl Default for FilterCriteria {
    fn default() -> Self {
        Self {
            min_joints: 1,
            max_joints: MAX_TRAINING_JOINTS,
            categories: Some(["character", "anthropomorphic", "animal", "plant"].map(String::from).to_vec()),
            strict: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RejectReason {
    Unreadable,
    NodeCount,
    Category,
    EmptyCaption,
    Invalid(ViolationCode),
}

impl RejectReason {
    pub fn label(&self) -> String {
        match self {
            RejectReason::Unreadable => "UNREADABLE".into(),
            RejectReason::NodeCount => "NODE_COUNT".into(),
            RejectReason::Category => "CATEGORY".into(),
            RejectReason::EmptyCaption => "EMPTY_CAPTION".into(),
            RejectReason::Invalid(c) => c.as_str().into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FilterStats {
    pub input: usize,
    pub output: usize,
    pub rejected: BTreeMap<String, usize>,
}

/// Why `record` fails `criteria`, if it does. Coordinates are not required to
/// be normalized here; that happens when training data is prepared.
pub fn rejection(record: &DatasetRecord, criteria: &FilterCriteria) -> Option<RejectReason> {
    let n = record.skeleton.len();
    if n < criteria.min_joints.max(1) || n > criteria.max_joints {
        return Some(RejectReason::NodeCount);
    }
    if let Some(allowed) = &criteria.categories {
        let label = record.skeleton.category.as_ref().map(|c| c.as_str());
        if !label.is_some_and(|l| allowed.iter().any(|a| a.eq_ignore_ascii_case(l))) {
            return Some(RejectReason::Category);
        }
    }
    if record.caption.trim().is_empty() {
        return Some(RejectReason::EmptyCaption);
    }
    validate(&record.skeleton)
        .violations
        .iter()
        .map(|v| v.code)
        .find(|c| !matches!(c, ViolationCode::Unnormalized | ViolationCode::NodeCount))
        .map(RejectReason::Invalid)
}

/// Applies `criteria` to already-parsed records, keeping their order.
pub fn filter_records(records: &[DatasetRecord], criteria: &FilterCriteria) -> (Vec<DatasetRecord>, FilterStats) {
    let mut stats = FilterStats { input: records.len(), ..Default::default() };
    let mut kept = Vec::new();
    for r in records {
        match rejection(r, criteria) {
            None => kept.push(r.clone()),
            Some(reason) => *stats.rejected.entry(reason.label()).or_default() += 1,
        }
    }
    stats.output = kept.len();
    (kept, stats)
}

/// Streams a JSONL manifest through the filter. Unparseable lines count as
/// `UNREADABLE` unless `criteria.strict` is set.
pub fn filter_manifest<R: BufRead>(reader: R, criteria: &FilterCriteria) -> Result<(Vec<DatasetRecord>, FilterStats), DataError> {
    let mut stats = FilterStats::default();
    let mut kept = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        stats.input += 1;
        let rec: DatasetRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) if criteria.strict => return Err(DataError::Record { line: i + 1, message: e.to_string() }),
            Err(e) => {
                log::warn!("skipping unreadable manifest line {}: {e}", i + 1);
                *stats.rejected.entry(RejectReason::Unreadable.label()).or_default() += 1;
                continue;
            }
        };
        match rejection(&rec, criteria) {
            None => kept.push(rec),
            Some(reason) => *stats.rejected.entry(reason.label()).or_default() += 1,
        }
    }
    stats.output = kept.len();
    Ok((kept, stats))
}

/// Channel and texture listing for a mesh asset.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AssetDescriptor {
    #[serde(default)]
    pub channels: Vec<String>,
    #[serde(default)]
    pub texture_maps: Vec<String>,
}

fn is_vertex_color_channel(name: &str) -> bool {
    let n = name.to_ascii_lowercase().replace(['-', ' '], "_");
    n == "cd" || n == "color" || n.starts_with("color_") || n.contains("vertex_color") || n == "vertexcolor" || n == "colors"
}

/// True when the asset has a vertex-colour channel or any texture map.
pub fn has_texture(asset: &AssetDescriptor) -> bool {
    asset.channels.iter().any(|c| is_vertex_color_channel(c)) || !asset.texture_maps.is_empty()
}

/// Joint projections for one orthographic render.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderView {
    pub name: String,
    pub plane: String,
    pub joints2d: Vec<[f64; 2]>,
}

/// Payload sent to a captioning model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionJob {
    pub source_id: String,
    pub category: String,
    pub instruction: String,
    pub views: Vec<RenderView>,
    /// Render metadata (image paths, resolution, ...) passed through untouched.
    #[serde(default)]
    pub renders: serde_json::Value,
    #[serde(skip)]
    pub record: Option<DatasetRecord>,
}

pub const CAPTION_INSTRUCTION: &str = "These are orthogonal views (front, side, top) of one rigged 3D asset. \
Describe the object's identity and its pose in one short sentence.";

pub fn caption_request(record: &DatasetRecord, renders: serde_json::Value) -> CaptionJob {
    let g = &record.skeleton;
    let views = [(View::Front, "xy"), (View::Side, "zy"), (View::Top, "xz")]
        .into_iter()
        .map(|(v, plane)| RenderView {
            name: v.as_str().into(),
            plane: plane.into(),
            joints2d: g.project(v).expect("axis view").joints2d,
        })
        .collect();
    CaptionJob {
        source_id: record.source_id.clone(),
        category: record.category_label().to_string(),
        instruction: CAPTION_INSTRUCTION.into(),
        views,
        renders,
        record: Some(record.clone()),
    }
}

pub trait CaptionClient: Send + Sync {
    fn caption(&self, job: &CaptionJob) -> Result<String, String>;
}

/// Offline captioner: `"a {category} in a generic pose"`.
#[derive(Debug, Clone, Default)]
pub struct MockCaptioner;

impl CaptionClient for MockCaptioner {
    fn caption(&self, job: &CaptionJob) -> Result<String, String> {
        Ok(format!("a {} in a generic pose", job.category))
    }
}

/// Descriptive tags derivable from geometry alone.
pub fn descriptive_tags(g: &SkeletonGraph) -> Vec<String> {
    let mut tags = Vec::new();
    if g.len() >= 3 {
        if let Ok(n) = g.normalize() {
            if mirror_symmetry_error(&n, &nalgebra::Vector3::x()) < 0.02 {
                tags.push("symmetry".to_string());
            }
        }
    }
    tags
}

/// Attaches a caption response to the job's record, adding geometric tags.
pub fn ingest_caption(job: &CaptionJob, response: &str) -> Result<DatasetRecord, DataError> {
    let caption = response.trim();
    if caption.is_empty() {
        return Err(DataError::EmptyCaption(job.source_id.clone()));
    }
    let mut record = job.record.clone().ok_or_else(|| DataError::Client("caption job carries no record".into()))?;
    record.caption = caption.to_string();
    for t in descriptive_tags(&record.skeleton) {
        if !record.tags.contains(&t) {
            record.tags.push(t);
        }
    }
    Ok(record)
}

pub fn view_tag(view: View) -> String {
    format!("{} view", view.as_str())
}

/// Prompt with every tag and the view tag appended, as used for evaluation.
pub fn full_prompt(caption: &str, tags: &[String], view: Option<View>) -> String {
    let mut parts = vec![caption.to_string()];
    parts.extend(tags.iter().cloned());
    if let Some(v) = view {
        parts.push(view_tag(v));
    }
    parts.join(", ")
}

/// Training prompt: each descriptive tag and the view tag are appended
/// independently with probability `p_tag`.
pub fn sampled_prompt<R: Rng + ?Sized>(caption: &str, tags: &[String], view: Option<View>, p_tag: f64, rng: &mut R) -> String {
    let mut parts = vec![caption.to_string()];
    for t in tags {
        if rng.random::<f64>() < p_tag {
            parts.push(t.clone());
        }
    }
    if let Some(v) = view {
        if rng.random::<f64>() < p_tag {
            parts.push(view_tag(v));
        }
    }
    parts.join(", ")
}

/// Manifest line for a record, as written by [`write_manifest`].
pub fn record_line(r: &DatasetRecord) -> String {
    json!(r).to_string()
}
