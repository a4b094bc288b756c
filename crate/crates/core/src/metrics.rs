//! Chamfer-distance metrics between a predicted and a reference skeleton.
//!
//! Each metric averages two directed means of nearest-neighbour distances:
//! `½·(mean_p d(p, G) + mean_g d(g, P))`. Joint counts may differ between the
//! two graphs; no correspondence is needed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::skeleton::{SkeletonGraph, StrokeGraph2D, View};

pub const DEFAULT_SAMPLES_PER_BONE: usize = 32;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("{0} skeleton has no joints")]
    NoJoints(&'static str),
    #[error("{0} skeleton has no bones")]
    NoBones(&'static str),
    #[error("samples_per_bone must be at least 2")]
    TooFewSamples,
    #[error("reference stroke carries no usable view (front, side or top required)")]
    MissingView,
}

type P3 = [f64; 3];

fn dist(a: &P3, b: &P3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Exact distance from `p` to the segment `a`-`b` by clamped projection.
pub fn point_segment_distance(p: &P3, a: &P3, b: &P3) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    let t = if len2 > 0.0 { ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0) } else { 0.0 };
    if t == 0.0 {
        return dist(p, a);
    }
    if t == 1.0 {
        return dist(p, b);
    }
    let foot = [a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2]];
    dist(p, &foot)
}

fn directed_points(from: &[P3], to: &[P3]) -> f64 {
    let sum: f64 = from
        .iter()
        .map(|p| to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min))
        .sum();
    sum / from.len() as f64
}

fn directed_segments(from: &[P3], to: &[(P3, P3)]) -> f64 {
    let sum: f64 = from
        .iter()
        .map(|p| to.iter().map(|(a, b)| point_segment_distance(p, a, b)).fold(f64::INFINITY, f64::min))
        .sum();
    sum / from.len() as f64
}

/// Symmetric chamfer distance between two non-empty point sets.
pub fn chamfer(a: &[P3], b: &[P3]) -> f64 {
    0.5 * (directed_points(a, b) + directed_points(b, a))
}

fn require_joints(pred: &SkeletonGraph, gt: &SkeletonGraph) -> Result<(), MetricError> {
    if pred.is_empty() {
        return Err(MetricError::NoJoints("predicted"));
    }
    if gt.is_empty() {
        return Err(MetricError::NoJoints("reference"));
    }
    Ok(())
}

pub fn cd_j2j(pred: &SkeletonGraph, gt: &SkeletonGraph) -> Result<f64, MetricError> {
    require_joints(pred, gt)?;
    Ok(chamfer(&pred.joints, &gt.joints))
}

/// Joint-to-bone chamfer. Returns `(value, fell_back)`; when either graph has
/// no bones the joint-to-joint value is returned with `fell_back = true`.
pub fn cd_j2b_flagged(pred: &SkeletonGraph, gt: &SkeletonGraph) -> Result<(f64, bool), MetricError> {
    require_joints(pred, gt)?;
    if pred.edges.is_empty() || gt.edges.is_empty() {
        return Ok((chamfer(&pred.joints, &gt.joints), true));
    }
    let value = 0.5 * (directed_segments(&pred.joints, &gt.bones()) + directed_segments(&gt.joints, &pred.bones()));
    Ok((value, false))
}

pub fn cd_j2b(pred: &SkeletonGraph, gt: &SkeletonGraph) -> Result<f64, MetricError> {
    cd_j2b_flagged(pred, gt).map(|(v, _)| v)
}

/// Evenly spaced points along every bone, endpoints included.
pub fn sample_bones(g: &SkeletonGraph, samples_per_bone: usize) -> Vec<P3> {
    let denom = (samples_per_bone - 1) as f64;
    let mut out = Vec::with_capacity(g.edges.len() * samples_per_bone);
    for (a, b) in g.bones() {
        for s in 0..samples_per_bone {
            let t = s as f64 / denom;
            out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])]);
        }
    }
    out
}

pub fn cd_b2b(pred: &SkeletonGraph, gt: &SkeletonGraph, samples_per_bone: usize) -> Result<f64, MetricError> {
    require_joints(pred, gt)?;
    if samples_per_bone < 2 {
        return Err(MetricError::TooFewSamples);
    }
    if pred.edges.is_empty() {
        return Err(MetricError::NoBones("predicted"));
    }
    if gt.edges.is_empty() {
        return Err(MetricError::NoBones("reference"));
    }
    Ok(chamfer(&sample_bones(pred, samples_per_bone), &sample_bones(gt, samples_per_bone)))
}

/// All three chamfer metrics for one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdReport {
    pub cd_j2j: f64,
    pub cd_j2b: f64,
    pub cd_b2b: f64,
    /// Set when a boneless graph forced J2B/B2B to fall back to J2J.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
}

impl CdReport {
    pub fn compute(pred: &SkeletonGraph, gt: &SkeletonGraph, samples_per_bone: usize) -> Result<Self, MetricError> {
        let cd_j2j = cd_j2j(pred, gt)?;
        let (cd_j2b, fell_back) = cd_j2b_flagged(pred, gt)?;
        let cd_b2b = if fell_back { cd_j2j } else { cd_b2b(pred, gt, samples_per_bone)? };
        Ok(Self { cd_j2j, cd_j2b, cd_b2b, fallback: fell_back })
    }

    pub fn is_finite(&self) -> bool {
        self.cd_j2j.is_finite() && self.cd_j2b.is_finite() && self.cd_b2b.is_finite()
    }
}

/// 2D chamfer between `pred` projected through the reference stroke's view
/// and the stroke itself.
pub fn cd_2d(pred: &SkeletonGraph, reference: &StrokeGraph2D, samples_per_bone: usize) -> Result<CdReport, MetricError> {
    let view = match reference.view {
        Some(v @ (View::Front | View::Side | View::Top)) => v,
        _ => return Err(MetricError::MissingView),
    };
    let projected = pred.project(view).map_err(|_| MetricError::MissingView)?;
    CdReport::compute(&projected.lift(), &reference.lift(), samples_per_bone)
}

/// Mean metrics over a set of evaluated pairs, overall and per category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: CdReport,
    pub per_category: BTreeMap<String, CdReport>,
    pub count: usize,
}

fn mean_report(reports: &[&CdReport]) -> CdReport {
    let n = reports.len().max(1) as f64;
    CdReport {
        cd_j2j: reports.iter().map(|r| r.cd_j2j).sum::<f64>() / n,
        cd_j2b: reports.iter().map(|r| r.cd_j2b).sum::<f64>() / n,
        cd_b2b: reports.iter().map(|r| r.cd_b2b).sum::<f64>() / n,
        fallback: reports.iter().any(|r| r.fallback),
    }
}

impl EvalReport {
    /// Aggregates `(category, report)` items in the given order.
    pub fn aggregate<'a>(items: impl IntoIterator<Item = (&'a str, CdReport)>) -> Self {
        let items: Vec<(&str, CdReport)> = items.into_iter().collect();
        let all: Vec<&CdReport> = items.iter().map(|(_, r)| r).collect();
        let mut groups: BTreeMap<String, Vec<&CdReport>> = BTreeMap::new();
        for (c, r) in &items {
            groups.entry(c.to_string()).or_default().push(r);
        }
        EvalReport {
            overall: mean_report(&all),
            per_category: groups.into_iter().map(|(k, v)| (k, mean_report(&v))).collect(),
            count: items.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(joints: Vec<P3>, edges: &[(usize, usize)]) -> SkeletonGraph {
        SkeletonGraph::new(joints, edges.iter().copied()).unwrap()
    }

    #[test]
    fn identical_graphs_score_zero() {
        let a = g(vec![[0.0, 0.0, 0.0], [0.5, 0.2, 0.1], [0.1, 0.9, -0.3]], &[(0, 1), (1, 2)]);
        let r = CdReport::compute(&a, &a, DEFAULT_SAMPLES_PER_BONE).unwrap();
        assert_eq!((r.cd_j2j, r.cd_j2b, r.cd_b2b), (0.0, 0.0, 0.0));
    }

    #[test]
    fn j2j_hand_values() {
        let p = g(vec![[0.0, 0.0, 0.0]], &[]);
        let q = g(vec![[0.03, 0.0, 0.0]], &[]);
        assert!((cd_j2j(&p, &q).unwrap() - 0.03).abs() < 1e-15);
        let p = g(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], &[(0, 1)]);
        let q = g(vec![[0.0, 0.0, 0.0]], &[]);
        assert_eq!(cd_j2j(&p, &q).unwrap(), 0.25);
    }

    #[test]
    fn j2b_perpendicular_and_clamped() {
        let a = [0.0, 0.0, 0.0];
        let b = [1.0, 0.0, 0.0];
        assert!((point_segment_distance(&[0.5, 0.1, 0.0], &a, &b) - 0.1).abs() < 1e-15);
        assert_eq!(point_segment_distance(&[2.0, 0.0, 0.0], &a, &b), 1.0);
        // gt joints lie on the pred bone, so only the pred->gt term is nonzero.
        let gt = g(vec![a, b], &[(0, 1)]);
        let pred = g(vec![[0.0, 0.0, 0.0], [0.5, 0.1, 0.0], [1.0, 0.0, 0.0]], &[(0, 1), (1, 2)]);
        let v = cd_j2b(&pred, &gt).unwrap();
        assert!((v - 0.5 * (0.1 / 3.0)).abs() < 1e-15, "{v}");
    }

    #[test]
    fn j2b_falls_back_without_bones() {
        let p = g(vec![[0.0, 0.0, 0.0]], &[]);
        let q = g(vec![[0.0, 0.2, 0.0], [0.0, 0.4, 0.0]], &[(0, 1)]);
        let (v, flag) = cd_j2b_flagged(&p, &q).unwrap();
        assert!(flag);
        assert_eq!(v, cd_j2j(&p, &q).unwrap());
        assert_eq!(cd_b2b(&p, &q, 32), Err(MetricError::NoBones("predicted")));
    }

    #[test]
    fn parallel_bones_offset() {
        let p = g(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], &[(0, 1)]);
        let q = g(vec![[0.0, 0.05, 0.0], [1.0, 0.05, 0.0]], &[(0, 1)]);
        assert!((cd_b2b(&p, &q, 32).unwrap() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn empty_graph_errors() {
        let p = SkeletonGraph::default();
        let q = g(vec![[0.0; 3]], &[]);
        assert_eq!(cd_j2j(&p, &q), Err(MetricError::NoJoints("predicted")));
    }

    #[test]
    fn two_dimensional_hand_case() {
        // Front view drops z; the prediction sits 0.1 above the stroke.
        let pred = g(vec![[0.0, 0.1, 0.7], [1.0, 0.1, -0.3]], &[(0, 1)]);
        let stroke = StrokeGraph2D::new(vec![[0.0, 0.0], [1.0, 0.0]], [(0, 1)]).unwrap().with_view(View::Front);
        let r = cd_2d(&pred, &stroke, 32).unwrap();
        for v in [r.cd_j2j, r.cd_j2b, r.cd_b2b] {
            assert!((v - 0.1).abs() < 1e-15, "{r:?}");
        }
        let no_view = StrokeGraph2D { view: None, ..stroke };
        assert_eq!(cd_2d(&pred, &no_view, 32), Err(MetricError::MissingView));
    }

    #[test]
    fn aggregate_groups_by_category() {
        let r1 = CdReport { cd_j2j: 1.0, cd_j2b: 1.0, cd_b2b: 1.0, fallback: false };
        let r2 = CdReport { cd_j2j: 3.0, cd_j2b: 2.0, cd_b2b: 1.0, fallback: false };
        let rep = EvalReport::aggregate([("plant", r1), ("animal", r2), ("plant", r2)]);
        assert_eq!(rep.count, 3);
        assert!((rep.overall.cd_j2j - 7.0 / 3.0).abs() < 1e-15);
        assert_eq!(rep.per_category["plant"].cd_j2j, 2.0);
        assert_eq!(rep.per_category["animal"].cd_j2b, 2.0);
    }
}
