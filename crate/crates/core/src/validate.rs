//! Structural checks shared by skeletons and strokes.
//!
//! Validation never fails; every problem becomes a [`Violation`] with a
//! machine-readable code.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::skeleton::{components, Edge, SkeletonGraph, StrokeGraph2D};
use crate::MAX_TRAINING_JOINTS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationCode {
    Disconnected,
    DupEdge,
    BadIndex,
    NodeCount,
    NonFinite,
    Unnormalized,
}

impl ViolationCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ViolationCode::Disconnected => "DISCONNECTED",
            ViolationCode::DupEdge => "DUP_EDGE",
            ViolationCode::BadIndex => "BAD_INDEX",
            ViolationCode::NodeCount => "NODE_COUNT",
            ViolationCode::NonFinite => "NON_FINITE",
            ViolationCode::Unnormalized => "UNNORMALIZED",
        }
    }
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub message: String,
    /// Joint indices the problem refers to, for UI highlighting.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub joints: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, code: ViolationCode) -> bool {
        self.violations.iter().any(|v| v.code == code)
    }

    pub fn codes(&self) -> Vec<ViolationCode> {
        self.violations.iter().map(|v| v.code).collect()
    }

    fn push(&mut self, code: ViolationCode, message: String, joints: Vec<usize>) {
        self.violations.push(Violation { code, message, joints });
    }
}

/// Slack on the [-1, 1] box so normalized graphs survive float round-off.
const NORMALIZED_SLACK: f64 = 1e-9;

fn check_topology(report: &mut ValidationReport, n: usize, edges: &[Edge]) {
    let mut seen = BTreeSet::new();
    let mut in_range = Vec::with_capacity(edges.len());
    for e in edges {
        let (a, b) = (e.a(), e.b());
        if a >= n || b >= n || a == b {
            report.push(
                ViolationCode::BadIndex,
                format!("edge [{a}, {b}] is not a pair of distinct joints in 0..{n}"),
                [a, b].into_iter().filter(|&i| i < n).collect(),
            );
            continue;
        }
        if !seen.insert(*e) {
            report.push(ViolationCode::DupEdge, format!("edge [{a}, {b}] appears more than once"), vec![a, b]);
        }
        in_range.push(*e);
    }
    if n > 1 {
        let comps = components(n, &in_range);
        if comps.len() > 1 {
            let stray: Vec<usize> = comps.iter().skip(1).flatten().copied().collect();
            report.push(
                ViolationCode::Disconnected,
                format!("graph has {} connected components", comps.len()),
                stray,
            );
        }
    }
}

/// Checks every skeleton invariant, including training eligibility
/// (0 < N ≤ 30 and coordinates inside [-1, 1]³).
pub fn validate(graph: &SkeletonGraph) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = graph.joints.len();
    if n == 0 || n > MAX_TRAINING_JOINTS {
        report.push(
            ViolationCode::NodeCount,
            format!("{n} joints; training graphs need 1..={MAX_TRAINING_JOINTS}"),
            vec![],
        );
    }
    let bad: Vec<usize> =
        (0..n).filter(|&i| graph.joints[i].iter().any(|c| !c.is_finite())).collect();
    if !bad.is_empty() {
        report.push(ViolationCode::NonFinite, format!("{} joints have non-finite coordinates", bad.len()), bad);
    } else {
        let outside: Vec<usize> = (0..n)
            .filter(|&i| graph.joints[i].iter().any(|c| c.abs() > 1.0 + NORMALIZED_SLACK))
            .collect();
        if !outside.is_empty() {
            report.push(
                ViolationCode::Unnormalized,
                format!("{} joints lie outside [-1, 1]^3", outside.len()),
                outside,
            );
        }
    }
    check_topology(&mut report, n, &graph.edges);
    if let Some(r) = graph.root {
        if r >= n {
            report.push(ViolationCode::BadIndex, format!("root {r} is not a joint index"), vec![]);
        }
    }
    if let Some(names) = &graph.joint_names {
        if names.len() != n {
            report.push(
                ViolationCode::BadIndex,
                format!("{} joint names for {n} joints", names.len()),
                vec![],
            );
        }
    }
    report
}

/// Structural checks for a drawing. Canvas bounds are not enforced: strokes
/// produced by rotation/scale jitter may leave the unit square slightly.
pub fn validate_stroke(stroke: &StrokeGraph2D) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = stroke.joints2d.len();
    if n == 0 {
        report.push(ViolationCode::NodeCount, "stroke has no joints".into(), vec![]);
    }
    let bad: Vec<usize> =
        (0..n).filter(|&i| stroke.joints2d[i].iter().any(|c| !c.is_finite())).collect();
    if !bad.is_empty() {
        report.push(ViolationCode::NonFinite, format!("{} joints have non-finite coordinates", bad.len()), bad);
    }
    check_topology(&mut report, n, &stroke.edges);
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_graph_is_valid() {
        let g = SkeletonGraph::new(vec![[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]], [(0, 1)]).unwrap();
        assert!(validate(&g).is_valid(), "{:?}", validate(&g));
    }

    #[test]
    fn isolated_joint_is_disconnected() {
        let g = SkeletonGraph::new(vec![[0.0; 3]; 3], [(0, 1)]).unwrap();
        let r = validate(&g);
        assert!(r.has(ViolationCode::Disconnected));
        assert_eq!(r.violations[0].joints, vec![2]);
    }

    #[test]
    fn thirty_one_joint_path_violates_node_count() {
        let joints = (0..31).map(|i| [0.0, i as f64 / 31.0, 0.0]).collect();
        let g = SkeletonGraph::new(joints, (0..30).map(|i| (i, i + 1))).unwrap();
        assert_eq!(validate(&g).codes(), vec![ViolationCode::NodeCount]);
    }

    #[test]
    fn thirty_joints_is_allowed() {
        let joints = (0..30).map(|i| [0.0, i as f64 / 30.0, 0.0]).collect();
        let g = SkeletonGraph::new(joints, (0..29).map(|i| (i, i + 1))).unwrap();
        assert!(validate(&g).is_valid());
    }

    #[test]
    fn hand_built_defects_are_reported() {
        let g = SkeletonGraph {
            joints: vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, f64::INFINITY, 0.0]],
            edges: vec![Edge::raw(0, 1), Edge::raw(0, 1), Edge::raw(1, 7), Edge::raw(2, 2)],
            ..Default::default()
        };
        let codes = validate(&g).codes();
        for c in [ViolationCode::NonFinite, ViolationCode::DupEdge, ViolationCode::BadIndex, ViolationCode::Disconnected] {
            assert!(codes.contains(&c), "missing {c} in {codes:?}");
        }
    }

    #[test]
    fn out_of_box_coordinates_are_unnormalized() {
        let g = SkeletonGraph::new(vec![[0.0, 0.0, 0.0], [1.5, 0.0, 0.0]], [(0, 1)]).unwrap();
        assert_eq!(validate(&g).codes(), vec![ViolationCode::Unnormalized]);
    }

    #[test]
    fn stroke_validation_skips_canvas_bounds() {
        let s = StrokeGraph2D::new(vec![[0.0, 0.0], [1.2, 0.0]], [(0, 1)]).unwrap();
        assert!(validate_stroke(&s).is_valid());
        let s = StrokeGraph2D { joints2d: vec![], ..Default::default() };
        assert!(validate_stroke(&s).has(ViolationCode::NodeCount));
    }

    #[test]
    fn report_serializes_codes_in_screaming_case() {
        let g = SkeletonGraph::new(vec![[0.0; 3]; 3], [(0, 1)]).unwrap();
        let json = serde_json::to_string(&validate(&g)).unwrap();
        assert!(json.contains("\"DISCONNECTED\""), "{json}");
    }
}
