//! Canonical orientation of skeletons: +X left, +Y up, +Z forward.
//!
//! [`Aligner::align`] tries, in order, the joint-name method, the structural
//! (leg symmetry) method, the principal-direction method, and finally an
//! [`OrientationOracle`]. Animals go to the oracle first. Every method returns
//! a [`CanonicalFrame`] whose rotation maps model coordinates to canonical
//! ones; its rows are the model-space left, up and forward axes.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::skeleton::{Category, SkeletonGraph};

type V3 = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    JointName,
    Structural,
    Principal,
    Oracle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalFrame {
    pub rotation: Matrix3<f64>,
    pub method: Method,
    /// Set when front and back could not be told apart reliably.
    pub low_confidence: bool,
    pub notes: Vec<String>,
}

impl CanonicalFrame {
    fn from_axes(left: V3, up: V3, forward: V3, method: Method) -> Self {
        let rotation = Matrix3::from_rows(&[left.transpose(), up.transpose(), forward.transpose()]);
        Self { rotation, method, low_confidence: false, notes: Vec::new() }
    }

    pub fn left(&self) -> V3 {
        self.rotation.row(0).transpose()
    }

    pub fn up(&self) -> V3 {
        self.rotation.row(1).transpose()
    }

    pub fn forward(&self) -> V3 {
        self.rotation.row(2).transpose()
    }

    /// Largest angle, in degrees, between corresponding axes of two frames.
    pub fn max_axis_error_deg(&self, expected: &Matrix3<f64>) -> f64 {
        (0..3)
            .map(|k| {
                let a = self.rotation.row(k).transpose();
                let b = expected.row(k).transpose();
                a.dot(&b).clamp(-1.0, 1.0).acos().to_degrees()
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    /// Accepted length ratio range for a symmetric bone pair.
    pub pair_length_ratio: [f64; 2],
    /// Max angle between a bone and its partner's mirror image.
    pub mirror_angle_deg: f64,
    /// Min angle between any two recovered axes (as lines).
    pub degeneracy_angle_deg: f64,
    /// Bones longer than this multiple of the median are down-weighted.
    pub long_bone_factor: f64,
    /// Bones sharing a start joint at or above this count are averaged.
    pub fan_threshold: usize,
    /// Foot cue below this magnitude marks front/back as unreliable.
    pub min_forward_cue: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            pair_length_ratio: [0.8, 1.25],
            mirror_angle_deg: 20.0,
            degeneracy_angle_deg: 15.0,
            long_bone_factor: 2.0,
            fan_threshold: 3,
            min_forward_cue: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AlignError {
    #[error("graph has no joints")]
    Empty,
    #[error("no alignment method applies and no orientation oracle is configured")]
    AlignmentFailed,
    #[error("orientation oracle failed: {0}")]
    Oracle(String),
}

/// Outcome of a single method.
#[derive(Debug, Clone, PartialEq)]
pub enum Attempt {
    Aligned(CanonicalFrame),
    NotApplicable(String),
}

impl Attempt {
    pub fn frame(self) -> Option<CanonicalFrame> {
        match self {
            Attempt::Aligned(f) => Some(f),
            Attempt::NotApplicable(_) => None,
        }
    }
}

fn v(p: &[f64; 3]) -> V3 {
    V3::new(p[0], p[1], p[2])
}

/// Joint with the smallest mean distance to every other joint; lowest index
/// wins ties.
pub fn choose_root(graph: &SkeletonGraph) -> Result<usize, AlignError> {
    let n = graph.len();
    if n == 0 {
        return Err(AlignError::Empty);
    }
    let mut best = (0, f64::INFINITY);
    for i in 0..n {
        let total: f64 = (0..n).filter(|&j| j != i).map(|j| (v(&graph.joints[i]) - v(&graph.joints[j])).norm()).sum();
        let mean = if n > 1 { total / (n - 1) as f64 } else { 0.0 };
        if mean < best.1 {
            best = (i, mean);
        }
    }
    Ok(best.0)
}

/// Parent of every joint on a BFS tree from `root` (`None` for the root and
/// unreachable joints).
fn bfs_parents(graph: &SkeletonGraph, root: usize) -> Vec<Option<usize>> {
    let adj = graph.neighbors();
    let mut parent = vec![None; graph.len()];
    let mut seen = vec![false; graph.len()];
    let mut queue = std::collections::VecDeque::from([root]);
    seen[root] = true;
    while let Some(u) = queue.pop_front() {
        for &w in &adj[u] {
            if !seen[w] {
                seen[w] = true;
                parent[w] = Some(u);
                queue.push_back(w);
            }
        }
    }
    parent
}

/// A bone oriented away from the root.
#[derive(Debug, Clone, PartialEq)]
pub struct BoneSegment {
    pub start: usize,
    /// End joint, or `None` for a representative averaged over a fan.
    pub end: Option<usize>,
    pub from: V3,
    pub to: V3,
    pub weight: f64,
}

impl BoneSegment {
    pub fn vector(&self) -> V3 {
        self.to - self.from
    }

    pub fn length(&self) -> f64 {
        self.vector().norm()
    }

    pub fn direction(&self) -> V3 {
        self.vector().normalize()
    }

    pub fn midpoint(&self) -> V3 {
        0.5 * (self.from + self.to)
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Root-oriented bone segments with outlier weights; fans of
/// `fan_threshold` or more bones from one joint collapse into their average.
pub fn preprocess(graph: &SkeletonGraph, root: usize, config: &AlignConfig) -> Vec<BoneSegment> {
    let parent = bfs_parents(graph, root);
    let mut bones: Vec<BoneSegment> = (0..graph.len())
        .filter_map(|c| {
            parent[c].map(|p| BoneSegment {
                start: p,
                end: Some(c),
                from: v(&graph.joints[p]),
                to: v(&graph.joints[c]),
                weight: 1.0,
            })
        })
        .filter(|b| b.length() > 0.0)
        .collect();
    bones.sort_by_key(|b| (b.start, b.end));

    let med = median(bones.iter().map(BoneSegment::length).collect());
    for b in &mut bones {
        let len = b.length();
        if med > 0.0 && len > config.long_bone_factor * med {
            b.weight = (config.long_bone_factor * med / len).min(1.0);
        }
    }

    let mut out: Vec<BoneSegment> = Vec::new();
    let mut i = 0;
    while i < bones.len() {
        let start = bones[i].start;
        let mut j = i;
        while j < bones.len() && bones[j].start == start {
            j += 1;
        }
        let group = &bones[i..j];
        if group.len() >= config.fan_threshold.max(2) {
            let k = group.len() as f64;
            let mean_vec = group.iter().map(BoneSegment::vector).sum::<V3>() / k;
            let weight = group.iter().map(|b| b.weight).sum::<f64>() / k;
            let from = group[0].from;
            if mean_vec.norm() > 0.0 {
                out.push(BoneSegment { start, end: None, from, to: from + mean_vec, weight });
            }
        } else {
            out.extend_from_slice(group);
        }
        i = j;
    }
    out
}

fn reflect(p: &V3, origin: &V3, normal: &V3) -> V3 {
    p - 2.0 * (p - origin).dot(normal) * normal
}

/// Reflect every joint across the plane through the centroid with the given
/// normal, then take the symmetric mean nearest-neighbour distance between the
/// mirrored and original joint sets.
pub fn mirror_symmetry_error(graph: &SkeletonGraph, normal: &V3) -> f64 {
    let n = normal.normalize();
    let pts: Vec<V3> = graph.joints.iter().map(v).collect();
    let c = pts.iter().sum::<V3>() / pts.len().max(1) as f64;
    let mirrored: Vec<V3> = pts.iter().map(|p| reflect(p, &c, &n)).collect();
    let directed = |a: &[V3], b: &[V3]| {
        a.iter().map(|p| b.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min)).sum::<f64>()
            / a.len() as f64
    };
    0.5 * (directed(&mirrored, &pts) + directed(&pts, &mirrored))
}

fn line_angle_deg(a: &V3, b: &V3) -> f64 {
    (a.dot(b).abs() / (a.norm() * b.norm())).clamp(0.0, 1.0).acos().to_degrees()
}

fn perpendicular_part(x: &V3, axis: &V3) -> V3 {
    x - x.dot(axis) * axis
}

/// Candidate lateral axes orthogonal to `up`: the extra hints first, then the
/// in-plane principal axes of the joints, then the coordinate axes.
fn lateral_candidates(graph: &SkeletonGraph, up: &V3, hints: &[V3]) -> Vec<V3> {
    let mut out = Vec::new();
    let mut push = |x: V3| {
        let p = perpendicular_part(&x, up);
        if p.norm() > 1e-9 {
            out.push(p.normalize());
        }
    };
    for h in hints {
        push(*h);
    }
    let pts: Vec<V3> = graph.joints.iter().map(v).collect();
    let c = pts.iter().sum::<V3>() / pts.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in &pts {
        let d = perpendicular_part(&(p - c), up);
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    for &k in order.iter().take(2) {
        if eig.eigenvalues[k] > 1e-12 {
            push(eig.eigenvectors.column(k).into_owned());
        }
    }
    for axis in [V3::x(), V3::y(), V3::z()] {
        push(axis);
    }
    out
}

/// Lateral axis minimising the mirror error; earlier candidates win ties.
/// With hints, only candidates within `max_hint_angle` of the first hint are
/// considered: a flat skeleton is nearly as symmetric front-to-back as it is
/// side-to-side.
fn best_lateral_axis(graph: &SkeletonGraph, up: &V3, hints: &[V3], max_hint_angle: f64) -> Option<V3> {
    let mut best: Option<(V3, f64)> = None;
    let anchor = hints.first().map(|h| perpendicular_part(h, up));
    for cand in lateral_candidates(graph, up, hints) {
        if anchor.is_some_and(|a| line_angle_deg(&a, &cand) > max_hint_angle) {
            continue;
        }
        let err = mirror_symmetry_error(graph, &cand);
        if best.map_or(true, |(_, e)| err < e - 1e-12) {
            best = Some((cand, err));
        }
    }
    best.map(|(axis, _)| axis)
}

/// Net forward displacement of leaf joints below the root: toes point
/// forward, so a skeleton facing backward yields a negative cue.
fn forward_cue(graph: &SkeletonGraph, root: usize, up: &V3, forward: &V3) -> f64 {
    let parent = bfs_parents(graph, root);
    let adj = graph.neighbors();
    let r = v(&graph.joints[root]);
    (0..graph.len())
        .filter(|&i| i != root && adj[i].len() == 1)
        .filter(|&i| (v(&graph.joints[i]) - r).dot(up) < 0.0)
        .filter_map(|i| parent[i].map(|p| (v(&graph.joints[i]) - v(&graph.joints[p])).dot(forward)))
        .sum()
}

fn finish_frame(
    graph: &SkeletonGraph,
    root: usize,
    up: V3,
    lateral: V3,
    method: Method,
    config: &AlignConfig,
) -> CanonicalFrame {
    let mut left = lateral;
    let mut forward = left.cross(&up).normalize();
    let cue = forward_cue(graph, root, &up, &forward);
    if cue < 0.0 {
        left = -left;
        forward = -forward;
    }
    let mut frame = CanonicalFrame::from_axes(left, up, forward, method);
    if cue.abs() < config.min_forward_cue {
        frame.low_confidence = true;
        frame.notes.push("front/back ambiguous: no forward-pointing feet found".into());
    }
    frame
}

fn name_tokens(name: &str) -> Vec<String> {
    let mut s = String::new();
    let mut prev_lower = false;
    for ch in name.chars() {
        // Split camelCase as well as separators.
        if ch.is_uppercase() && prev_lower {
            s.push(' ');
        }
        prev_lower = ch.is_lowercase();
        s.push(if ch.is_alphanumeric() { ch.to_ascii_lowercase() } else { ' ' });
    }
    s.split_whitespace().map(str::to_string).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Left,
    Right,
}

/// Splits a joint name into its side and the side-free remainder.
fn side_of(name: &str) -> Option<(Side, String)> {
    let tokens = name_tokens(name);
    let mut side = None;
    let mut rest = Vec::new();
    for t in tokens {
        let s = match t.as_str() {
            "left" | "l" => Some(Side::Left),
            "right" | "r" => Some(Side::Right),
            _ => {
                if let Some(r) = t.strip_prefix("left") {
                    rest.push(r.to_string());
                    Some(Side::Left)
                } else if let Some(r) = t.strip_prefix("right") {
                    rest.push(r.to_string());
                    Some(Side::Right)
                } else {
                    rest.push(t);
                    None
                }
            }
        };
        if s.is_some() {
            if side.is_some() {
                return None;
            }
            side = s;
        }
    }
    side.map(|s| (s, rest.into_iter().filter(|t| !t.is_empty()).collect::<Vec<_>>().join(" ")))
}

fn has_keyword(name: &str, keywords: &[&str]) -> bool {
    let lower = name.to_lowercase();
    keywords.iter().any(|k| lower.contains(k))
}

fn gram_schmidt(up: V3, lateral: V3, forward: V3, min_angle: f64) -> Option<(V3, V3, V3)> {
    let ok = |a: &V3, b: &V3| line_angle_deg(a, b) > min_angle;
    if !(ok(&up, &lateral) && ok(&up, &forward) && ok(&lateral, &forward)) {
        return None;
    }
    let up = up.normalize();
    let lateral = perpendicular_part(&lateral, &up).normalize();
    let forward = (forward - forward.dot(&up) * up - forward.dot(&lateral) * lateral).normalize();
    Some((up, lateral, forward))
}

/// Uses joint names: head/neck/spine for up, left/right pairs for the lateral
/// axis, toes (or feet) for forward.
pub fn align_by_joint_names(graph: &SkeletonGraph, config: &AlignConfig) -> Attempt {
    let Some(names) = graph.joint_names.as_ref().filter(|n| n.len() == graph.len()) else {
        return Attempt::NotApplicable("no joint names".into());
    };
    if graph.is_empty() {
        return Attempt::NotApplicable("empty graph".into());
    }
    let root = graph.root.filter(|&r| r < graph.len()).unwrap_or_else(|| choose_root(graph).unwrap());
    let r = v(&graph.joints[root]);

    let upper: Vec<V3> = (0..graph.len())
        .filter(|&i| i != root && has_keyword(&names[i], &["head", "neck", "spine"]))
        .map(|i| v(&graph.joints[i]) - r)
        .collect();
    let up = upper.iter().sum::<V3>();
    if upper.is_empty() || up.norm() < 1e-9 {
        return Attempt::NotApplicable("no head/neck/spine joints above the root".into());
    }

    let sided: Vec<Option<(Side, String)>> = names.iter().map(|n| side_of(n)).collect();
    let mut lateral = V3::zeros();
    let mut pairs = 0;
    for i in 0..graph.len() {
        let Some((Side::Left, key)) = &sided[i] else { continue };
        if let Some(j) = (0..graph.len()).find(|&j| matches!(&sided[j], Some((Side::Right, k)) if k == key)) {
            lateral += v(&graph.joints[i]) - v(&graph.joints[j]);
            pairs += 1;
        }
    }
    if pairs == 0 || lateral.norm() < 1e-9 {
        return Attempt::NotApplicable("no left/right joint pairs".into());
    }

    let parent = bfs_parents(graph, root);
    let displacement = |keys: &[&str]| -> V3 {
        (0..graph.len())
            .filter(|&i| has_keyword(&names[i], keys))
            .filter_map(|i| parent[i].map(|p| v(&graph.joints[i]) - v(&graph.joints[p])))
            .sum()
    };
    let mut forward = displacement(&["toe"]);
    if forward.norm() < 1e-9 {
        forward = displacement(&["foot"]);
    }
    if forward.norm() < 1e-9 {
        return Attempt::NotApplicable("no toe/foot joints".into());
    }

    let Some((up, lateral, forward)) = gram_schmidt(up, lateral, forward, config.degeneracy_angle_deg) else {
        return Attempt::NotApplicable("named axes are nearly parallel".into());
    };
    let mut frame = CanonicalFrame::from_axes(lateral, up, forward, Method::JointName);
    if frame.rotation.determinant() < 0.0 {
        frame = CanonicalFrame::from_axes(-lateral, up, forward, Method::JointName);
        frame.notes.push("flipped lateral axis to restore right-handedness".into());
    }
    Attempt::Aligned(frame)
}

/// A pair of preprocessed bones that mirror each other.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricPair {
    pub first: usize,
    pub second: usize,
    pub length: f64,
    /// Unit vector from the second bone's midpoint toward the first's.
    pub separation: V3,
}

/// Bone pairs with similar length whose directions agree after mirroring
/// across the plane bisecting their midpoints. Sorted longest first; ties by
/// lower segment index.
pub fn symmetric_pairs(segments: &[BoneSegment], config: &AlignConfig) -> Vec<SymmetricPair> {
    let [lo, hi] = config.pair_length_ratio;
    let mut out = Vec::new();
    for i in 0..segments.len() {
        for j in (i + 1)..segments.len() {
            let (a, b) = (&segments[i], &segments[j]);
            let (la, lb) = (a.length(), b.length());
            let ratio = la / lb;
            if !(lo..=hi).contains(&ratio) {
                continue;
            }
            let sep = a.midpoint() - b.midpoint();
            if sep.norm() < 1e-9 {
                continue;
            }
            let n = sep.normalize();
            let da = a.direction();
            let mirrored = da - 2.0 * da.dot(&n) * n;
            let angle = mirrored.dot(&b.direction()).clamp(-1.0, 1.0).acos().to_degrees();
            if angle < config.mirror_angle_deg {
                out.push(SymmetricPair { first: i, second: j, length: 0.5 * (la + lb), separation: n });
            }
        }
    }
    out.sort_by(|x, y| y.length.partial_cmp(&x.length).unwrap().then((x.first, x.second).cmp(&(y.first, y.second))));
    out
}

/// Uses the longest mirror-symmetric bone pair as the legs.
pub fn align_by_structure(graph: &SkeletonGraph, config: &AlignConfig) -> Attempt {
    if graph.len() < 3 {
        return Attempt::NotApplicable("too few joints".into());
    }
    let root = graph.root.filter(|&r| r < graph.len()).unwrap_or_else(|| choose_root(graph).unwrap());
    let segments = preprocess(graph, root, config);
    let pairs = symmetric_pairs(&segments, config);
    let Some(legs) = pairs.first() else {
        return Attempt::NotApplicable("no symmetric bone pair".into());
    };
    let down = segments[legs.first].direction() + segments[legs.second].direction();
    if down.norm() < 1e-9 {
        return Attempt::NotApplicable("leg pair points in opposite directions".into());
    }
    let up = -down.normalize();
    let Some(lateral) = best_lateral_axis(graph, &up, &[legs.separation], config.mirror_angle_deg) else {
        return Attempt::NotApplicable("no lateral axis".into());
    };
    Attempt::Aligned(finish_frame(graph, root, up, lateral, Method::Structural, config))
}

/// Principal directions: PCA for humanlike categories, weighted mean bone
/// direction from the root otherwise.
pub fn align_by_principal(graph: &SkeletonGraph, category: Option<&Category>, config: &AlignConfig) -> Attempt {
    if graph.len() < 2 {
        return Attempt::NotApplicable("fewer than two joints".into());
    }
    let pts: Vec<V3> = graph.joints.iter().map(v).collect();
    let c = pts.iter().sum::<V3>() / pts.len() as f64;
    let cov: Matrix3<f64> = pts.iter().map(|p| (p - c) * (p - c).transpose()).sum();
    if cov.trace() < 1e-12 {
        return Attempt::NotApplicable("degenerate covariance".into());
    }
    let root = graph.root.filter(|&r| r < graph.len()).unwrap_or_else(|| choose_root(graph).unwrap());
    let humanlike = category.is_some_and(Category::is_humanlike);
    let up = if humanlike {
        let eig = SymmetricEigen::new(cov);
        let k = eig.eigenvalues.imax();
        let mut axis: V3 = eig.eigenvectors.column(k).into_owned();
        if (v(&graph.joints[root]) - c).dot(&axis) > 0.0 {
            axis = -axis;
        }
        axis
    } else {
        let sum: V3 = preprocess(graph, root, config).iter().map(|s| s.weight * s.direction()).sum();
        if sum.norm() < 1e-9 {
            return Attempt::NotApplicable("bone directions cancel".into());
        }
        sum.normalize()
    };
    let Some(lateral) = best_lateral_axis(graph, &up, &[], 90.0) else {
        return Attempt::NotApplicable("no lateral axis".into());
    };
    let mut frame = finish_frame(graph, root, up, lateral, Method::Principal, config);
    frame.low_confidence = true;
    Attempt::Aligned(frame)
}

/// Rendered plane of an orthographic view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Xy,
    Yz,
    Xz,
}

impl Plane {
    fn normal(self) -> V3 {
        match self {
            Plane::Xy => V3::z(),
            Plane::Yz => V3::x(),
            Plane::Xz => V3::y(),
        }
    }
}

/// Joint projections for the three orthographic renders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRequest {
    pub xy: Vec<[f64; 2]>,
    pub yz: Vec<[f64; 2]>,
    pub xz: Vec<[f64; 2]>,
    pub edges: Vec<[usize; 2]>,
    pub category: Option<String>,
}

impl OracleRequest {
    pub fn from_graph(graph: &SkeletonGraph) -> Self {
        Self {
            xy: graph.joints.iter().map(|p| [p[0], p[1]]).collect(),
            yz: graph.joints.iter().map(|p| [p[1], p[2]]).collect(),
            xz: graph.joints.iter().map(|p| [p[0], p[2]]).collect(),
            edges: graph.edges.iter().map(|e| e.pair()).collect(),
            category: graph.category.as_ref().map(|c| c.as_str().to_string()),
        }
    }
}

/// Which render shows the front, side and top. The optional flips say that the
/// plane normal points backward/down rather than forward/up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResponse {
    pub front_view: Plane,
    pub side_view: Plane,
    pub top_view: Plane,
    #[serde(default)]
    pub flip_up: bool,
    #[serde(default)]
    pub flip_forward: bool,
}

pub trait OrientationOracle: Send + Sync {
    fn query(&self, request: &OracleRequest) -> Result<OracleResponse, String>;
}

/// Offline stand-in: always answers with the current axes.
#[derive(Debug, Clone, Default)]
pub struct MockOracle;

impl OrientationOracle for MockOracle {
    fn query(&self, _: &OracleRequest) -> Result<OracleResponse, String> {
        Ok(OracleResponse {
            front_view: Plane::Xy,
            side_view: Plane::Yz,
            top_view: Plane::Xz,
            flip_up: false,
            flip_forward: false,
        })
    }
}

pub fn frame_from_oracle(resp: &OracleResponse) -> Result<CanonicalFrame, AlignError> {
    let planes = [resp.front_view, resp.side_view, resp.top_view];
    if planes[0] == planes[1] || planes[0] == planes[2] || planes[1] == planes[2] {
        return Err(AlignError::Oracle("views must name three distinct planes".into()));
    }
    let up = if resp.flip_up { -resp.top_view.normal() } else { resp.top_view.normal() };
    let forward = if resp.flip_forward { -resp.front_view.normal() } else { resp.front_view.normal() };
    let left = up.cross(&forward);
    Ok(CanonicalFrame::from_axes(left, up, forward, Method::Oracle))
}

pub struct Aligner {
    pub config: AlignConfig,
    oracle: Option<Box<dyn OrientationOracle>>,
    oracle_is_mock: bool,
}

impl Default for Aligner {
    fn default() -> Self {
        Self { config: AlignConfig::default(), oracle: Some(Box::new(MockOracle)), oracle_is_mock: true }
    }
}

impl Aligner {
    pub fn new(config: AlignConfig) -> Self {
        Self { config, ..Default::default() }
    }

    pub fn with_oracle(mut self, oracle: Box<dyn OrientationOracle>) -> Self {
        self.oracle = Some(oracle);
        self.oracle_is_mock = false;
        self
    }

    pub fn without_oracle(mut self) -> Self {
        self.oracle = None;
        self.oracle_is_mock = false;
        self
    }

    fn ask_oracle(&self, graph: &SkeletonGraph) -> Option<Result<CanonicalFrame, AlignError>> {
        let oracle = self.oracle.as_ref()?;
        let resp = match oracle.query(&OracleRequest::from_graph(graph)) {
            Ok(r) => r,
            Err(e) => return Some(Err(AlignError::Oracle(e))),
        };
        Some(frame_from_oracle(&resp).map(|mut f| {
            if self.oracle_is_mock {
                f.low_confidence = true;
                f.notes.push("mock orientation oracle: rotation left unchanged".into());
                log::warn!("no orientation oracle configured; mock returned identity");
            }
            f
        }))
    }

    /// Picks a frame for `graph` without moving it.
    pub fn frame(&self, graph: &SkeletonGraph) -> Result<CanonicalFrame, AlignError> {
        if graph.is_empty() {
            return Err(AlignError::Empty);
        }
        if graph.category == Some(Category::Animal) {
            if let Some(res) = self.ask_oracle(graph) {
                return res;
            }
        }
        let attempts = [
            align_by_joint_names(graph, &self.config),
            align_by_structure(graph, &self.config),
            align_by_principal(graph, graph.category.as_ref(), &self.config),
        ];
        let mut reasons = Vec::new();
        for a in attempts {
            match a {
                Attempt::Aligned(f) => return Ok(f),
                Attempt::NotApplicable(why) => reasons.push(why),
            }
        }
        log::debug!("heuristic alignment not applicable: {}", reasons.join("; "));
        self.ask_oracle(graph).unwrap_or(Err(AlignError::AlignmentFailed))
    }

    /// Rotates `graph` about its centroid into the canonical frame and
    /// renormalizes it.
    pub fn align(&self, graph: &SkeletonGraph) -> Result<(SkeletonGraph, CanonicalFrame), AlignError> {
        let frame = self.frame(graph)?;
        let rotated = graph.rotated_about(&frame.rotation, graph.centroid());
        let aligned = rotated.normalize().map_err(|_| AlignError::Empty)?;
        Ok((aligned, frame))
    }
}

/// Synthetic skeletons in the canonical frame, for tests and benchmarks.
pub mod synthetic {
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    /// A biped with legs, heels and forward toes, spine, head and arms,
    /// in canonical orientation. Proportions and arm pose vary with `rng`;
    /// `noise` is the std-dev of independent per-joint jitter.
    pub fn biped<R: Rng + ?Sized>(rng: &mut R, named: bool, noise: f64) -> SkeletonGraph {
        let droop = rng.random_range(0.0f64..50.0);
        biped_posed(rng, named, noise, droop)
    }

    /// [`biped`] with the arms lowered `arm_droop_deg` below horizontal.
    pub fn biped_posed<R: Rng + ?Sized>(rng: &mut R, named: bool, noise: f64, arm_droop_deg: f64) -> SkeletonGraph {
        let hip = rng.random_range(0.08..0.14);
        let thigh = rng.random_range(0.40..0.48);
        let shin = rng.random_range(0.38..0.46);
        let toe = rng.random_range(0.10..0.14);
        let spine = rng.random_range(0.12..0.16);
        let shoulder = rng.random_range(0.12..0.18);
        let upper_arm = rng.random_range(0.24..0.30);
        let forearm = rng.random_range(0.22..0.27);
        let droop = arm_droop_deg.to_radians();
        let arm_dir = [droop.cos(), -droop.sin()];

        let mut joints: Vec<[f64; 3]> = Vec::new();
        let mut names: Vec<String> = Vec::new();
        let mut edges = Vec::new();
        let mut add = |p: [f64; 3], name: &str, parent: Option<usize>, joints: &mut Vec<[f64; 3]>| {
            joints.push(p);
            names.push(name.to_string());
            let i = joints.len() - 1;
            if let Some(par) = parent {
                edges.push((par, i));
            }
            i
        };
        let hips = add([0.0, 0.0, 0.0], "hips", None, &mut joints);
        let s1 = add([0.0, spine, 0.0], "spine", Some(hips), &mut joints);
        let chest = add([0.0, 2.0 * spine, 0.0], "chest", Some(s1), &mut joints);
        let neck = add([0.0, 3.0 * spine, 0.0], "neck", Some(chest), &mut joints);
        add([0.0, 3.0 * spine + 0.12, 0.0], "head", Some(neck), &mut joints);
        for (side, sx) in [("left", 1.0), ("right", -1.0)] {
            let h = add([sx * hip, 0.0, 0.0], &format!("{side}_hip"), Some(hips), &mut joints);
            let k = add([sx * hip, -thigh, 0.0], &format!("{side}_knee"), Some(h), &mut joints);
            let a = add([sx * hip, -thigh - shin, 0.0], &format!("{side}_ankle"), Some(k), &mut joints);
            add([sx * hip, -thigh - shin - 0.03, toe], &format!("{side}_toe"), Some(a), &mut joints);
            add([sx * hip, -thigh - shin - 0.03, -0.04], &format!("{side}_heel"), Some(a), &mut joints);
            let sh = add([sx * shoulder, 2.0 * spine, 0.0], &format!("{side}_shoulder"), Some(chest), &mut joints);
            let e = [sx * (shoulder + upper_arm * arm_dir[0]), 2.0 * spine + upper_arm * arm_dir[1], 0.0];
            let el = add(e, &format!("{side}_elbow"), Some(sh), &mut joints);
            let hand = [e[0] + sx * forearm * arm_dir[0], e[1] + forearm * arm_dir[1], 0.0];
            add(hand, &format!("{side}_hand"), Some(el), &mut joints);
        }
        if noise > 0.0 {
            for p in &mut joints {
                for c in p.iter_mut() {
                    let n: f64 = StandardNormal.sample(rng);
                    *c += noise * n;
                }
            }
        }
        let mut g = SkeletonGraph::new(joints, edges).expect("biped construction is valid");
        g.category = Some(Category::Character);
        if named {
            g.joint_names = Some(names);
        }
        g
    }

    /// Vertical chain rooted at the bottom, with alternating side leaves.
    pub fn plant(segments: usize) -> SkeletonGraph {
        let mut joints = Vec::new();
        let mut edges = Vec::new();
        for i in 0..=segments {
            joints.push([0.0, i as f64 * 0.2, 0.0]);
            if i > 0 {
                edges.push((i - 1, i));
            }
        }
        let mut g = SkeletonGraph::new(joints, edges).unwrap();
        g.category = Some(Category::Plant);
        g.root = Some(0);
        g
    }

    /// Rotation drawn uniformly from SO(3) via a random unit quaternion.
    pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let uq = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
        *uq.to_rotation_matrix().matrix()
    }
}

#[cfg(test)]
mod tests {
    use super::synthetic::*;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn path(points: &[[f64; 3]]) -> SkeletonGraph {
        SkeletonGraph::new(points.to_vec(), (1..points.len()).map(|i| (i - 1, i))).unwrap()
    }

    fn rotated(g: &SkeletonGraph, r: &Matrix3<f64>) -> SkeletonGraph {
        g.rotated_about(r, [0.0; 3])
    }

    fn assert_right_handed(f: &CanonicalFrame) {
        let r = f.rotation;
        assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-6);
        assert!((r.determinant() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn root_of_three_node_path_is_middle() {
        let g = path(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        assert_eq!(choose_root(&g).unwrap(), 1);
        assert_eq!(choose_root(&path(&[[3.0, 3.0, 3.0]])).unwrap(), 0);
        assert_eq!(choose_root(&SkeletonGraph::default()), Err(AlignError::Empty));
    }

    #[test]
    fn root_of_symmetric_star_is_center() {
        let mut pts = vec![[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        pts.extend([[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, -1.0, 0.0]]);
        let g = SkeletonGraph::new(pts, [(1, 0), (1, 2), (1, 3), (1, 4)]).unwrap();
        assert_eq!(choose_root(&g).unwrap(), 1);
    }

    #[test]
    fn uniform_bones_keep_unit_weight() {
        let g = path(&[[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 2.0, 0.0], [1.0, 2.0, 0.0]]);
        let segs = preprocess(&g, 0, &AlignConfig::default());
        assert_eq!(segs.len(), 3);
        assert!(segs.iter().all(|s| s.weight == 1.0));
    }

    #[test]
    fn long_bone_is_down_weighted() {
        // Bones of length 1, 1, 1, 10: median 1, so the tail gets 2/10.
        let g = path(&[[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 2.0, 0.0], [0.0, 3.0, 0.0], [0.0, 13.0, 0.0]]);
        let segs = preprocess(&g, 0, &AlignConfig::default());
        let tail = segs.iter().find(|s| s.end == Some(4)).unwrap();
        assert!((tail.weight - 0.2).abs() < 1e-12);
        assert_eq!(segs.iter().filter(|s| s.weight == 1.0).count(), 3);
    }

    #[test]
    fn fan_collapses_to_one_segment() {
        // Joint 1 fans into 4 rays; the stem 0-1 stays as is.
        let pts = vec![
            [0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.3, 1.3, 0.0],
            [0.1, 1.4, 0.0],
            [-0.1, 1.4, 0.0],
            [-0.3, 1.3, 0.0],
        ];
        let g = SkeletonGraph::new(pts, [(0, 1), (1, 2), (1, 3), (1, 4), (1, 5)]).unwrap();
        let segs = preprocess(&g, 0, &AlignConfig::default());
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].end, Some(1));
        assert_eq!(segs[1].end, None);
        assert!((segs[1].vector() - V3::new(0.0, 0.35, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn canonical_named_biped_gives_identity() {
        let g = biped(&mut ChaCha8Rng::seed_from_u64(1), true, 0.0);
        let f = align_by_joint_names(&g, &AlignConfig::default()).frame().unwrap();
        assert!((f.rotation - Matrix3::identity()).abs().max() < 1e-6, "{}", f.rotation);
    }

    #[test]
    fn named_biped_rotation_is_inverted() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = biped(&mut rng, true, 0.0);
        let r = random_rotation(&mut rng);
        let f = align_by_joint_names(&rotated(&g, &r), &AlignConfig::default()).frame().unwrap();
        assert!((f.rotation - r.transpose()).abs().max() < 1e-4);
        assert_right_handed(&f);
    }

    #[test]
    fn generic_names_are_not_applicable() {
        let mut g = biped(&mut ChaCha8Rng::seed_from_u64(3), false, 0.0);
        g.joint_names = Some((0..g.len()).map(|i| format!("joint_{i}")).collect());
        assert!(matches!(align_by_joint_names(&g, &AlignConfig::default()), Attempt::NotApplicable(_)));
    }

    #[test]
    fn side_tokens() {
        assert_eq!(side_of("left_hand"), Some((Side::Left, "hand".into())));
        assert_eq!(side_of("RightHand"), Some((Side::Right, "hand".into())));
        assert_eq!(side_of("hand.L"), Some((Side::Left, "hand".into())));
        assert_eq!(side_of("head"), None);
    }

    #[test]
    fn canonical_biped_structure_gives_identity() {
        let g = biped(&mut ChaCha8Rng::seed_from_u64(4), false, 0.0);
        let f = align_by_structure(&g, &AlignConfig::default()).frame().unwrap();
        assert!(f.max_axis_error_deg(&Matrix3::identity()) < 1e-6, "{}", f.rotation);
        assert!(!f.low_confidence);
    }

    #[test]
    fn structural_recovers_known_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = biped(&mut rng, false, 0.0);
        let r = random_rotation(&mut rng);
        let f = align_by_structure(&rotated(&g, &r), &AlignConfig::default()).frame().unwrap();
        assert!(f.max_axis_error_deg(&r.transpose()) < 1e-4);
    }

    #[test]
    fn structural_lateral_axis_survives_jitter() {
        // Jittered flat bipeds mirror almost as well front-to-back.
        let mut rng = ChaCha8Rng::seed_from_u64(500);
        for _ in 0..50 {
            let g = biped(&mut rng, false, 0.005);
            let f = align_by_structure(&g, &AlignConfig::default()).frame().unwrap();
            assert!(f.max_axis_error_deg(&Matrix3::identity()) < 5.0, "{}", f.rotation);
        }
    }

    #[test]
    fn asymmetric_chain_has_no_structure() {
        let g = path(&[[0.0, 0.0, 0.0], [0.0, 0.3, 0.0], [0.2, 0.9, 0.0], [0.25, 1.0, 0.1]]);
        assert!(matches!(align_by_structure(&g, &AlignConfig::default()), Attempt::NotApplicable(_)));
    }

    #[test]
    fn mirrored_biped_still_right_handed() {
        let g = biped(&mut ChaCha8Rng::seed_from_u64(6), false, 0.0);
        let mirror = Matrix3::from_diagonal(&V3::new(-1.0, 1.0, 1.0));
        let f = align_by_structure(&rotated(&g, &mirror), &AlignConfig::default()).frame().unwrap();
        assert_right_handed(&f);
    }

    #[test]
    fn tall_humanoid_pca_points_up() {
        // Game-style rig: a floor-level root joint parents the hips.
        let mut g = biped_posed(&mut ChaCha8Rng::seed_from_u64(7), false, 0.0, 80.0);
        let floor = g.joints.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
        g.joints.push([0.0, floor, 0.0]);
        g.edges.push(crate::skeleton::Edge::raw(0, g.len() - 1));
        g.root = Some(g.len() - 1);
        let f = align_by_principal(&g, Some(&Category::Character), &AlignConfig::default()).frame().unwrap();
        assert!(f.up().dot(&V3::y()).acos().to_degrees() < 5.0, "{:?}", f.up());
        assert_right_handed(&f);
    }

    #[test]
    fn plant_chain_up_is_exact() {
        let g = plant(5);
        let f = align_by_principal(&g, Some(&Category::Plant), &AlignConfig::default()).frame().unwrap();
        assert_eq!(f.up(), V3::y());
    }

    #[test]
    fn single_joint_principal_not_applicable() {
        let g = path(&[[0.0, 0.0, 0.0]]);
        assert!(matches!(align_by_principal(&g, None, &AlignConfig::default()), Attempt::NotApplicable(_)));
    }

    #[test]
    fn dispatcher_leaves_canonical_named_humanoid_unchanged() {
        let g = biped(&mut ChaCha8Rng::seed_from_u64(8), true, 0.0).normalize().unwrap();
        let (out, f) = Aligner::default().align(&g).unwrap();
        assert_eq!(f.method, Method::JointName);
        for (a, b) in out.joints.iter().zip(&g.joints) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dispatcher_uses_structure_without_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = biped(&mut rng, false, 0.0);
        let r = random_rotation(&mut rng);
        let f = Aligner::default().frame(&rotated(&g, &r)).unwrap();
        assert_eq!(f.method, Method::Structural);
        assert!(f.max_axis_error_deg(&r.transpose()) < 1e-4);
    }

    #[test]
    fn animal_goes_to_mock_oracle() {
        let mut g = biped(&mut ChaCha8Rng::seed_from_u64(10), true, 0.0);
        g.category = Some(Category::Animal);
        let f = Aligner::default().frame(&g).unwrap();
        assert_eq!(f.method, Method::Oracle);
        assert_eq!(f.rotation, Matrix3::identity());
        assert!(f.low_confidence && !f.notes.is_empty());
    }

    #[test]
    fn no_method_and_no_oracle_fails() {
        let g = path(&[[0.0, 0.0, 0.0]]);
        assert_eq!(Aligner::default().without_oracle().frame(&g), Err(AlignError::AlignmentFailed));
    }

    #[test]
    fn oracle_response_builds_right_handed_frame() {
        let resp = OracleResponse {
            front_view: Plane::Yz,
            side_view: Plane::Xy,
            top_view: Plane::Xz,
            flip_up: false,
            flip_forward: true,
        };
        let f = frame_from_oracle(&resp).unwrap();
        assert_right_handed(&f);
        assert_eq!(f.forward(), -V3::x());
        let bad = OracleResponse { side_view: Plane::Yz, ..resp };
        assert!(frame_from_oracle(&bad).is_err());
    }

    #[test]
    fn mirror_error_is_zero_on_symmetry_plane() {
        let g = biped(&mut ChaCha8Rng::seed_from_u64(11), false, 0.0);
        assert!(mirror_symmetry_error(&g, &V3::x()) < 1e-12);
        assert!(mirror_symmetry_error(&g, &V3::z()) > 1e-3);
    }
}
