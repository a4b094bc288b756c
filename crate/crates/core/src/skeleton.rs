use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::GraphError;

/// Undirected bone between two distinct joints, stored as `(low, high)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge(usize, usize);

impl Edge {
    /// Builds a sorted edge. Self-loops are rejected.
    pub fn new(a: usize, b: usize) -> Result<Self, GraphError> {
        match a.cmp(&b) {
            std::cmp::Ordering::Less => Ok(Edge(a, b)),
            std::cmp::Ordering::Greater => Ok(Edge(b, a)),
            std::cmp::Ordering::Equal => Err(GraphError::SelfLoop(a)),
        }
    }

    /// Sorted pair without the self-loop check; used when reading untrusted
    /// input that is validated afterwards.
    pub fn raw(a: usize, b: usize) -> Self {
        Edge(a.min(b), a.max(b))
    }

    pub fn a(&self) -> usize {
        self.0
    }

    pub fn b(&self) -> usize {
        self.1
    }

    pub fn pair(&self) -> [usize; 2] {
        [self.0, self.1]
    }

    pub fn other(&self, i: usize) -> usize {
        if self.0 == i {
            self.1
        } else {
            self.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Character,
    Anthropomorphic,
    Animal,
    Plant,
    /// `"other"` or any label outside the known set, kept verbatim.
    Other(String),
}

impl Category {
    pub fn as_str(&self) -> &str {
        match self {
            Category::Character => "character",
            Category::Anthropomorphic => "anthropomorphic",
            Category::Animal => "animal",
            Category::Plant => "plant",
            Category::Other(s) => s,
        }
    }

    pub fn is_humanlike(&self) -> bool {
        matches!(self, Category::Character | Category::Anthropomorphic)
    }
}

impl FromStr for Category {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "character" => Category::Character,
            "anthropomorphic" => Category::Anthropomorphic,
            "animal" => Category::Animal,
            "plant" => Category::Plant,
            _ => Category::Other(s.to_string()),
        })
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Category {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Category {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(s.parse().unwrap())
    }
}

/// Orthographic view. The canonical frame has +X left, +Y up, +Z forward, so
/// the XY plane is the front view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Front,
    Side,
    Top,
    Free,
}

impl View {
    pub fn as_str(&self) -> &'static str {
        match self {
            View::Front => "front",
            View::Side => "side",
            View::Top => "top",
            View::Free => "free",
        }
    }
}

impl FromStr for View {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "front" => Ok(View::Front),
            "side" => Ok(View::Side),
            "top" => Ok(View::Top),
            "free" => Ok(View::Free),
            other => Err(format!("unknown view {other:?} (expected front, side, top or free)")),
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How a skeleton is flattened onto the canvas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    View(View),
    /// Rotate into the camera frame, then keep (x, y).
    Rotation(Matrix3<f64>),
}

impl From<View> for Projection {
    fn from(v: View) -> Self {
        Projection::View(v)
    }
}

/// Joints in 3D plus an undirected bone set.
///
/// Fields are public so that test fixtures and untrusted input can be built
/// directly; [`crate::validate::validate`] reports anything malformed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SkeletonGraph {
    pub joints: Vec<[f64; 3]>,
    pub edges: Vec<Edge>,
    pub joint_names: Option<Vec<String>>,
    pub root: Option<usize>,
    pub category: Option<Category>,
    /// Unknown JSON fields kept by lax-mode parsing.
    pub extra: Map<String, Value>,
}

/// The 2D drawing: joints on the canvas sharing the skeleton's bone set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StrokeGraph2D {
    pub joints2d: Vec<[f64; 2]>,
    pub edges: Vec<Edge>,
    pub view: Option<View>,
    /// Prompt carried alongside a stroke file, if any.
    pub text: Option<String>,
    pub extra: Map<String, Value>,
}

/// Sorts and deduplicates an edge list. Returns the number of duplicates
/// dropped.
pub(crate) fn canonical_edges(
    edges: impl IntoIterator<Item = (usize, usize)>,
    n: usize,
) -> Result<(Vec<Edge>, usize), GraphError> {
    let mut set = BTreeSet::new();
    let mut total = 0;
    for (a, b) in edges {
        if a >= n || b >= n {
            return Err(GraphError::BadIndex(a, b, n));
        }
        set.insert(Edge::new(a, b)?);
        total += 1;
    }
    let dups = total - set.len();
    Ok((set.into_iter().collect(), dups))
}

pub(crate) fn adjacency(n: usize, edges: &[Edge]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for e in edges {
        if e.a() < n && e.b() < n && e.a() != e.b() {
            adj[e.a()].push(e.b());
            adj[e.b()].push(e.a());
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    adj
}

/// Connected components as sorted index lists, ordered by smallest member.
pub(crate) fn components(n: usize, edges: &[Edge]) -> Vec<Vec<usize>> {
    let adj = adjacency(n, edges);
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        let mut comp = vec![start];
        seen[start] = true;
        let mut i = 0;
        while i < comp.len() {
            let v = comp[i];
            i += 1;
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    comp.push(w);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

impl SkeletonGraph {
    /// Builds a skeleton from joints and index pairs. Duplicate edges are
    /// collapsed; self-loops and out-of-range indices are errors.
    pub fn new(
        joints: Vec<[f64; 3]>,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, GraphError> {
        if let Some(i) = joints.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(GraphError::NonFinite(i));
        }
        let (edges, _) = canonical_edges(edges, joints.len())?;
        Ok(Self { joints, edges, ..Default::default() })
    }

    pub fn with_names(mut self, names: Vec<String>) -> Self {
        self.joint_names = Some(names);
        self
    }

    pub fn with_category(mut self, category: Category) -> Self {
        self.category = Some(category);
        self
    }

    pub fn with_root(mut self, root: usize) -> Self {
        self.root = Some(root);
        self
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        adjacency(self.len(), &self.edges)
    }

    pub fn edge_pairs(&self) -> Vec<(usize, usize)> {
        self.edges.iter().map(|e| (e.a(), e.b())).collect()
    }

    /// Bone segments as endpoint pairs.
    pub fn bones(&self) -> Vec<([f64; 3], [f64; 3])> {
        self.edges.iter().map(|e| (self.joints[e.a()], self.joints[e.b()])).collect()
    }

    /// Translate the bounding-box centre to the origin and scale so the
    /// longest box side is 2. A graph whose joints all coincide maps to the
    /// origin with scale 1.
    pub fn normalize(&self) -> Result<Self, GraphError> {
        if self.joints.is_empty() {
            return Err(GraphError::Empty);
        }
        if let Some(i) = self.joints.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(GraphError::NonFinite(i));
        }
        let (center, longest) = bbox_center_extent(&self.joints);
        let scale = if longest > 0.0 { 2.0 / longest } else { 1.0 };
        let mut out = self.clone();
        for p in &mut out.joints {
            for k in 0..3 {
                p[k] = (p[k] - center[k]) * scale;
            }
        }
        Ok(out)
    }

    /// Applies `rotation` about `pivot` and returns the moved copy.
    pub fn rotated_about(&self, rotation: &Matrix3<f64>, pivot: [f64; 3]) -> Self {
        let mut out = self.clone();
        for p in &mut out.joints {
            let v = nalgebra::Vector3::new(p[0] - pivot[0], p[1] - pivot[1], p[2] - pivot[2]);
            let r = rotation * v;
            *p = [r.x + pivot[0], r.y + pivot[1], r.z + pivot[2]];
        }
        out
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.joints.len().max(1) as f64;
        let mut c = [0.0; 3];
        for p in &self.joints {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    /// Flattens onto the canvas. Front keeps (x, y), top keeps (x, z), side
    /// keeps (z, y); a rotation is applied first and then (x, y) is kept.
    pub fn project(&self, projection: impl Into<Projection>) -> Result<StrokeGraph2D, GraphError> {
        let projection = projection.into();
        let (joints2d, view) = match projection {
            Projection::View(View::Front) => (self.joints.iter().map(|p| [p[0], p[1]]).collect(), View::Front),
            Projection::View(View::Top) => (self.joints.iter().map(|p| [p[0], p[2]]).collect(), View::Top),
            Projection::View(View::Side) => (self.joints.iter().map(|p| [p[2], p[1]]).collect(), View::Side),
            Projection::View(View::Free) => {
                return Err(GraphError::Shape("free view needs an explicit rotation".into()))
            }
            Projection::Rotation(r) => {
                check_orthonormal(&r, 1e-6)?;
                let pts = self
                    .joints
                    .iter()
                    .map(|p| {
                        let v = r * nalgebra::Vector3::new(p[0], p[1], p[2]);
                        [v.x, v.y]
                    })
                    .collect();
                (pts, View::Free)
            }
        };
        Ok(StrokeGraph2D {
            joints2d,
            edges: self.edges.clone(),
            view: Some(view),
            text: None,
            extra: Map::new(),
        })
    }
}

/// Max-abs deviation of R·Rᵀ from identity must not exceed `tol`.
pub fn check_orthonormal(r: &Matrix3<f64>, tol: f64) -> Result<(), GraphError> {
    let dev = (r * r.transpose() - Matrix3::identity()).abs().max();
    if dev.is_finite() && dev <= tol {
        Ok(())
    } else {
        Err(GraphError::NotOrthonormal(dev))
    }
}

fn bbox_center_extent(points: &[[f64; 3]]) -> ([f64; 3], f64) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let center = [0, 1, 2].map(|k| 0.5 * (lo[k] + hi[k]));
    let longest = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
    (center, longest)
}

impl StrokeGraph2D {
    pub fn new(
        joints2d: Vec<[f64; 2]>,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, GraphError> {
        if let Some(i) = joints2d.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(GraphError::NonFinite(i));
        }
        let (edges, _) = canonical_edges(edges, joints2d.len())?;
        Ok(Self { joints2d, edges, ..Default::default() })
    }

    pub fn with_view(mut self, view: View) -> Self {
        self.view = Some(view);
        self
    }

    pub fn len(&self) -> usize {
        self.joints2d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints2d.is_empty()
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        adjacency(self.len(), &self.edges)
    }

    pub fn edge_pairs(&self) -> Vec<(usize, usize)> {
        self.edges.iter().map(|e| (e.a(), e.b())).collect()
    }

    /// Lifts the drawing into 3D on the z = 0 plane, keeping topology.
    pub fn lift(&self) -> SkeletonGraph {
        SkeletonGraph {
            joints: self.joints2d.iter().map(|p| [p[0], p[1], 0.0]).collect(),
            edges: self.edges.clone(),
            ..Default::default()
        }
    }
}
