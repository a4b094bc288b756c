//! Simulated drawings for training, and joint dropping for robustness tests.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::GraphError;
use crate::skeleton::{adjacency, components, Edge, SkeletonGraph, StrokeGraph2D, View};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrokeSimConfig {
    /// Probabilities of the front, side and top views.
    pub view_probs: [f64; 3],
    /// Std-dev of per-joint Gaussian jitter, in canvas units.
    pub jitter_sigma: f64,
    /// Global in-plane rotation drawn uniformly from ±this many degrees.
    pub max_rotation_deg: f64,
    /// Global scale drawn uniformly from this closed range.
    pub scale_range: [f64; 2],
}

impl Default for StrokeSimConfig {
    fn default() -> Self {
        Self { view_probs: [0.6, 0.2, 0.2], jitter_sigma: 0.02, max_rotation_deg: 10.0, scale_range: [0.95, 1.05] }
    }
}

impl StrokeSimConfig {
    /// Front view, no perturbation: the stroke is the exact projection.
    pub fn exact_front() -> Self {
        Self { view_probs: [1.0, 0.0, 0.0], jitter_sigma: 0.0, max_rotation_deg: 0.0, scale_range: [1.0, 1.0] }
    }
}

fn pick_view<R: Rng + ?Sized>(probs: &[f64; 3], rng: &mut R) -> View {
    let total: f64 = probs.iter().sum();
    let u = rng.random::<f64>() * total;
    if u < probs[0] {
        View::Front
    } else if u < probs[0] + probs[1] {
        View::Side
    } else {
        View::Top
    }
}

/// Projects `graph` through a randomly chosen view and perturbs it the way a
/// hand drawing would be: per-joint jitter, then a global rotation and scale
/// about the canvas origin. The chosen view is recorded on the stroke.
pub fn simulate_stroke<R: Rng + ?Sized>(graph: &SkeletonGraph, rng: &mut R, config: &StrokeSimConfig) -> StrokeGraph2D {
    let view = pick_view(&config.view_probs, rng);
    let mut stroke = graph.project(view).expect("axis views always project");
    if config.jitter_sigma > 0.0 {
        for p in &mut stroke.joints2d {
            for c in p.iter_mut() {
                let n: f64 = StandardNormal.sample(rng);
                *c += config.jitter_sigma * n;
            }
        }
    }
    let max = config.max_rotation_deg.abs().to_radians();
    let angle = if max > 0.0 { rng.random_range(-max..=max) } else { 0.0 };
    let [lo, hi] = config.scale_range;
    let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let (sin, cos) = angle.sin_cos();
    for p in &mut stroke.joints2d {
        let [x, y] = *p;
        *p = [scale * (cos * x - sin * y), scale * (sin * x + cos * y)];
    }
    stroke
}

/// Maximum resampling attempts before falling back to the largest component.
const DROP_RETRIES: usize = 10;

/// Removes `k` joints chosen uniformly at random.
///
/// A dropped joint with exactly two neighbours is contracted (its neighbours
/// get joined); any other dropped joint just loses its incident edges.
/// Remaining joints keep their relative order. If the result is disconnected
/// the draw is repeated; after the retry budget the largest component of the
/// last draw is returned.
pub fn drop_joints<R: Rng + ?Sized>(stroke: &StrokeGraph2D, k: usize, rng: &mut R) -> Result<StrokeGraph2D, GraphError> {
    drop_joints_indexed(stroke, k, rng).map(|(s, _)| s)
}

/// Like [`drop_joints`], also returning the original index of every kept joint.
pub fn drop_joints_indexed<R: Rng + ?Sized>(
    stroke: &StrokeGraph2D,
    k: usize,
    rng: &mut R,
) -> Result<(StrokeGraph2D, Vec<usize>), GraphError> {
    let n = stroke.len();
    if k >= n {
        return Err(GraphError::TooManyDropped { k, n });
    }
    if k == 0 {
        return Ok((stroke.clone(), (0..n).collect()));
    }
    let mut last = None;
    for _ in 0..DROP_RETRIES {
        let dropped: Vec<usize> = sample(rng, n, k).into_vec();
        let (candidate, kept) = remove_joints(stroke, &dropped);
        if components(candidate.len(), &candidate.edges).len() <= 1 {
            return Ok((candidate, kept));
        }
        last = Some((candidate, kept));
    }
    let (candidate, kept) = last.expect("at least one attempt");
    Ok(largest_component(&candidate, &kept))
}

fn remove_joints(stroke: &StrokeGraph2D, dropped: &[usize]) -> (StrokeGraph2D, Vec<usize>) {
    let n = stroke.len();
    let mut adj: Vec<Vec<usize>> = adjacency(n, &stroke.edges);
    let mut alive = vec![true; n];
    for &d in dropped {
        let nbrs = std::mem::take(&mut adj[d]);
        for &w in &nbrs {
            adj[w].retain(|&x| x != d);
        }
        if let [a, b] = nbrs[..] {
            if !adj[a].contains(&b) {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        alive[d] = false;
    }
    let kept: Vec<usize> = (0..n).filter(|&i| alive[i]).collect();
    let mut remap = vec![usize::MAX; n];
    for (new, &old) in kept.iter().enumerate() {
        remap[old] = new;
    }
    let mut edges: Vec<Edge> = Vec::new();
    for &a in &kept {
        for &b in &adj[a] {
            if a < b {
                edges.push(Edge::raw(remap[a], remap[b]));
            }
        }
    }
    edges.sort();
    edges.dedup();
    let out = StrokeGraph2D {
        joints2d: kept.iter().map(|&i| stroke.joints2d[i]).collect(),
        edges,
        view: stroke.view,
        text: stroke.text.clone(),
        extra: stroke.extra.clone(),
    };
    (out, kept)
}

fn largest_component(stroke: &StrokeGraph2D, kept: &[usize]) -> (StrokeGraph2D, Vec<usize>) {
    let comps = components(stroke.len(), &stroke.edges);
    // Ties go to the component with the smallest member.
    let best = comps.iter().enumerate().max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(&a.0))).unwrap().1;
    let mut remap = vec![usize::MAX; stroke.len()];
    for (new, &old) in best.iter().enumerate() {
        remap[old] = new;
    }
    let edges = stroke
        .edges
        .iter()
        .filter(|e| remap[e.a()] != usize::MAX && remap[e.b()] != usize::MAX)
        .map(|e| Edge::raw(remap[e.a()], remap[e.b()]))
        .collect();
    let out = StrokeGraph2D {
        joints2d: best.iter().map(|&i| stroke.joints2d[i]).collect(),
        edges,
        view: stroke.view,
        text: stroke.text.clone(),
        extra: stroke.extra.clone(),
    };
    (out, best.iter().map(|&i| kept[i]).collect())
}
