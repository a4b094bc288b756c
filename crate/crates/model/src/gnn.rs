//! Message-passing layers over skeleton graphs.
//!
//! Several graphs are processed together by stacking their node rows; a
//! [`GraphBatch`] records where each graph starts and precomputes the sparse
//! structures the layers need.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use strokerig_core::Edge;

use crate::autodiff::{Csr, Tape, Tensor, Var};
use crate::error::ModelError;
use crate::params::{uniform, Bound, ParamId, ParamSet};

#[derive(Debug, Clone)]
pub struct GraphBatch {
    offsets: Rc<Vec<usize>>,
    node_graph: Rc<Vec<usize>>,
    edges: Vec<(usize, usize)>,
    gcn: Rc<Vec<(usize, usize, f64)>>,
    neighbourhood: Rc<Csr>,
}

impl GraphBatch {
    /// Stacks graphs given as `(node_count, edges)`.
    pub fn new<'a>(graphs: impl IntoIterator<Item = (usize, &'a [Edge])>) -> Result<Self, ModelError> {
        let mut offsets = vec![0];
        let mut node_graph = Vec::new();
        let mut edges = Vec::new();
        for (g, (n, es)) in graphs.into_iter().enumerate() {
            let base = *offsets.last().unwrap();
            for e in es {
                if e.a() >= n || e.b() >= n || e.a() == e.b() {
                    return Err(ModelError::Shape(format!("edge ({}, {}) invalid for {n} nodes", e.a(), e.b())));
                }
                edges.push((base + e.a(), base + e.b()));
            }
            node_graph.extend(std::iter::repeat_n(g, n));
            offsets.push(base + n);
        }
        let m = node_graph.len();
        let mut lists: Vec<Vec<usize>> = (0..m).map(|i| vec![i]).collect();
        for &(a, b) in &edges {
            if !lists[a].contains(&b) {
                lists[a].push(b);
                lists[b].push(a);
            }
        }
        for l in &mut lists {
            l.sort_unstable();
        }
        let deg: Vec<f64> = lists.iter().map(|l| l.len() as f64).collect();
        let gcn = lists
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.iter().map(move |&j| (i, j)))
            .map(|(i, j)| (i, j, 1.0 / (deg[i] * deg[j]).sqrt()))
            .collect();
        Ok(Self {
            offsets: Rc::new(offsets),
            node_graph: Rc::new(node_graph),
            edges,
            gcn: Rc::new(gcn),
            neighbourhood: Rc::new(Csr::from_lists(&lists)),
        })
    }

    pub fn single(n: usize, edges: &[Edge]) -> Result<Self, ModelError> {
        Self::new([(n, edges)])
    }

    pub fn num_nodes(&self) -> usize {
        self.node_graph.len()
    }

    pub fn num_graphs(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn offsets(&self) -> Rc<Vec<usize>> {
        self.offsets.clone()
    }

    /// Graph index of every node row.
    pub fn node_graph(&self) -> Rc<Vec<usize>> {
        self.node_graph.clone()
    }

    pub fn range(&self, g: usize) -> std::ops::Range<usize> {
        self.offsets[g]..self.offsets[g + 1]
    }

    /// Stacked edges in global row indices.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Symmetric-normalized aggregation weights including self-loops.
    pub fn gcn_pairs(&self) -> Rc<Vec<(usize, usize, f64)>> {
        self.gcn.clone()
    }

    /// Each node's closed neighbourhood (itself plus adjacent nodes).
    pub fn neighbourhood(&self) -> Rc<Csr> {
        self.neighbourhood.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Identity,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Gelu => tape.gelu(x),
            Activation::Identity => x,
        }
    }
}

/// Affine map `x·W + b` with `W` stored as `fan_in × fan_out`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Uniform `±1/√fan_in` weights, zero bias.
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = params.add(format!("{name}.w"), uniform(rng, fan_in, fan_out, bound));
        let b = params.add(format!("{name}.b"), Tensor::zeros(1, fan_out));
        Self { w, b: Some(b), fan_in, fan_out }
    }

    pub fn without_bias<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = params.add(format!("{name}.w"), uniform(rng, fan_in, fan_out, bound));
        Self { w, b: None, fan_in, fan_out }
    }

    /// All-zero weights and bias.
    pub fn zeroed(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = params.add(format!("{name}.w"), Tensor::zeros(fan_in, fan_out));
        let b = params.add(format!("{name}.b"), Tensor::zeros(1, fan_out));
        Self { w, b: Some(b), fan_in, fan_out }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let y = tape.matmul(x, p.var(self.w));
        match self.b {
            Some(b) => tape.add_row(y, p.var(b)),
            None => y,
        }
    }
}

/// `act((Â·X)·W + b)` with `Â` the self-looped symmetric normalisation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GcnLayer {
    pub lin: Linear,
    pub activation: Activation,
}

impl GcnLayer {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self { lin: Linear::new(params, name, d_in, d_out, rng), activation: Activation::Gelu }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, batch: &GraphBatch) -> Var {
        let agg = tape.aggregate(x, batch.gcn_pairs(), batch.num_nodes());
        let y = self.lin.forward(tape, p, agg);
        self.activation.apply(tape, y)
    }
}

/// Multi-head attention with per-query key lists, heads concatenated and
/// mixed by an output map. No residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionCore {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl AttentionCore {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        width: usize,
        kv_width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && width % heads == 0, "width {width} not divisible by {heads} heads");
        Self {
            q: Linear::new(params, &format!("{name}.q"), width, width, rng),
            k: Linear::new(params, &format!("{name}.k"), kv_width, width, rng),
            v: Linear::new(params, &format!("{name}.v"), kv_width, width, rng),
            o: Linear::new(params, &format!("{name}.o"), width, width, rng),
            heads,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, queries: Var, keys: Var, csr: Rc<Csr>) -> Var {
        let q = self.q.forward(tape, p, queries);
        let k = self.k.forward(tape, p, keys);
        let v = self.v.forward(tape, p, keys);
        let a = tape.attention(q, k, v, self.heads, csr);
        self.o.forward(tape, p, a)
    }
}

/// Self-attention restricted to each node's closed neighbourhood, plus residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionLayer {
    pub core: AttentionCore,
}

impl AttentionLayer {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, width: usize, heads: usize, rng: &mut R) -> Self {
        Self { core: AttentionCore::new(params, name, width, width, heads, rng) }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, batch: &GraphBatch) -> Var {
        let a = self.core.forward(tape, p, x, x, batch.neighbourhood());
        tape.add(x, a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Gcn,
    Attention,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GraphLayer {
    Gcn(GcnLayer),
    Attention(AttentionLayer),
}

impl GraphLayer {
    pub fn new<R: Rng + ?Sized>(
        kind: LayerKind,
        params: &mut ParamSet,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        match kind {
            LayerKind::Gcn => GraphLayer::Gcn(GcnLayer::new(params, name, width, width, rng)),
            LayerKind::Attention => GraphLayer::Attention(AttentionLayer::new(params, name, width, heads, rng)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, batch: &GraphBatch) -> Var {
        match self {
            GraphLayer::Gcn(l) => l.forward(tape, p, x, batch),
            GraphLayer::Attention(l) => l.forward(tape, p, x, batch),
        }
    }
}

fn check_width(features: &Tensor, expected: usize) -> Result<(), ModelError> {
    if features.cols != expected {
        return Err(ModelError::Shape(format!("feature width {} but layer expects {expected}", features.cols)));
    }
    Ok(())
}

/// One graph-convolution layer applied to a single graph.
pub fn gcn_forward(features: &Tensor, edges: &[Edge], params: &ParamSet, layer: &GcnLayer) -> Result<Tensor, ModelError> {
    check_width(features, layer.lin.fan_in)?;
    let batch = GraphBatch::single(features.rows, edges)?;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let x = tape.leaf(features.clone());
    let y = layer.forward(&mut tape, &p, x, &batch);
    Ok(tape.value(y).clone())
}

/// One edge-masked attention layer applied to a single graph.
pub fn graph_attention_forward(
    features: &Tensor,
    edges: &[Edge],
    params: &ParamSet,
    layer: &AttentionLayer,
) -> Result<Tensor, ModelError> {
    if features.rows == 0 {
        return Err(ModelError::Shape("attention over an empty graph".into()));
    }
    check_width(features, layer.core.q.fan_in)?;
    let batch = GraphBatch::single(features.rows, edges)?;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let x = tape.leaf(features.clone());
    let y = layer.forward(&mut tape, &p, x, &batch);
    Ok(tape.value(y).clone())
}
