//! Reverse-mode automatic differentiation over dense row-major `f64` matrices.
//!
//! A [`Tape`] records every operation as it is evaluated. Calling
//! [`Tape::backward`] on a 1×1 output walks the record in reverse and returns
//! the gradient of every node.

use std::rc::Rc;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data does not match {rows}x{cols}");
        Self { rows, cols, data }
    }

    pub fn from_rows<const C: usize>(rows: &[[f64; C]]) -> Self {
        Self::from_vec(rows.len(), C, rows.iter().flatten().copied().collect())
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn row_vector(v: &[f64]) -> Self {
        Self::from_vec(1, v.len(), v.to_vec())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() needs a 1x1 tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() }
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn column_sums(&self) -> Tensor {
        let mut out = Tensor::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, v) in out.data.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(self.rows, other.cols);
        gemm(self, false, other, false, &mut out);
        out
    }
}

/// `out += op(a) · op(b)` where `op` optionally transposes.
pub(crate) fn gemm(a: &Tensor, ta: bool, b: &Tensor, tb: bool, out: &mut Tensor) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "matmul inner dimensions differ: {:?}{} x {:?}{}", a.shape(), ta, b.shape(), tb);
    assert_eq!((out.rows, out.cols), (m, n), "matmul output shape");
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides describe exactly the row-major buffers checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            1.0,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Key lists per query row: keys of row `i` are `keys[starts[i]..starts[i + 1]]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Csr {
    pub starts: Vec<usize>,
    pub keys: Vec<usize>,
}

impl Csr {
    pub fn from_lists(lists: &[Vec<usize>]) -> Self {
        let mut starts = Vec::with_capacity(lists.len() + 1);
        let mut keys = Vec::new();
        starts.push(0);
        for l in lists {
            keys.extend_from_slice(l);
            starts.push(keys.len());
        }
        Self { starts, keys }
    }

    pub fn rows(&self) -> usize {
        self.starts.len() - 1
    }

    pub fn keys_of(&self, i: usize) -> &[usize] {
        &self.keys[self.starts[i]..self.starts[i + 1]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var, bool, bool),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Exp(Var),
    Square(Var),
    LogSigmoid(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    LayerNorm(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    SegmentSum(Var, Rc<Vec<usize>>),
    Reshape(Var),
    Aggregate(Var, Rc<Vec<(usize, usize, f64)>>),
    Attention { q: Var, k: Var, v: Var, heads: usize, csr: Rc<Csr>, weights: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like it when `v` did not influence the output.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(rows, cols))
    }

    /// Moves the gradient of `v` out, leaving `None` behind.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Input or parameter; constants are leaves whose gradient is ignored.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let m = if ta { av.cols } else { av.rows };
        let n = if tb { bv.rows } else { bv.cols };
        let mut out = Tensor::zeros(m, n);
        gemm(av, ta, bv, tb, &mut out);
        self.push(out, Op::MatMul(a, b, ta, tb))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a 1×n row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!((1, av.cols), rv.shape(), "add_row expects a 1x{} row", av.cols);
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a 1×n row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!((1, av.cols), rv.shape(), "mul_row expects a 1x{} row", av.cols);
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o *= b;
            }
        }
        self.push(out, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| s * x);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(log_sigmoid);
        self.push(out, Op::LogSigmoid(a))
    }

    /// Elementwise clamp; the gradient is passed only inside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data.iter().sum::<f64>() / v.data.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(av.rows, av.cols);
        let mut inv = Vec::with_capacity(av.rows);
        let n = av.cols as f64;
        for r in 0..av.rows {
            let row = av.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            for (o, x) in out.row_mut(r).iter_mut().zip(row) {
                *o = (x - mean) * is;
            }
            inv.push(is);
        }
        self.push(out, Op::LayerNorm(a, inv))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows, rows, "concat_cols row mismatch");
                out.row_mut(r)[c0..c0 + pv.cols].copy_from_slice(pv.row(r));
                c0 += pv.cols;
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols, "slice_cols out of range");
        let mut out = Tensor::zeros(av.rows, len);
        for r in 0..av.rows {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    /// Row `r` of the output is row `idx[r]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(idx.len(), av.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(av.row(i));
        }
        self.push(out, Op::GatherRows(a, idx))
    }

    /// Sums all entries of each row block `offsets[b]..offsets[b + 1]` into a B×1 column.
    pub fn segment_sum(&mut self, a: Var, offsets: Rc<Vec<usize>>) -> Var {
        let av = self.value(a);
        let b = offsets.len() - 1;
        let mut out = Tensor::zeros(b, 1);
        for g in 0..b {
            out.data[g] = av.data[offsets[g] * av.cols..offsets[g + 1] * av.cols].iter().sum();
        }
        self.push(out, Op::SegmentSum(a, offsets))
    }

    /// Reinterprets the row-major buffer with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows * av.cols, rows * cols, "reshape size mismatch");
        let out = Tensor::from_vec(rows, cols, av.data.clone());
        self.push(out, Op::Reshape(a))
    }

    /// Sparse weighted sum: `out[i] += w · a[j]` for each `(i, j, w)`.
    pub fn aggregate(&mut self, a: Var, pairs: Rc<Vec<(usize, usize, f64)>>, rows: usize) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(rows, av.cols);
        for &(i, j, w) in pairs.iter() {
            let src = &av.data[j * av.cols..(j + 1) * av.cols];
            for (o, s) in out.row_mut(i).iter_mut().zip(src) {
                *o += w * s;
            }
        }
        self.push(out, Op::Aggregate(a, pairs))
    }

    /// Multi-head scaled dot-product attention where query row `i` attends
    /// only to the key rows listed in `csr`. Rows with no keys output zero.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, csr: Rc<Csr>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let w = qv.cols;
        assert!(heads > 0 && w % heads == 0, "width {w} not divisible by {heads} heads");
        assert_eq!(kv.cols, w, "key width");
        assert_eq!(vv.shape(), kv.shape(), "value shape");
        assert_eq!(csr.rows(), qv.rows, "csr rows");
        let dh = w / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(qv.rows, w);
        let mut weights = vec![0.0; csr.keys.len() * heads];
        let mut scores = Vec::new();
        for i in 0..qv.rows {
            let (s0, s1) = (csr.starts[i], csr.starts[i + 1]);
            if s0 == s1 {
                continue;
            }
            let qi = qv.row(i);
            for h in 0..heads {
                let hs = h * dh..(h + 1) * dh;
                scores.clear();
                for &j in &csr.keys[s0..s1] {
                    let kj = &kv.row(j)[hs.clone()];
                    scores.push(scale * qi[hs.clone()].iter().zip(kj).map(|(a, b)| a * b).sum::<f64>());
                }
                let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - mx).exp();
                    z += *s;
                }
                let orow = &mut out.data[i * w + h * dh..i * w + (h + 1) * dh];
                for (e, (&j, s)) in csr.keys[s0..s1].iter().zip(&scores).enumerate() {
                    let a = s / z;
                    weights[(s0 + e) * heads + h] = a;
                    for (o, x) in orow.iter_mut().zip(&vv.row(j)[hs.clone()]) {
                        *o += a * x;
                    }
                }
            }
        }
        self.push(out, Op::Attention { q, k, v, heads, csr, weights })
    }

    /// Gradients of the scalar `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.shape(out), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b, ta, tb) => {
                let (av, bv) = (val(a), val(b));
                let mut ga = Tensor::zeros(av.rows, av.cols);
                if ta {
                    gemm(bv, tb, g, true, &mut ga);
                } else {
                    gemm(g, false, bv, !tb, &mut ga);
                }
                let mut gb = Tensor::zeros(bv.rows, bv.cols);
                if tb {
                    gemm(g, true, av, ta, &mut gb);
                } else {
                    gemm(av, !ta, g, false, &mut gb);
                }
                accumulate(grads, a, ga);
                accumulate(grads, b, gb);
            }
            &Op::Add(a, b) => {
                accumulate(grads, a, g.clone());
                accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                accumulate(grads, a, g.clone());
                accumulate(grads, b, g.map(|x| -x));
            }
            &Op::Mul(a, b) => {
                accumulate(grads, a, g.zip(val(b), |x, y| x * y));
                accumulate(grads, b, g.zip(val(a), |x, y| x * y));
            }
            &Op::AddRow(a, row) => {
                accumulate(grads, a, g.clone());
                accumulate(grads, row, g.column_sums());
            }
            &Op::MulRow(a, row) => {
                let (av, rv) = (val(a), val(row));
                let mut ga = g.clone();
                for r in 0..ga.rows {
                    for (x, s) in ga.row_mut(r).iter_mut().zip(&rv.data) {
                        *x *= s;
                    }
                }
                accumulate(grads, a, ga);
                accumulate(grads, row, g.zip(av, |x, y| x * y).column_sums());
            }
            &Op::Scale(a, s) => accumulate(grads, a, g.map(|x| s * x)),
            &Op::AddScalar(a) => accumulate(grads, a, g.clone()),
            &Op::Gelu(a) => accumulate(grads, a, g.zip(val(a), |x, y| x * gelu_grad(y))),
            &Op::Exp(a) => accumulate(grads, a, g.zip(&node.value, |x, y| x * y)),
            &Op::Square(a) => accumulate(grads, a, g.zip(val(a), |x, y| 2.0 * x * y)),
            &Op::LogSigmoid(a) => accumulate(grads, a, g.zip(val(a), |x, y| x * sigmoid(-y))),
            &Op::Clamp(a, lo, hi) => {
                accumulate(grads, a, g.zip(val(a), |x, y| if (lo..=hi).contains(&y) { x } else { 0.0 }))
            }
            &Op::Sum(a) => {
                let (r, c) = val(a).shape();
                accumulate(grads, a, Tensor::from_vec(r, c, vec![g.data[0]; r * c]));
            }
            &Op::Mean(a) => {
                let (r, c) = val(a).shape();
                let n = (r * c).max(1) as f64;
                accumulate(grads, a, Tensor::from_vec(r, c, vec![g.data[0] / n; r * c]));
            }
            Op::LayerNorm(a, inv) => {
                let y = &node.value;
                let n = y.cols as f64;
                let mut ga = Tensor::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let mg = gr.iter().sum::<f64>() / n;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((o, gi), yi) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = inv[r] * (gi - mg - yi * mgy);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let cols = val(p).cols;
                    let mut gp = Tensor::zeros(g.rows, cols);
                    for r in 0..g.rows {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + cols]);
                    }
                    accumulate(grads, p, gp);
                    c0 += cols;
                }
            }
            &Op::SliceCols(a, start) => {
                let av = val(a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                for r in 0..g.rows {
                    ga.row_mut(r)[start..start + g.cols].copy_from_slice(g.row(r));
                }
                accumulate(grads, a, ga);
            }
            Op::GatherRows(a, idx) => {
                let av = val(*a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                for (r, &i) in idx.iter().enumerate() {
                    for (o, x) in ga.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::SegmentSum(a, offsets) => {
                let av = val(*a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                for b in 0..offsets.len() - 1 {
                    ga.data[offsets[b] * av.cols..offsets[b + 1] * av.cols].fill(g.data[b]);
                }
                accumulate(grads, *a, ga);
            }
            &Op::Reshape(a) => {
                let (r, c) = val(a).shape();
                accumulate(grads, a, Tensor::from_vec(r, c, g.data.clone()));
            }
            Op::Aggregate(a, pairs) => {
                let av = val(*a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                for &(i, j, w) in pairs.iter() {
                    for (o, x) in ga.row_mut(j).iter_mut().zip(g.row(i)) {
                        *o += w * x;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Attention { q, k, v, heads, csr, weights } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let heads = *heads;
                let w = qv.cols;
                let dh = w / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = Tensor::zeros(qv.rows, w);
                let mut gk = Tensor::zeros(kv.rows, w);
                let mut gv = Tensor::zeros(vv.rows, w);
                let mut dalpha = Vec::new();
                for i in 0..qv.rows {
                    let (s0, s1) = (csr.starts[i], csr.starts[i + 1]);
                    for h in 0..heads {
                        let hs = h * dh..(h + 1) * dh;
                        let gi = &g.row(i)[hs.clone()];
                        dalpha.clear();
                        let mut dot = 0.0;
                        for (e, &j) in csr.keys[s0..s1].iter().enumerate() {
                            let a = weights[(s0 + e) * heads + h];
                            let da: f64 = gi.iter().zip(&vv.row(j)[hs.clone()]).map(|(x, y)| x * y).sum();
                            for (o, x) in gv.row_mut(j)[hs.clone()].iter_mut().zip(gi) {
                                *o += a * x;
                            }
                            dot += a * da;
                            dalpha.push(da);
                        }
                        for (e, &j) in csr.keys[s0..s1].iter().enumerate() {
                            let a = weights[(s0 + e) * heads + h];
                            let ds = a * (dalpha[e] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let kj = &kv.row(j)[hs.clone()];
                            for (o, x) in gq.row_mut(i)[hs.clone()].iter_mut().zip(kj) {
                                *o += ds * x;
                            }
                            let qi = &qv.row(i)[hs.clone()];
                            for (o, x) in gk.row_mut(j)[hs.clone()].iter_mut().zip(qi) {
                                *o += ds * x;
                            }
                        }
                    }
                }
                accumulate(grads, *q, gq);
                accumulate(grads, *k, gk);
                accumulate(grads, *v, gv);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks d(build)/d(input) for each input against central differences.
    fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let eval = |ins: &[Tensor]| {
            let mut t = Tape::new();
            let vars: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone())).collect();
            let out = build(&mut t, &vars);
            t.value(out).item()
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out);
        let h = 1e-6;
        for (vi, x) in inputs.iter().enumerate() {
            let g = grads.get_or_zeros(vars[vi], x.rows, x.cols);
            for e in 0..x.data.len() {
                let mut plus = inputs.clone();
                plus[vi].data[e] += h;
                let mut minus = inputs.clone();
                minus[vi].data[e] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let err = (fd - g.data[e]).abs() / fd.abs().max(g.data[e].abs()).max(1e-6);
                assert!(err < 1e-5, "input {vi} entry {e}: analytic {} fd {fd}", g.data[e]);
            }
        }
    }

    #[test]
    fn matmul_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = if ta { random(&mut rng, 4, 3) } else { random(&mut rng, 3, 4) };
            let b = if tb { random(&mut rng, 2, 4) } else { random(&mut rng, 4, 2) };
            check(vec![a, b], |t, v| {
                let m = t.matmul_t(v[0], ta, v[1], tb);
                let s = t.square(m);
                t.sum(s)
            });
        }
    }

    #[test]
    fn matmul_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, 5, 7);
        let b = random(&mut rng, 7, 3);
        let c = a.matmul(&b);
        for i in 0..5 {
            for j in 0..3 {
                let naive: f64 = (0..7).map(|k| a.get(i, k) * b.get(k, j)).sum();
                assert!((c.get(i, j) - naive).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn elementwise_and_broadcast_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b, r) = (random(&mut rng, 3, 4), random(&mut rng, 3, 4), random(&mut rng, 1, 4));
        check(vec![a, b, r], |t, v| {
            let x = t.mul(v[0], v[1]);
            let x = t.add_row(x, v[2]);
            let x = t.mul_row(x, v[2]);
            let x = t.gelu(x);
            let y = t.sub(x, v[1]);
            let y = t.exp(y);
            let y = t.scale(y, 0.7);
            let y = t.add_scalar(y, 0.1);
            let z = t.log_sigmoid(y);
            let z = t.add(z, v[0]);
            let z = t.square(z);
            t.mean(z)
        });
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a, w) = (random(&mut rng, 3, 6), random(&mut rng, 3, 6));
        check(vec![a, w], |t, v| {
            let y = t.layer_norm(v[0], 1e-5);
            let y = t.mul(y, v[1]);
            t.sum(y)
        });
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = Tape::new();
        let a = t.leaf(random(&mut rng, 4, 8));
        let y = t.layer_norm(a, 0.0);
        for r in 0..4 {
            let row = t.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|x| x * x).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn structural_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (a, b, w) = (random(&mut rng, 4, 3), random(&mut rng, 4, 2), random(&mut rng, 6, 5));
        let idx = Rc::new(vec![3, 0, 0, 1, 2, 3]);
        let offs = Rc::new(vec![0, 2, 6]);
        let pairs = Rc::new(vec![(0, 1, 0.5), (1, 0, 0.5), (2, 2, 1.0), (3, 1, -0.3), (0, 0, 0.2)]);
        check(vec![a, b, w], move |t, v| {
            let c = t.concat_cols(&[v[0], v[1]]);
            let c = t.aggregate(c, pairs.clone(), 4);
            let g = t.gather_rows(c, idx.clone());
            let s = t.slice_cols(g, 1, 4);
            let r = t.reshape(s, 12, 2);
            let r = t.reshape(r, 6, 4);
            let wc = t.slice_cols(v[2], 0, 4);
            let m = t.mul(r, wc);
            let m = t.clamp(m, -0.3, 0.3);
            let seg = t.segment_sum(m, offs.clone());
            let sq = t.square(seg);
            t.sum(sq)
        });
    }

    #[test]
    fn attention_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let csr = Rc::new(Csr::from_lists(&[vec![0, 1], vec![1, 0, 2], vec![2], vec![]]));
        let (q, k, v, w) =
            (random(&mut rng, 4, 4), random(&mut rng, 3, 4), random(&mut rng, 3, 4), random(&mut rng, 4, 4));
        check(vec![q, k, v, w], move |t, x| {
            let o = t.attention(x[0], x[1], x[2], 2, csr.clone());
            let o = t.mul(o, x[3]);
            t.sum(o)
        });
    }

    #[test]
    fn attention_singleton_copies_value() {
        let mut t = Tape::new();
        let q = t.leaf(Tensor::from_rows(&[[3.0, -1.0]]));
        let v = t.leaf(Tensor::from_rows(&[[0.25, 4.0]]));
        let o = t.attention(q, q, v, 1, Rc::new(Csr::from_lists(&[vec![0]])));
        assert_eq!(t.value(o).data, vec![0.25, 4.0]);
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
        assert!(log_sigmoid(-800.0).is_finite());
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
        assert_eq!(log_sigmoid(800.0), 0.0);
    }
}
