//! Named parameter tensors, initialisation and the AdamW optimiser.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_scalars(), "flat parameter length");
        let mut at = 0;
        for t in &mut self.tensors {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
    }

    /// True when both sets have the same names and shapes in the same order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }

    /// Replaces every tensor with values from `other`, which must share the layout.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<(), String> {
        if !self.same_layout(other) {
            for (i, name) in self.names.iter().enumerate() {
                match other.find(name) {
                    None => return Err(format!("missing tensor {name}")),
                    Some(j) if other.tensors[j.0].shape() != self.tensors[i].shape() => {
                        return Err(format!(
                            "tensor {name} has shape {:?}, expected {:?}",
                            other.tensors[j.0].shape(),
                            self.tensors[i].shape()
                        ))
                    }
                    _ => {}
                }
            }
            return Err(format!("expected {} tensors, found {}", self.len(), other.len()));
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }

    /// Adds N(0, scale²) noise to every entry; used to move away from
    /// structured initialisations in tests.
    pub fn perturb<R: Rng + ?Sized>(&mut self, rng: &mut R, scale: f64) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                let n: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
                *v += scale * n;
            }
        }
    }

    /// Places every tensor on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound { vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect() }
    }
}

/// Tape variables for a bound [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Parameter gradients in set order; unused parameters get zeros.
    pub fn grads(&self, mut g: Gradients, params: &ParamSet) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(params.tensors())
            .map(|(&v, t)| g.take(v).unwrap_or_else(|| Tensor::zeros(t.rows, t.cols)))
            .collect()
    }
}

pub fn uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, clip_norm: Some(1.0) }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect();
        Self { config, m: zeros(), v: zeros(), t: 0 }
    }

    /// Applies one update and returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> f64 {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        let norm = grads.iter().flat_map(|g| &g.data).map(|x| x * x).sum::<f64>().sqrt();
        let clip = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2, lr, eps, wd) = (c.beta1, c.beta2, c.lr, c.eps, c.weight_decay);
        let (inv1, inv2) = (1.0 / bc1, 1.0 / bc2);
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(ParamId(i));
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let it = p.data.iter_mut().zip(m.data.iter_mut()).zip(v.data.iter_mut()).zip(&g.data);
            for (((pk, mk), vk), &gk) in it {
                let gk = gk * clip;
                *mk = b1 * *mk + (1.0 - b1) * gk;
                *vk = b2 * *vk + (1.0 - b2) * gk * gk;
                *pk -= lr * (*mk * inv1 / ((*vk * inv2).sqrt() + eps) + wd * *pk);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut p = ParamSet::new();
        let id = p.add("x", Tensor::from_vec(1, 2, vec![3.0, -2.0]));
        let mut opt = AdamW::new(AdamConfig { lr: 0.05, clip_norm: None, ..Default::default() }, &p);
        for _ in 0..2000 {
            let x = p.get(id).clone();
            let g = Tensor::from_vec(1, 2, x.data.iter().map(|v| 2.0 * (v - 1.0)).collect());
            opt.step(&mut p, &[g]);
        }
        for v in &p.get(id).data {
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn first_adam_step_has_magnitude_lr() {
        let mut p = ParamSet::new();
        p.add("x", Tensor::scalar(0.0));
        let mut opt = AdamW::new(AdamConfig { lr: 0.1, clip_norm: None, ..Default::default() }, &p);
        opt.step(&mut p, &[Tensor::scalar(123.0)]);
        assert!((p.tensors()[0].item() + 0.1).abs() < 1e-9);
    }

    #[test]
    fn flat_round_trip() {
        let mut p = ParamSet::new();
        p.add("a", Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        p.add("b", Tensor::scalar(5.0));
        let f = p.flatten();
        let mut q = p.clone();
        q.assign_flat(&f.iter().map(|x| x * 2.0).collect::<Vec<_>>());
        assert_eq!(q.flatten(), vec![2.0, 4.0, 6.0, 8.0, 10.0]);
        assert!(p.same_layout(&q));
    }
}
