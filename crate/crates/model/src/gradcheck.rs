//! Central-difference checks of analytic parameter gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::params::ParamSet;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// `(flat index, analytic, finite difference, relative error)` per probed coordinate.
    pub points: Vec<(usize, f64, f64, f64)>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.points.iter().map(|p| p.3).fold(0.0, f64::max)
    }
}

/// `|a − b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Probes `count` coordinates, chosen in seeded random order among those
/// whose analytic gradient magnitude is at least `min_grad`, against
/// `(f(θ + h) − f(θ − h)) / 2h`.
pub fn check(
    params: &ParamSet,
    analytic: &[Tensor],
    f: impl Fn(&ParamSet) -> f64,
    count: usize,
    h: f64,
    min_grad: f64,
    seed: u64,
) -> GradCheck {
    let flat_grad: Vec<f64> = analytic.iter().flat_map(|t| t.data.iter().copied()).collect();
    let base = params.flatten();
    assert_eq!(flat_grad.len(), base.len(), "gradient layout must match parameters");
    let mut order: Vec<usize> = (0..base.len()).filter(|&i| flat_grad[i].abs() >= min_grad).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut probe = params.clone();
    let mut points = Vec::with_capacity(count);
    for &i in order.iter().take(count) {
        let mut x = base.clone();
        x[i] = base[i] + h;
        probe.assign_flat(&x);
        let up = f(&probe);
        x[i] = base[i] - h;
        probe.assign_flat(&x);
        let down = f(&probe);
        let fd = (up - down) / (2.0 * h);
        points.push((i, flat_grad[i], fd, relative_error(flat_grad[i], fd)));
    }
    GradCheck { points }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact() {
        let mut p = ParamSet::new();
        p.add("x", Tensor::from_vec(1, 3, vec![1.0, -2.0, 0.5]));
        let f = |q: &ParamSet| q.tensors()[0].data.iter().map(|v| v * v * v).sum::<f64>();
        let g = vec![Tensor::from_vec(1, 3, vec![3.0, 12.0, 0.75])];
        let r = check(&p, &g, f, 3, 1e-5, 0.0, 0);
        assert_eq!(r.points.len(), 3);
        assert!(r.max_rel_error() < 1e-8);
        let wrong = vec![Tensor::from_vec(1, 3, vec![3.0, 11.0, 0.75])];
        assert!(check(&p, &wrong, f, 3, 1e-5, 0.0, 0).max_rel_error() > 0.05);
    }
}
