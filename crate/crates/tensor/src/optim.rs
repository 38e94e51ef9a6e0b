use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Adam with bias-corrected moments. Frozen parameters are skipped.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<F: Real>(config: AdamConfig, store: &ParamStore<F>) -> Self {
        let zeros = |_| Vec::new();
        Adam {
            config,
            step: 0,
            first: (0..store.len()).map(zeros).collect(),
            second: (0..store.len()).map(zeros).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Apply one update from the accumulated gradients, then zero them.
    /// A non-finite gradient anywhere rejects the whole step.
    pub fn step<F: Real>(&mut self, store: &mut ParamStore<F>) -> Result<()> {
        for (_, p) in store.iter() {
            if !p.frozen() && !p.grad().is_finite() {
                return Err(TensorError::NonFiniteGradient(p.name().to_string()));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.is_frozen(id) {
                continue;
            }
            let i = id.index();
            let (value, grad) = store.value_and_grad_mut(id);
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            if m.is_empty() {
                m.resize(value.len(), 0.0);
                v.resize(value.len(), 0.0);
            }
            for (j, (w, g)) in value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                let g = g.as_f64();
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                *w = F::lit(w.as_f64() - update);
            }
        }
        store.zero_grad();
        Ok(())
    }
}

/// Rescale gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Real>(store: &mut ParamStore<F>, max_norm: f64) -> f64 {
    let ids: Vec<_> = store.ids().filter(|&id| !store.is_frozen(id)).collect();
    let norm = ids
        .iter()
        .flat_map(|&id| store.get(id).grad().data().iter().map(|g| g.as_f64().powi(2)))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = F::lit(max_norm / norm);
        for id in ids {
            for g in store.grad_mut(id).data_mut() {
                *g *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::{Graph, Mode};

    fn scalar_store(x: f32) -> (ParamStore<f32>, crate::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::scalar(x)).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut s, id) = scalar_store(0.7);
        let mut opt = Adam::new(AdamConfig::default(), &s);
        opt.step(&mut s).unwrap();
        assert_eq!(s.value(id).item(), 0.7);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // m̂ = g, v̂ = g², so the first update is -lr * g / (|g| + eps).
        let (mut s, id) = scalar_store(0.0);
        let cfg = AdamConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut opt = Adam::new(cfg, &s);
        s.grad_mut(id).data_mut()[0] = 1.0;
        opt.step(&mut s).unwrap();
        let expected = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((s.value(id).item() as f64 - expected).abs() < 1e-6);
        assert_eq!(s.get(id).grad().item(), 0.0, "grads zeroed");
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let (mut s, id) = scalar_store(1.0);
        let mut opt = Adam::new(AdamConfig::default(), &s);
        s.grad_mut(id).data_mut()[0] = f32::NAN;
        assert!(matches!(opt.step(&mut s), Err(TensorError::NonFiniteGradient(_))));
        assert_eq!(opt.step_count(), 0);
        assert_eq!(s.value(id).item(), 1.0);
    }

    #[test]
    fn minimizes_square() {
        let (mut s, id) = scalar_store(1.0);
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() }, &s);
        for _ in 0..100 {
            let mut g = Graph::new(Mode::Eval, 0);
            let x = g.param(&s, id);
            let sq = g.mul(x, x).unwrap();
            let loss = g.sum(sq).unwrap();
            g.backward(loss, &mut [&mut s]).unwrap();
            opt.step(&mut s).unwrap();
        }
        assert!(s.value(id).item().abs() < 0.1, "x = {}", s.value(id).item());
    }

    #[test]
    fn clipping_bounds_norm() {
        let (mut s, id) = scalar_store(0.0);
        s.grad_mut(id).data_mut()[0] = -8.0;
        let before = clip_grad_norm(&mut s, 2.0);
        assert_eq!(before, 8.0);
        assert!((s.get(id).grad().item() + 2.0).abs() < 1e-6);
    }
}
