//! Adam with bias correction.

use crate::param::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new<S: Real>(store: &ParamStore<S>, lr: f64) -> Self {
        let zeros = |_| Vec::new();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: (0..store.len()).map(zeros).collect(),
            second: (0..store.len()).map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that holds a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (nb1, nb2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        let (inv_c1, inv_c2) = (T::of(1.0 / c1), T::of(1.0 / c2));
        for (i, p) in store.iter_mut().enumerate() {
            let Some(grad) = p.grad.as_ref() else { continue };
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            if m.is_empty() {
                m.resize(grad.numel(), T::ZERO);
                v.resize(grad.numel(), T::ZERO);
            }
            for (((w, &g), mi), vi) in p.value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + nb1 * g;
                *vi = b2 * *vi + nb2 * g * g;
                let mhat = *mi * inv_c1;
                let vhat = *vi * inv_c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let total: f64 = store
        .iter()
        .filter_map(|(_, p)| p.grad.as_ref())
        .map(|g| g.data().iter().map(|v| v.f64() * v.f64()).sum::<f64>())
        .sum();
    let norm = total.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / norm);
        for p in store.iter_mut() {
            if let Some(g) = p.grad.as_mut() {
                *g = g.map(|v| v * s);
            }
        }
    }
    norm
}
