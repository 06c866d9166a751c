//! Adam over named parameter stores, fed with accumulated gradients.

use std::collections::BTreeMap;

use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every store, using each entry's gradient buffer
    /// multiplied by `grad_scale`, then clears the buffers. `stores` pairs a
    /// stable key with each store so moment estimates persist across calls.
    pub fn step(&mut self, stores: &mut [(&str, &mut ParamStore)], grad_scale: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (key, store) in stores.iter_mut() {
            for (name, p) in store.iter_mut() {
                let Some(g) = p.take_grad() else { continue };
                let n = p.numel();
                let (m, v) =
                    self.moments.entry(format!("{key}/{name}")).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
                for (i, w) in p.data_mut().iter_mut().enumerate() {
                    let gi = g[i] * grad_scale;
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                    *w -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![1.0, -1.0]).unwrap().with_grad());
        s.get_mut("w").unwrap().accumulate_grad(&[4.0, -2.0]).unwrap();
        let mut adam = Adam::new(0.1, 0.9, 0.999, 1e-8);
        adam.step(&mut [("a", &mut s)], 0.5);
        let w = s.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
        assert!(s.grads_are_zero());
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::scalar(3.0).with_grad());
        let mut adam = Adam::new(0.05, 0.9, 0.999, 1e-8);
        for _ in 0..500 {
            let x = s.get("x").unwrap().data()[0];
            s.get_mut("x").unwrap().accumulate_grad(&[2.0 * (x - 1.0)]).unwrap();
            adam.step(&mut [("q", &mut s)], 1.0);
        }
        assert!((s.get("x").unwrap().data()[0] - 1.0).abs() < 1e-2);
    }
}
