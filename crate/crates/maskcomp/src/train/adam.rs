//! Adam with fixed hyperparameters and per-parameter state keyed by name.

use crate::model::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::collections::BTreeMap;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    updates: usize,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            updates: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    /// One update over the supplied (already averaged) gradients. Only
    /// parameters present in `grads` move; moments live in f64 regardless
    /// of the training precision.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Vec<f64>>) {
        self.updates += 1;
        let t = self.updates as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (name, g) in grads {
            let current = store.get(name).expect("gradient for unknown parameter");
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let mut data: Vec<T> = current.data().to_vec();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let delta = self.lr * m_hat / (v_hat.sqrt() + self.eps);
                data[i] = T::from_f64(data[i].to_f64() - delta);
            }
            let shape = current.shape().to_vec();
            store
                .set_value(name, Tensor::new(shape, data).expect("shape preserved"))
                .expect("parameter exists");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut store = ParamStore::<f32>::new();
        store.insert("w", Tensor::full(vec![3], 1.5), true);
        let before = store.get("w").unwrap().clone();
        let mut opt = Adam::new(0.0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![1.0, -2.0, 3.0]);
        opt.step(&mut store, &grads);
        assert_eq!(store.get("w").unwrap().data(), before.data());
        assert_eq!(opt.updates(), 1);
    }

    #[test]
    fn descends_a_quadratic() {
        // minimize (w - 3)^2 from w = 0
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::scalar(0.0), true);
        let mut opt = Adam::new(0.1);
        for _ in 0..200 {
            let w = store.get("w").unwrap().data()[0];
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), vec![2.0 * (w - 3.0)]);
            opt.step(&mut store, &grads);
        }
        let w = store.get("w").unwrap().data()[0];
        assert!((w - 3.0).abs() < 0.1, "converged to {w}");
    }
}
