//! Adam optimizer and the named parameter set it updates.
//!
//! Parameters live outside any graph as [`Tensor`]s. Each training step
//! inserts them into a fresh [`Graph`], runs forward/backward, copies the
//! gradients back with [`ParamSet::pull_grads`], and applies one Adam update.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, TensorId};

/// Named, insertion-ordered parameter collection. Ordering is stable so
/// serialization and update sweeps are deterministic.
#[derive(Debug, Default, Clone)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        assert!(
            self.get(name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push((name.to_string(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Insert every parameter into `graph` as a leaf, returning name → id.
    pub fn bind(&self, graph: &mut Graph) -> BTreeMap<String, TensorId> {
        self.entries
            .iter()
            .map(|(n, t)| (n.clone(), graph.insert(t)))
            .collect()
    }

    /// Copy gradients from a finished graph back onto the parameter tensors.
    /// Parameters with requires_grad=false keep grad=None.
    pub fn pull_grads(&mut self, graph: &Graph, ids: &BTreeMap<String, TensorId>) {
        for (name, tensor) in self.entries.iter_mut() {
            let id = ids[name.as_str()];
            tensor.grad = graph.grad(id).map(|g| g.to_vec());
        }
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.entries.iter_mut() {
            t.grad = None;
        }
    }
}

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with bias correction (β1=0.9, β2=0.999, ε=1e-8 by default).
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    slots: BTreeMap<String, Slot>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter that has a gradient. Parameters with
    /// grad=None (frozen, or unused this step) are left untouched and their
    /// moment buffers do not advance.
    ///
    /// `context` labels the step (epoch/batch) for divergence reports.
    pub fn step(&mut self, params: &mut ParamSet, context: &str) -> Result<()> {
        self.step += 1;
        let t = self.step;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        for (name, tensor) in params.entries.iter_mut() {
            let Some(grad) = tensor.grad.as_ref() else {
                continue;
            };
            if let Some(&bad) = grad.iter().find(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    param: name.clone(),
                    context: format!("{context} (gradient value {bad})"),
                });
            }
            let slot = self.slots.entry(name.clone()).or_insert_with(|| Slot {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
            });
            for i in 0..grad.len() {
                let g = grad[i];
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g;
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                tensor.data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(data: Vec<f64>) -> ParamSet {
        let n = data.len();
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(data, vec![n]).unwrap());
        p
    }

    #[test]
    fn zero_grad_leaves_param_unchanged() {
        let mut params = one_param(vec![1.0, -2.0]);
        params.get_mut("w").unwrap().grad = Some(vec![0.0, 0.0]);
        let mut adam = Adam::new(0.1);
        adam.step(&mut params, "test").unwrap();
        assert_eq!(params.get("w").unwrap().data, vec![1.0, -2.0]);
    }

    #[test]
    fn missing_grad_skipped() {
        let mut params = one_param(vec![1.0]);
        let mut adam = Adam::new(0.1);
        adam.step(&mut params, "test").unwrap();
        assert_eq!(params.get("w").unwrap().data, vec![1.0]);
        assert!(adam.slots.is_empty());
    }

    #[test]
    fn first_step_closed_form() {
        // With zero-initialized moments, bias correction makes the first
        // update exactly lr · g / (|g| + ε·√bc2/bc1-ish); for Adam as defined:
        // m_hat = g, v_hat = g², so Δ = lr · g / (|g| + ε).
        let g = 0.37;
        let mut params = one_param(vec![5.0]);
        params.get_mut("w").unwrap().grad = Some(vec![g]);
        let mut adam = Adam::new(0.01);
        adam.step(&mut params, "test").unwrap();
        let expected = 5.0 - 0.01 * g / (g.abs() + 1e-8);
        assert!((params.get("w").unwrap().data[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn lr_zero_is_identity() {
        let mut params = one_param(vec![0.5, 0.7]);
        params.get_mut("w").unwrap().grad = Some(vec![1.0, -3.0]);
        let mut adam = Adam::new(0.0);
        adam.step(&mut params, "test").unwrap();
        assert_eq!(params.get("w").unwrap().data, vec![0.5, 0.7]);
    }

    #[test]
    fn non_finite_grad_is_divergence() {
        let mut params = one_param(vec![0.5]);
        params.get_mut("w").unwrap().grad = Some(vec![f64::NAN]);
        let mut adam = Adam::new(0.01);
        let err = adam.step(&mut params, "epoch 2 batch 7").unwrap_err();
        match err {
            Error::Divergence { param, context } => {
                assert_eq!(param, "w");
                assert!(context.contains("epoch 2 batch 7"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn converges_on_quadratic() {
        // Minimize (w - 3)²; Adam should get close within a few hundred steps.
        let mut params = one_param(vec![0.0]);
        let mut adam = Adam::new(0.05);
        for _ in 0..500 {
            let w = params.get("w").unwrap().data[0];
            params.get_mut("w").unwrap().grad = Some(vec![2.0 * (w - 3.0)]);
            adam.step(&mut params, "quad").unwrap();
        }
        assert!((params.get("w").unwrap().data[0] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn bind_and_pull_roundtrip() {
        let mut params = ParamSet::new();
        params.insert("a", Tensor::new(vec![2.0], vec![1]).unwrap());
        params.insert("frozen", Tensor::new(vec![4.0], vec![1]).unwrap().frozen());

        let mut g = Graph::new();
        let ids = params.bind(&mut g);
        let prod = g.mul(ids["a"], ids["frozen"]).unwrap();
        let loss = g.reduce_sum(prod);
        g.backward(loss).unwrap();
        params.pull_grads(&g, &ids);

        assert_eq!(params.get("a").unwrap().grad.as_deref(), Some(&[4.0][..]));
        assert!(params.get("frozen").unwrap().grad.is_none());
    }
}
