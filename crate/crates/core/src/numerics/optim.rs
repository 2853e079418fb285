//! Named parameter storage and SGD with momentum.
//!
//! Parameters keep their insertion order, which fixes both the update order
//! and the checkpoint record order. Gradients are pulled out of a graph
//! after `backward` and consumed by the next optimizer step.

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Option<Tensor<S>>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    entries: Vec<Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<usize> {
        let name = name.into();
        if self.entries.iter().any(|p| p.name == name) {
            return Err(Error::usage(format!("duplicate parameter name {name:?}")));
        }
        self.entries.push(Param {
            name,
            value,
            grad: None,
        });
        Ok(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> &Param<S> {
        &self.entries[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Param<S> {
        &mut self.entries[index]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<S>> {
        self.entries.iter().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.entries.iter_mut()
    }

    /// Registers every parameter as a graph leaf, trainable or frozen.
    /// Returned ids are index-aligned with the store.
    pub fn enter(&self, graph: &mut Graph<S>, trainable: bool) -> Vec<NodeId> {
        self.entries
            .iter()
            .map(|p| {
                if trainable {
                    graph.leaf_grad(p.value.clone())
                } else {
                    graph.leaf(p.value.clone())
                }
            })
            .collect()
    }

    /// Copies gradients from the graph back into the store after `backward`.
    pub fn pull_grads(&mut self, graph: &Graph<S>, ids: &[NodeId]) -> Result<()> {
        if ids.len() != self.entries.len() {
            return Err(Error::usage(format!(
                "pull_grads got {} node ids for {} parameters",
                ids.len(),
                self.entries.len()
            )));
        }
        for (param, &id) in self.entries.iter_mut().zip(ids) {
            let grad = graph.grad(id).ok_or_else(|| {
                Error::usage(format!(
                    "parameter {:?} has no gradient, was the forward pass frozen?",
                    param.name
                ))
            })?;
            param.grad = Some(grad.clone());
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad = None;
        }
    }

    /// Replaces values with checkpoint contents, matched by name and shape.
    pub fn load(&mut self, records: Vec<(String, Tensor<S>)>) -> Result<()> {
        if records.len() != self.entries.len() {
            return Err(Error::format(format!(
                "checkpoint holds {} tensors, model has {} parameters",
                records.len(),
                self.entries.len()
            )));
        }
        for (param, (name, value)) in self.entries.iter_mut().zip(records) {
            if param.name != name {
                return Err(Error::format(format!(
                    "checkpoint record {name:?} does not match parameter {:?}",
                    param.name
                )));
            }
            if param.value.dims() != value.dims() {
                return Err(Error::format(format!(
                    "checkpoint record {name:?} has dims {:?}, expected {:?}",
                    value.dims(),
                    param.value.dims()
                )));
            }
            param.value = value;
        }
        Ok(())
    }
}

/// Stochastic gradient descent with classical momentum:
/// `v <- momentum * v + grad`, `p <- p - lr * v`.
pub struct Sgd<S> {
    lr: S,
    momentum: S,
    clip_norm: Option<S>,
    velocity: Vec<Tensor<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(lr: S, momentum: S) -> Self {
        Sgd {
            lr,
            momentum,
            clip_norm: None,
            velocity: Vec::new(),
        }
    }

    /// Rescales each step's gradients so their joint norm never exceeds
    /// `max_norm`. Steps already within the bound are untouched.
    pub fn with_clip_norm(mut self, max_norm: S) -> Self {
        self.clip_norm = Some(max_norm);
        self
    }

    /// Applies one update and clears the consumed gradients.
    pub fn step(&mut self, params: &mut ParamStore<S>) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params
                .iter()
                .map(|p| Tensor::zeros(p.value.dims().to_vec()))
                .collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::usage(format!(
                "optimizer state tracks {} parameters, store has {}",
                self.velocity.len(),
                params.len()
            )));
        }
        let mut grad_scale = S::one();
        if let Some(max_norm) = self.clip_norm {
            let mut sq = S::zero();
            for param in params.iter() {
                if let Some(g) = &param.grad {
                    for &gj in g.data() {
                        sq += gj * gj;
                    }
                }
            }
            let norm = sq.sqrt();
            if norm > max_norm {
                grad_scale = max_norm / norm;
            }
        }
        for (i, param) in params.iter_mut().enumerate() {
            let grad = param.grad.take().ok_or_else(|| {
                Error::usage(format!("parameter {:?} has no gradient to apply", param.name))
            })?;
            let v = &mut self.velocity[i];
            for (vj, &gj) in v.data_mut().iter_mut().zip(grad.data()) {
                *vj = self.momentum * *vj + gj * grad_scale;
            }
            for (pj, &vj) in param.value.data_mut().iter_mut().zip(v.data()) {
                *pj = *pj - self.lr * vj;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(value: f64, grad: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(value)).unwrap();
        s.get_mut(0).grad = Some(Tensor::scalar(grad));
        s
    }

    #[test]
    fn single_step_moves_against_gradient() {
        let mut s = store_with(1.0, 1.0);
        let mut opt = Sgd::new(0.1, 0.0);
        opt.step(&mut s).unwrap();
        assert!((s.get(0).value.first() - 0.9).abs() < 1e-12);
        assert!(s.get(0).grad.is_none());
    }

    #[test]
    fn momentum_accumulates_across_steps() {
        let mut s = store_with(1.0, 1.0);
        let mut opt = Sgd::new(0.1, 0.9);
        opt.step(&mut s).unwrap();
        assert!((s.get(0).value.first() - 0.9).abs() < 1e-12);
        s.get_mut(0).grad = Some(Tensor::scalar(1.0));
        opt.step(&mut s).unwrap();
        // v = 0.9 * 1 + 1 = 1.9, p = 0.9 - 0.19 = 0.71
        assert!((s.get(0).value.first() - 0.71).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let mut s = store_with(1.0, 123.0);
        let mut opt = Sgd::new(0.0, 0.9);
        opt.step(&mut s).unwrap();
        assert_eq!(s.get(0).value.first(), 1.0);
    }

    #[test]
    fn clipping_rescales_only_oversized_steps() {
        // joint norm of (3, 4) is 5; a bound of 1 scales grads by 1/5
        let mut s = ParamStore::new();
        s.add("a", Tensor::scalar(0.0f64)).unwrap();
        s.add("b", Tensor::scalar(0.0f64)).unwrap();
        s.get_mut(0).grad = Some(Tensor::scalar(3.0));
        s.get_mut(1).grad = Some(Tensor::scalar(4.0));
        let mut opt = Sgd::new(1.0, 0.0).with_clip_norm(1.0);
        opt.step(&mut s).unwrap();
        assert!((s.get(0).value.first() + 0.6).abs() < 1e-12);
        assert!((s.get(1).value.first() + 0.8).abs() < 1e-12);

        // a step already inside the bound is untouched
        s.get_mut(0).grad = Some(Tensor::scalar(0.3));
        s.get_mut(1).grad = Some(Tensor::scalar(0.4));
        let mut opt = Sgd::new(1.0, 0.0).with_clip_norm(1.0);
        let before = (s.get(0).value.first(), s.get(1).value.first());
        opt.step(&mut s).unwrap();
        assert!((s.get(0).value.first() - (before.0 - 0.3)).abs() < 1e-12);
        assert!((s.get(1).value.first() - (before.1 - 0.4)).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(1.0f64)).unwrap();
        let mut opt = Sgd::new(0.1, 0.0);
        assert!(matches!(opt.step(&mut s), Err(Error::Usage(_))));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(1.0f64)).unwrap();
        assert!(s.add("w", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn pull_grads_roundtrip() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let ids = s.enter(&mut g, true);
        let sq = g.mul(ids[0], ids[0]).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        s.pull_grads(&g, &ids).unwrap();
        assert_eq!(s.get(0).grad.as_ref().unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn frozen_entry_has_no_grad_to_pull() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(1.0f64)).unwrap();
        let mut g = Graph::new();
        let ids = s.enter(&mut g, false);
        let loss = g.sum_all(ids[0]);
        g.backward(loss).unwrap();
        assert!(s.pull_grads(&g, &ids).is_err());
    }
}
