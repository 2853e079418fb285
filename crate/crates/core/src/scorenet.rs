//! Difficulty scoring and the easy/hard split.
//!
//! A small always-on head (see [`Model::scorenet_logits`]) predicts the
//! label from gradient-stopped tokens. Its per-instance cross entropy is the
//! difficulty score: confidently classifiable instances score low and are
//! the ones worth making harder through mixing. The head trains on its own
//! auxiliary loss and never updates the encoder.

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;
use crate::transformer::Model;

/// Per-instance difficulty scores, one cross-entropy value per instance.
#[derive(Clone, Debug)]
pub struct DifficultyVector<S> {
    values: Vec<S>,
}

impl<S: Scalar> DifficultyVector<S> {
    pub fn new(values: Vec<S>) -> Self {
        DifficultyVector { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> S {
        self.values[i]
    }

    pub fn as_slice(&self) -> &[S] {
        &self.values
    }
}

/// Instances picked for mixing, as ascending batch indices.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EasySelection {
    pub indices: Vec<usize>,
}

impl EasySelection {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Selects instances whose difficulty is strictly below `tau`. A zero
/// threshold therefore selects nothing, and an infinite one everything.
pub fn select_easy<S: Scalar>(u: &DifficultyVector<S>, tau: S) -> EasySelection {
    EasySelection {
        indices: (0..u.len()).filter(|&i| u.get(i) < tau).collect(),
    }
}

/// In-graph difficulty of a token batch: runs the scorer and returns the
/// per-instance cross entropy both as values (for gating decisions) and as
/// the graph node (for the auxiliary loss).
pub fn difficulty<S: Scalar>(
    model: &Model<S>,
    g: &mut Graph<S>,
    tokens: NodeId,
    labels: &Tensor<S>,
    ids: &[NodeId],
) -> Result<(DifficultyVector<S>, NodeId)> {
    let logits = model.scorenet_logits(g, tokens, ids)?;
    let ce = g.cross_entropy(logits, labels)?;
    let values = DifficultyVector::new(g.value(ce).data().to_vec());
    Ok((values, ce))
}

/// Difficulty from plain token values, on a frozen throwaway graph.
pub fn difficulty_of<S: Scalar>(
    model: &Model<S>,
    tokens: &Tensor<S>,
    labels: &Tensor<S>,
) -> Result<DifficultyVector<S>> {
    let mut g = Graph::new();
    let ids = model.params().enter(&mut g, false);
    let node = g.leaf(tokens.clone());
    let (u, _) = difficulty(model, &mut g, node, labels, ids.as_slice())?;
    Ok(u)
}

/// Auxiliary training signal for the scorer: mean difficulty, scaled.
pub fn scorenet_aux_loss<S: Scalar>(g: &mut Graph<S>, ce: NodeId, weight: S) -> Result<NodeId> {
    if g.dims(ce).len() != 1 {
        return Err(Error::usage(format!(
            "aux loss expects per-instance losses [b], got {:?}",
            g.dims(ce)
        )));
    }
    let mean = g.mean_all(ce);
    Ok(g.scale(mean, weight))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::{Hooks, ModelConfig};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            depth: 2,
            heads: 2,
            dim: 8,
            num_classes: 3,
            htm_layer: Some(1),
            vtm_layer: None,
            ..ModelConfig::default()
        }
    }

    fn tokens_and_labels(b: usize) -> (Tensor<f64>, Tensor<f64>) {
        let data = (0..b * 4 * 8)
            .map(|i| ((i * 37 % 101) as f64 / 101.0) - 0.5)
            .collect();
        let tokens = Tensor::new(vec![b, 4, 8], data).unwrap();
        let mut labels = Tensor::<f64>::zeros(vec![b, 3]);
        for i in 0..b {
            labels.set(&[i, i % 3], 1.0);
        }
        (tokens, labels)
    }

    #[test]
    fn zeroed_scorer_outputs_log_class_count() {
        let mut model = Model::<f64>::new(&tiny_cfg(), true, 3).unwrap();
        for p in model.params_mut().iter_mut() {
            if p.name.starts_with("scorenet.") {
                for v in p.value.data_mut() {
                    *v = 0.0;
                }
            }
        }
        let (tokens, labels) = tokens_and_labels(4);
        let u = difficulty_of(&model, &tokens, &labels).unwrap();
        for i in 0..4 {
            assert!((u.get(i) - 3.0f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_instances_score_identically() {
        let model = Model::<f64>::new(&tiny_cfg(), true, 5).unwrap();
        let (tokens, labels) = tokens_and_labels(2);
        let mut dup_tokens = tokens.data().to_vec();
        dup_tokens.extend_from_slice(&tokens.data()[..4 * 8]);
        let dup_tokens = Tensor::new(vec![3, 4, 8], dup_tokens).unwrap();
        let mut dup_labels = labels.data().to_vec();
        dup_labels.extend_from_slice(&labels.data()[..3]);
        let dup_labels = Tensor::new(vec![3, 3], dup_labels).unwrap();
        let u = difficulty_of(&model, &dup_tokens, &dup_labels).unwrap();
        assert_eq!(u.get(0), u.get(2));
    }

    #[test]
    fn difficulty_matches_manual_cross_entropy() {
        let model = Model::<f64>::new(&tiny_cfg(), true, 7).unwrap();
        let (tokens, labels) = tokens_and_labels(3);

        let p = |name: &str| model.params().by_name(name).unwrap().value.clone();
        let pooled = tokens.mean_axis(1).unwrap();
        let h = pooled.matmul(&p("scorenet.fc1.weight")).unwrap();
        let bias1 = p("scorenet.fc1.bias");
        let mut h = h;
        for row in h.data_mut().chunks_mut(8) {
            for (v, &b) in row.iter_mut().zip(bias1.data()) {
                *v += b;
            }
        }
        let h = h.map(|x| {
            let c = (2.0f64 / std::f64::consts::PI).sqrt();
            0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
        });
        let mut logits = h.matmul(&p("scorenet.fc2.weight")).unwrap();
        let bias2 = p("scorenet.fc2.bias");
        for row in logits.data_mut().chunks_mut(3) {
            for (v, &b) in row.iter_mut().zip(bias2.data()) {
                *v += b;
            }
        }

        let u = difficulty_of(&model, &tokens, &labels).unwrap();
        for i in 0..3 {
            let row = &logits.data()[i * 3..(i + 1) * 3];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            let target_class = i % 3;
            let expect = lse - row[target_class];
            assert!((u.get(i) - expect).abs() < 1e-9, "{} vs {expect}", u.get(i));
        }
    }

    #[test]
    fn uniform_logits_over_many_classes_score_log_c() {
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(Tensor::zeros(vec![1, 100]));
        let mut t = Tensor::<f64>::zeros(vec![1, 100]);
        t.set(&[0, 42], 1.0);
        let ce = g.cross_entropy(logits, &t).unwrap();
        assert!((g.value(ce).first() - 100.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn select_easy_uses_strict_threshold() {
        let u = DifficultyVector::new(vec![0.1f64, 0.3, 0.19, 0.2]);
        let sel = select_easy(&u, 0.2);
        assert_eq!(sel.indices, vec![0, 2]);

        assert!(select_easy(&u, 0.0).is_empty());
        assert_eq!(select_easy(&u, f64::INFINITY).len(), 4);
    }

    #[test]
    fn aux_loss_is_weighted_mean() {
        let mut g = Graph::<f64>::new();
        let ce = g.leaf(Tensor::new(vec![4], vec![0.4, 0.8, 1.2, 1.6]).unwrap());
        let aux = scorenet_aux_loss(&mut g, ce, 0.5).unwrap();
        assert!((g.value(aux).first() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn aux_loss_never_updates_encoder() {
        let cfg = tiny_cfg();
        let model = Model::<f64>::new(&cfg, true, 11).unwrap();
        let images = Tensor::new(
            vec![2, 1, 8, 8],
            (0..128).map(|i| (i as f64 * 0.31).cos() * 0.3).collect(),
        )
        .unwrap();
        let mut labels = Tensor::<f64>::zeros(vec![2, 3]);
        labels.set(&[0, 0], 1.0);
        labels.set(&[1, 2], 1.0);

        let mut g = Graph::new();
        let mut hooks = Hooks::none();
        let pass = model.forward(&mut g, &images, &mut hooks, true).unwrap();
        let tokens = pass.trace.layer_input_nodes[0];
        let (_, ce) = difficulty(&model, &mut g, tokens, &labels, &pass.param_nodes).unwrap();
        let aux = scorenet_aux_loss(&mut g, ce, 1.0).unwrap();
        g.backward(aux).unwrap();

        let mut scorer_grads = 0.0f64;
        for (param, &id) in model.params().iter().zip(&pass.param_nodes) {
            let grad = g.grad(id).unwrap();
            let mass: f64 = grad.data().iter().map(|v| v.abs()).sum();
            if param.name.starts_with("scorenet.") {
                scorer_grads += mass;
            } else {
                assert_eq!(mass, 0.0, "encoder param {} got gradient", param.name);
            }
        }
        assert!(scorer_grads > 0.0, "scorer itself must train");
    }

    #[test]
    fn easy_case_with_rigged_bias() {
        let cfg = tiny_cfg();
        let mut model = Model::<f64>::new(&cfg, true, 13).unwrap();
        for p in model.params_mut().iter_mut() {
            if p.name == "scorenet.fc2.bias" {
                p.value.data_mut()[0] = 50.0;
            }
        }
        let (tokens, _) = tokens_and_labels(4);
        let mut labels = Tensor::<f64>::zeros(vec![4, 3]);
        for i in 0..4 {
            labels.set(&[i, 0], 1.0);
        }
        let u = difficulty_of(&model, &tokens, &labels).unwrap();
        for i in 0..4 {
            assert!(u.get(i) < 1e-6, "rigged scorer should find class 0 easy");
        }
        let sel = select_easy(&u, 0.2);
        assert_eq!(sel.len(), 4);
    }

    #[test]
    fn models_without_scorer_reject_difficulty() {
        let cfg = ModelConfig {
            htm_layer: None,
            ..tiny_cfg()
        };
        let model = Model::<f64>::new(&cfg, false, 2).unwrap();
        let (tokens, labels) = tokens_and_labels(2);
        assert!(difficulty_of(&model, &tokens, &labels).is_err());
    }
}
