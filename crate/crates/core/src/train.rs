//! One training step, end to end: forward with the configured mixing hooks,
//! a combined classification and scorer objective, backprop, SGD.
//!
//! Mixing decisions (which instances, which tokens, which pooled extras) are
//! data-dependent but not differentiated through; [`StepCaptures`] records
//! them so the exact same objective can be rebuilt later with the decisions
//! held fixed, which is what makes finite-difference checks of a full step
//! meaningful.

use std::cell::RefCell;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::htm::{
    plan_token_mixup, random_sample_plan, random_token_plan, MixPlan, MixReport,
};
use crate::numerics::{Graph, NodeId, Sgd, Tensor};
use crate::rng::{stream_rng, Stream};
use crate::saliency::{attention_rollout, token_saliency};
use crate::scalar::Scalar;
use crate::scorenet::{difficulty, scorenet_aux_loss};
use crate::transformer::{Hooks, Model};
use crate::vtm::{extended_kv_node, pool_previous_layers, PooledTokens};

/// Which augmentation path a training step takes.
#[derive(Clone, Debug, PartialEq)]
pub enum MixMode {
    /// Plain supervised steps.
    None,
    /// Difficulty-gated token replacement at the configured layer.
    Htm,
    /// Attention over pooled earlier-layer tokens at the configured layer.
    Vtm,
    /// Both hooks at once.
    HtmVtm,
    /// Ablation: selection by coin flip instead of the difficulty gate.
    RandomSample { expected_k: f64 },
    /// Ablation: random pairs, random tokens, count-weighted labels.
    RandomToken { count: usize },
}

impl MixMode {
    pub fn uses_token_hook(&self) -> bool {
        matches!(
            self,
            MixMode::Htm
                | MixMode::HtmVtm
                | MixMode::RandomSample { .. }
                | MixMode::RandomToken { .. }
        )
    }

    pub fn uses_kv_hook(&self) -> bool {
        matches!(self, MixMode::Vtm | MixMode::HtmVtm)
    }

    pub fn uses_scorenet(&self) -> bool {
        matches!(self, MixMode::Htm | MixMode::HtmVtm)
    }
}

/// The data-dependent decisions of one step, frozen as plain values.
#[derive(Clone, Debug)]
pub struct StepCaptures<S> {
    /// Replacement plan at the token hook, when the mode has one.
    pub mix_plan: Option<MixPlan<S>>,
    /// Pooled earlier-layer tokens at the kv hook, when the mode has one.
    pub pooled: Option<Vec<PooledTokens<S>>>,
    /// Token values the scorer judged, when the mode gates by difficulty.
    pub scorer_tokens: Option<Tensor<S>>,
}

/// A fully built step objective, ready for `backward`.
pub struct StepGraph<S: Scalar> {
    pub graph: Graph<S>,
    pub loss: NodeId,
    pub class_loss: NodeId,
    pub aux_loss: Option<NodeId>,
    pub logits: NodeId,
    pub param_nodes: Vec<NodeId>,
    /// Targets the classification loss was computed against (relabeled rows
    /// included).
    pub labels_used: Tensor<S>,
    pub captures: StepCaptures<S>,
}

impl<S: Scalar> StepGraph<S> {
    pub fn report(&self) -> Option<&MixReport<S>> {
        self.captures.mix_plan.as_ref().map(|p| &p.report)
    }
}

fn check_step_inputs<S: Scalar>(
    model: &Model<S>,
    images: &Tensor<S>,
    labels: &Tensor<S>,
    mode: &MixMode,
) -> Result<()> {
    let cfg = model.cfg();
    if mode.uses_scorenet() && !model.has_scorenet() {
        return Err(Error::usage(
            "difficulty-gated modes need a model built with a scorer",
        ));
    }
    if mode.uses_token_hook() && cfg.htm_layer.is_none() {
        return Err(Error::config("mode mixes tokens but no mixing layer is set"));
    }
    if mode.uses_kv_hook() && cfg.vtm_layer.is_none() {
        return Err(Error::config("mode pools tokens but no pooling layer is set"));
    }
    if images.rank() != 4 {
        return Err(Error::shape(format!(
            "images must be (batch, channels, size, size), got {:?}",
            images.dims()
        )));
    }
    if labels.rank() != 2
        || labels.dims()[0] != images.dims()[0]
        || labels.dims()[1] != cfg.num_classes
    {
        return Err(Error::shape(format!(
            "labels must be ({}, {}), got {:?}",
            images.dims()[0],
            cfg.num_classes,
            labels.dims()
        )));
    }
    Ok(())
}

/// Builds the whole objective for one batch. With `frozen` the recorded
/// decisions are replayed instead of recomputed, so the returned loss is the
/// same function of the parameters that the original step differentiated.
pub fn build_step_graph<S: Scalar>(
    model: &Model<S>,
    images: &Tensor<S>,
    labels: &Tensor<S>,
    mode: &MixMode,
    rng: &mut ChaCha8Rng,
    frozen: Option<&StepCaptures<S>>,
) -> Result<StepGraph<S>> {
    check_step_inputs(model, images, labels, mode)?;
    let cfg = model.cfg();

    let mut g = Graph::new();
    let plan_cell: RefCell<Option<MixPlan<S>>> = RefCell::new(None);
    let pooled_cell: RefCell<Option<Vec<PooledTokens<S>>>> = RefCell::new(None);
    let scorer_cell: RefCell<Option<Tensor<S>>> = RefCell::new(None);
    let aux_cell: RefCell<Option<NodeId>> = RefCell::new(None);

    let mut hooks = Hooks::none();
    if mode.uses_token_hook() {
        let layer = cfg.htm_layer.expect("checked above");
        let rng = &mut *rng;
        let plan_cell = &plan_cell;
        let scorer_cell = &scorer_cell;
        let aux_cell = &aux_cell;
        hooks.on_tokens(layer, move |g, x, trace| {
            let x_val = g.value(x).clone();

            let u = if mode.uses_scorenet() {
                let scorer_tokens = match frozen {
                    Some(c) => c
                        .scorer_tokens
                        .clone()
                        .ok_or_else(|| Error::usage("frozen step lacks scorer tokens"))?,
                    None => x_val.clone(),
                };
                let scorer_node = match frozen {
                    Some(_) => g.leaf(scorer_tokens.clone()),
                    None => x,
                };
                *scorer_cell.borrow_mut() = Some(scorer_tokens);
                let (u, ce) = difficulty(model, g, scorer_node, labels, &trace.param_nodes)?;
                *aux_cell.borrow_mut() = Some(ce);
                Some(u)
            } else {
                None
            };

            let plan: MixPlan<S> = match frozen {
                Some(c) => c
                    .mix_plan
                    .clone()
                    .ok_or_else(|| Error::usage("frozen step lacks a mix plan"))?,
                None => match mode {
                    MixMode::Htm | MixMode::HtmVtm => {
                        let phis = model.eval_attention_records(&x_val, layer, cfg.ell)?;
                        let s = token_saliency(&attention_rollout(&phis)?)?;
                        plan_token_mixup(
                            labels,
                            &s,
                            u.as_ref().expect("scorer ran for this mode"),
                            S::cast(cfg.tau),
                            S::cast(cfg.rho),
                        )?
                    }
                    MixMode::RandomSample { expected_k } => {
                        let phis = model.eval_attention_records(&x_val, layer, cfg.ell)?;
                        let s = token_saliency(&attention_rollout(&phis)?)?;
                        random_sample_plan(labels, &s, S::cast(cfg.rho), *expected_k, rng)?
                    }
                    MixMode::RandomToken { count } => {
                        random_token_plan(labels, cfg.n_tokens(), *count, rng)?
                    }
                    _ => unreachable!("hook only installed for token-mixing modes"),
                },
            };

            let out = if plan.is_noop() {
                x
            } else {
                let d = g.dims(x)[2];
                let keep = plan.expanded_keep_mask(d)?;
                let mut inv = keep.clone();
                for v in inv.data_mut() {
                    *v = S::one() - *v;
                }
                let keep_node = g.leaf(keep);
                let inv_node = g.leaf(inv);
                let own = g.mul(x, keep_node)?;
                let src = g.gather_rows(x, plan.source_index.clone())?;
                let moved = g.mul(src, inv_node)?;
                g.add(own, moved)?
            };
            *plan_cell.borrow_mut() = Some(plan);
            Ok(out)
        });
    }
    if mode.uses_kv_hook() {
        let layer = cfg.vtm_layer.expect("checked above");
        let pooled_cell = &pooled_cell;
        hooks.on_kv(layer, move |g, x, trace| {
            let pooled = match frozen {
                Some(c) => c
                    .pooled
                    .clone()
                    .ok_or_else(|| Error::usage("frozen step lacks pooled tokens"))?,
                None => pool_previous_layers(trace, layer, cfg.kappa)?,
            };
            let node = extended_kv_node(g, x, trace, &pooled, cfg.vtm_pooled_grad)?;
            *pooled_cell.borrow_mut() = Some(pooled);
            Ok(Some(node))
        });
    }

    let pass = model.forward(&mut g, images, &mut hooks, true)?;
    drop(hooks);

    let plan = plan_cell.into_inner();
    let labels_used = match &plan {
        Some(p) => p.labels.clone(),
        None => labels.clone(),
    };
    let ce = g.cross_entropy(pass.logits, &labels_used)?;
    let class_loss = g.mean_all(ce);
    let (loss, aux_loss) = match aux_cell.into_inner() {
        Some(scorer_ce) => {
            let aux = scorenet_aux_loss(&mut g, scorer_ce, S::cast(cfg.score_loss_weight))?;
            (g.add(class_loss, aux)?, Some(aux))
        }
        None => (class_loss, None),
    };

    Ok(StepGraph {
        graph: g,
        loss,
        class_loss,
        aux_loss,
        logits: pass.logits,
        param_nodes: pass.param_nodes,
        labels_used,
        captures: StepCaptures {
            mix_plan: plan,
            pooled: pooled_cell.into_inner(),
            scorer_tokens: scorer_cell.into_inner(),
        },
    })
}

/// Row-wise argmax agreement between logits and targets, ties to the lower
/// index on both sides.
pub fn accuracy_of<S: Scalar>(logits: &Tensor<S>, labels: &Tensor<S>) -> f64 {
    let b = logits.dims()[0];
    let hits = (0..b)
        .filter(|&i| argmax_row(logits, i) == argmax_row(labels, i))
        .count();
    hits as f64 / b as f64
}

fn argmax_row<S: Scalar>(t: &Tensor<S>, row: usize) -> usize {
    let c = t.dims()[1];
    let data = &t.data()[row * c..(row + 1) * c];
    let mut best = 0;
    for (k, &v) in data.iter().enumerate() {
        if v > data[best] {
            best = k;
        }
    }
    best
}

/// Everything a metrics row wants to know about one step.
#[derive(Clone, Debug)]
pub struct StepMetrics {
    pub loss: f64,
    pub class_loss: f64,
    pub scorenet_loss: f64,
    pub accuracy: f64,
    pub num_mixed: usize,
    pub mean_tokens_replaced: f64,
    pub realized_gain: f64,
}

/// Owns the model, the optimizer and the mixing policy for a run.
pub struct Trainer<S: Scalar> {
    model: Model<S>,
    opt: Sgd<S>,
    mode: MixMode,
    mixup_rng: ChaCha8Rng,
    mix_invocations: usize,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(model: Model<S>, opt: Sgd<S>, mode: MixMode, seed: u64) -> Result<Self> {
        let cfg = model.cfg();
        if mode.uses_scorenet() && !model.has_scorenet() {
            return Err(Error::usage(
                "difficulty-gated modes need a model built with a scorer",
            ));
        }
        if mode.uses_token_hook() && cfg.htm_layer.is_none() {
            return Err(Error::config("mode mixes tokens but no mixing layer is set"));
        }
        if mode.uses_kv_hook() && cfg.vtm_layer.is_none() {
            return Err(Error::config("mode pools tokens but no pooling layer is set"));
        }
        if let MixMode::RandomToken { count } = mode {
            if count > cfg.n_tokens() {
                return Err(Error::config(format!(
                    "cannot replace {count} of {} tokens",
                    cfg.n_tokens()
                )));
            }
        }
        Ok(Trainer {
            model,
            opt,
            mode,
            mixup_rng: stream_rng(seed, Stream::Mixup),
            mix_invocations: 0,
        })
    }

    /// How many steps so far ran a mixing hook (token replacement or
    /// key/value pooling), regardless of whether anything changed.
    pub fn mix_invocations(&self) -> usize {
        self.mix_invocations
    }

    pub fn model(&self) -> &Model<S> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model<S> {
        &mut self.model
    }

    pub fn mode(&self) -> &MixMode {
        &self.mode
    }

    /// One optimization step on a batch. Accuracy is measured against the
    /// batch's original labels even when rows were relabeled.
    pub fn train_step(&mut self, images: &Tensor<S>, labels: &Tensor<S>) -> Result<StepMetrics> {
        let mut step = build_step_graph(
            &self.model,
            images,
            labels,
            &self.mode,
            &mut self.mixup_rng,
            None,
        )?;
        if step.captures.mix_plan.is_some() || step.captures.pooled.is_some() {
            self.mix_invocations += 1;
        }
        step.graph.backward(step.loss)?;
        self.model
            .params_mut()
            .pull_grads(&step.graph, &step.param_nodes)?;
        self.opt.step(self.model.params_mut())?;

        let scorenet_loss = step
            .aux_loss
            .map(|n| step.graph.value(n).first().as_f64())
            .unwrap_or(0.0);
        let (num_mixed, mean_tokens_replaced, realized_gain) = match step.report() {
            Some(r) => (r.num_mixed, r.mean_tokens_replaced(), r.realized_gain.as_f64()),
            None => (0, 0.0, 0.0),
        };
        Ok(StepMetrics {
            loss: step.graph.value(step.loss).first().as_f64(),
            class_loss: step.graph.value(step.class_loss).first().as_f64(),
            scorenet_loss,
            accuracy: accuracy_of(step.graph.value(step.logits), labels),
            num_mixed,
            mean_tokens_replaced,
            realized_gain,
        })
    }

    /// Frozen loss and accuracy on held-out data, no hooks, no updates.
    pub fn evaluate(&self, images: &Tensor<S>, labels: &Tensor<S>) -> Result<(f64, f64)> {
        evaluate_model(&self.model, images, labels)
    }
}

/// Frozen loss and accuracy of a model on a labeled batch.
pub fn evaluate_model<S: Scalar>(
    model: &Model<S>,
    images: &Tensor<S>,
    labels: &Tensor<S>,
) -> Result<(f64, f64)> {
    check_step_inputs(model, images, labels, &MixMode::None)?;
    let mut g = Graph::new();
    let mut hooks = Hooks::none();
    let pass = model.forward(&mut g, images, &mut hooks, false)?;
    let ce = g.cross_entropy(pass.logits, labels)?;
    let loss = g.mean_all(ce);
    Ok((
        g.value(loss).first().as_f64(),
        accuracy_of(g.value(pass.logits), labels),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::ModelConfig;
    use rand::Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            in_channels: 2,
            depth: 2,
            heads: 2,
            dim: 8,
            mlp_ratio: 2.0,
            num_classes: 3,
            htm_layer: Some(1),
            vtm_layer: Some(2),
            tau: 0.2,
            rho: 0.005,
            kappa: 2,
            ell: 0,
            score_loss_weight: 1.0,
            vtm_pooled_grad: false,
        }
    }

    fn batch(cfg: &ModelConfig, b: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
        let mut rng = stream_rng(seed, Stream::Data);
        let len = b * cfg.in_channels * cfg.image_size * cfg.image_size;
        let images = Tensor::new(
            vec![b, cfg.in_channels, cfg.image_size, cfg.image_size],
            (0..len).map(|_| rng.random::<f32>()).collect(),
        )
        .unwrap();
        let mut labels = Tensor::zeros(vec![b, cfg.num_classes]);
        for i in 0..b {
            let k = rng.random_range(0..cfg.num_classes);
            labels.set(&[i, k], 1.0);
        }
        (images, labels)
    }

    fn trainer(cfg: &ModelConfig, mode: MixMode, seed: u64) -> Trainer<f32> {
        let model = Model::new(cfg, mode.uses_scorenet(), seed).unwrap();
        Trainer::new(model, Sgd::new(0.05, 0.9), mode, seed).unwrap()
    }

    #[test]
    fn baseline_steps_reduce_loss_on_a_fixed_batch() {
        let cfg = small_cfg();
        let mut t = trainer(&cfg, MixMode::None, 21);
        let (images, labels) = batch(&cfg, 4, 22);
        let first = t.train_step(&images, &labels).unwrap();
        let mut last = first.clone();
        for _ in 0..30 {
            last = t.train_step(&images, &labels).unwrap();
        }
        assert!(last.loss < first.loss);
        assert_eq!(first.num_mixed, 0);
        assert_eq!(first.scorenet_loss, 0.0);
    }

    #[test]
    fn every_mode_takes_a_step() {
        let cfg = small_cfg();
        let (images, labels) = batch(&cfg, 4, 23);
        for mode in [
            MixMode::None,
            MixMode::Htm,
            MixMode::Vtm,
            MixMode::HtmVtm,
            MixMode::RandomSample { expected_k: 2.0 },
            MixMode::RandomToken { count: 2 },
        ] {
            let mut t = trainer(&cfg, mode.clone(), 31);
            let m = t.train_step(&images, &labels).unwrap();
            assert!(m.loss.is_finite(), "{mode:?}");
            if mode.uses_scorenet() {
                assert!(m.scorenet_loss > 0.0, "{mode:?}");
            }
            if mode == (MixMode::RandomToken { count: 2 }) {
                assert_eq!(m.num_mixed, 4);
                assert!((m.mean_tokens_replaced - 2.0).abs() < 1e-12);
                assert_eq!(m.realized_gain, 0.0);
            }
        }
    }

    #[test]
    fn zero_threshold_mixes_nothing_and_matches_baseline_encoder_updates() {
        let cfg = ModelConfig {
            tau: 0.0,
            ..small_cfg()
        };
        let (images, labels) = batch(&cfg, 4, 25);

        let mut gated = trainer(&cfg, MixMode::Htm, 41);
        let gated_metrics = gated.train_step(&images, &labels).unwrap();
        assert_eq!(gated_metrics.num_mixed, 0);

        let baseline_model = Model::<f32>::new(&cfg, false, 41).unwrap();
        let mut baseline = Trainer::new(baseline_model, Sgd::new(0.05, 0.9), MixMode::None, 41)
            .unwrap();
        let baseline_metrics = baseline.train_step(&images, &labels).unwrap();

        assert_eq!(gated_metrics.class_loss, baseline_metrics.class_loss);
        for p in baseline.model().params().iter() {
            let q = gated.model().params().by_name(&p.name).unwrap();
            assert_eq!(p.value, q.value, "{}", p.name);
        }
    }

    #[test]
    fn frozen_rebuild_reproduces_the_loss_bitwise() {
        let cfg = small_cfg();
        let (images, labels) = batch(&cfg, 4, 27);
        for mode in [MixMode::Htm, MixMode::Vtm, MixMode::HtmVtm] {
            let model = Model::<f32>::new(&cfg, true, 51).unwrap();
            let mut rng = stream_rng(51, Stream::Mixup);
            let live = build_step_graph(&model, &images, &labels, &mode, &mut rng, None).unwrap();
            let mut rng2 = stream_rng(99, Stream::Mixup);
            let replay = build_step_graph(
                &model,
                &images,
                &labels,
                &mode,
                &mut rng2,
                Some(&live.captures),
            )
            .unwrap();
            assert_eq!(
                live.graph.value(live.loss),
                replay.graph.value(replay.loss),
                "{mode:?}"
            );
            assert_eq!(live.labels_used, replay.labels_used, "{mode:?}");
        }
    }

    #[test]
    fn relabeled_rows_feed_the_loss() {
        let cfg = ModelConfig {
            tau: f64::INFINITY,
            rho: 0.0,
            ..small_cfg()
        };
        let model = Model::<f32>::new(&cfg, true, 61).unwrap();
        let (images, labels) = batch(&cfg, 4, 28);
        let mut rng = stream_rng(61, Stream::Mixup);
        let step =
            build_step_graph(&model, &images, &labels, &MixMode::Htm, &mut rng, None).unwrap();
        let plan = step.captures.mix_plan.as_ref().unwrap();
        assert!(plan.report.num_mixed > 0);
        assert_eq!(step.labels_used, plan.labels);
        assert_ne!(step.labels_used, labels);
    }

    #[test]
    fn mode_prerequisites_are_validated() {
        let cfg = small_cfg();
        let no_scorer = Model::<f32>::new(&cfg, false, 71).unwrap();
        assert!(Trainer::new(no_scorer, Sgd::new(0.1, 0.0), MixMode::Htm, 71).is_err());

        let bare = ModelConfig {
            htm_layer: None,
            vtm_layer: None,
            ..small_cfg()
        };
        let model = Model::<f32>::new(&bare, true, 72).unwrap();
        assert!(Trainer::new(model, Sgd::new(0.1, 0.0), MixMode::Vtm, 72).is_err());

        let model = Model::<f32>::new(&cfg, false, 73).unwrap();
        assert!(
            Trainer::new(model, Sgd::new(0.1, 0.0), MixMode::RandomToken { count: 99 }, 73)
                .is_err()
        );
    }

    #[test]
    fn evaluation_is_hook_free_and_deterministic() {
        let cfg = small_cfg();
        let t = trainer(&cfg, MixMode::HtmVtm, 81);
        let (images, labels) = batch(&cfg, 6, 29);
        let (loss_a, acc_a) = t.evaluate(&images, &labels).unwrap();
        let (loss_b, acc_b) = t.evaluate(&images, &labels).unwrap();
        assert_eq!(loss_a, loss_b);
        assert_eq!(acc_a, acc_b);
        assert!((0.0..=1.0).contains(&acc_a));
    }

    #[test]
    fn accuracy_counts_argmax_agreement() {
        let logits = Tensor::new(vec![2, 3], vec![2.0f64, 1.0, 0.0, 0.0, 1.0, 2.0]).unwrap();
        let labels = Tensor::new(vec![2, 3], vec![1.0f64, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(accuracy_of(&logits, &labels), 0.5);
    }
}
