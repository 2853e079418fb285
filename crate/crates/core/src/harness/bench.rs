//! Wall-clock comparison of the two saliency detectors at the same hook
//! point: attention rollout versus a full gradient pass. Both timings cover
//! only the detector itself; the forward pass they share is set up once,
//! untimed.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::data::generate_synthetic_dataset;
use crate::numerics::Graph;
use crate::saliency::{attention_rollout, saliency_from_token_grads, token_saliency};
use crate::transformer::{Hooks, Model};

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub attention_ms: f64,
    pub gradient_ms: f64,
    pub ratio: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times both detectors on one batch and reports medians over `repeats`
/// runs, first run of each excluded as warmup.
pub fn benchmark_saliency(cfg: &RunConfig, repeats: usize) -> Result<BenchReport> {
    if repeats < 10 {
        return Err(Error::usage(format!(
            "need at least 10 repeats for stable medians, got {repeats}"
        )));
    }
    cfg.model.validate()?;
    let layer = cfg.model.htm_layer.unwrap_or(1);
    if layer + cfg.model.ell > cfg.model.depth {
        return Err(Error::usage(format!(
            "rollout window {layer}..={} outside the model's {} layers",
            layer + cfg.model.ell,
            cfg.model.depth
        )));
    }

    let (train, _) = generate_synthetic_dataset::<f32>(&cfg.dataset, cfg.seed)?;
    let batch: Vec<usize> = (0..cfg.batch_size.min(train.len())).collect();
    let (images, labels) = train.batch(&batch)?;
    let model = Model::<f32>::new(&cfg.model, false, cfg.seed)?;

    // attention detector: rollout + column means over recorded maps
    let (_, trace) = model.infer(&images)?;
    let window: Vec<_> = (layer..=layer + cfg.model.ell)
        .map(|l| {
            trace
                .record_for(l)
                .map(|r| r.phi.clone())
                .ok_or_else(|| Error::usage(format!("no attention record for layer {l}")))
        })
        .collect::<Result<_>>()?;
    let run_attention = || -> Result<()> {
        let rollout = attention_rollout(&window)?;
        token_saliency(&rollout)?;
        Ok(())
    };

    // gradient detector: backprop to the hook layer's tokens + norms
    let mut g = Graph::<f32>::new();
    let mut hooks = Hooks::none();
    let pass = model.forward(&mut g, &images, &mut hooks, true)?;
    let ce = g.cross_entropy(pass.logits, &labels)?;
    let loss = g.mean_all(ce);
    let token_node = pass.trace.layer_input_nodes[layer - 1];
    let mut run_gradient = || -> Result<()> {
        g.backward(loss)?;
        let grads = g
            .grad(token_node)
            .ok_or_else(|| Error::usage("hook layer tokens receive no gradient"))?
            .clone();
        saliency_from_token_grads(&grads)?;
        Ok(())
    };

    run_attention()?;
    run_gradient()?;

    let mut attention_times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        run_attention()?;
        attention_times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mut gradient_times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        run_gradient()?;
        gradient_times.push(t.elapsed().as_secs_f64() * 1e3);
    }

    let attention_ms = median(attention_times);
    let gradient_ms = median(gradient_times);
    let ratio = if attention_ms > 0.0 {
        gradient_ms / attention_ms
    } else {
        f64::INFINITY
    };
    Ok(BenchReport {
        attention_ms,
        gradient_ms,
        ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::RunConfig;
    use crate::transformer::ModelConfig;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig {
            image_size: 8,
            patch_size: 4,
            in_channels: 1,
            depth: 2,
            heads: 2,
            dim: 8,
            num_classes: 4,
            htm_layer: Some(1),
            vtm_layer: Some(2),
            kappa: 2,
            ..ModelConfig::default()
        };
        cfg.dataset.image_size = 8;
        cfg.dataset.samples_per_class = 8;
        cfg.batch_size = 8;
        cfg
    }

    #[test]
    fn too_few_repeats_is_an_error() {
        assert!(benchmark_saliency(&tiny(), 9).is_err());
    }

    #[test]
    fn report_is_positive_and_consistent() {
        let report = benchmark_saliency(&tiny(), 10).unwrap();
        assert!(report.attention_ms >= 0.0);
        assert!(report.gradient_ms > 0.0);
        if report.attention_ms > 0.0 {
            assert!(
                (report.ratio - report.gradient_ms / report.attention_ms).abs() < 1e-9
            );
        }
    }

    #[test]
    fn median_splits_even_and_odd_runs() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
