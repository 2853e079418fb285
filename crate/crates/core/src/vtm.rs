//! Vertical token mixing: widen one layer's attention with the most salient
//! tokens of every earlier layer.
//!
//! Each earlier layer contributes its own view: that layer's attention map
//! scores the tokens it saw, the top few are pulled from the snapshot taken
//! at its input, and the hooked layer attends over its own sequence plus all
//! pooled tokens. Queries stay untouched, so the output keeps its shape and
//! downstream layers are none the wiser.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Tensor};
use crate::saliency::{attention_rollout, token_saliency};
use crate::scalar::Scalar;
use crate::transformer::ForwardTrace;

/// Layers that feed the pool for a hook at `hook_layer` (1-based): every
/// layer strictly before it.
pub fn previous_layers(hook_layer: usize) -> Result<Vec<usize>> {
    if hook_layer < 2 {
        return Err(Error::config(format!(
            "a pooling hook needs at least one earlier layer, got layer {hook_layer}"
        )));
    }
    Ok((1..hook_layer).collect())
}

/// Most salient tokens of one earlier layer, per batch instance.
#[derive(Clone, Debug)]
pub struct PooledTokens<S> {
    /// 1-based layer the tokens were taken from.
    pub layer: usize,
    /// (batch, kappa, dim) token values, snapshotted at that layer's input.
    pub tokens: Tensor<S>,
    /// Per instance, the ascending token positions that were taken.
    pub indices: Vec<Vec<usize>>,
}

/// Indices of the `k` largest scores, ties won by the lower index, returned
/// ascending.
pub fn select_topk<S: Scalar>(scores: &[S], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::usage(format!(
            "cannot take top {k} of {} scores",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::numeric("scores must be finite"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut picked: Vec<usize> = order.into_iter().take(k).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Pools the top `kappa` tokens of every layer before `hook_layer`, scored
/// by that layer's own attention map.
pub fn pool_previous_layers<S: Scalar>(
    trace: &ForwardTrace<S>,
    hook_layer: usize,
    kappa: usize,
) -> Result<Vec<PooledTokens<S>>> {
    let layers = previous_layers(hook_layer)?;
    let mut pooled = Vec::with_capacity(layers.len());
    for layer in layers {
        let record = trace.record_for(layer).ok_or_else(|| {
            Error::usage(format!("trace has no attention record for layer {layer}"))
        })?;
        let snapshot = trace.layer_inputs.get(layer - 1).ok_or_else(|| {
            Error::usage(format!("trace has no input snapshot for layer {layer}"))
        })?;
        let rollout = attention_rollout(std::slice::from_ref(&record.phi))?;
        let saliency = token_saliency(&rollout)?;
        let b = saliency.batch();
        let n = saliency.tokens();
        if kappa > n {
            return Err(Error::config(format!(
                "cannot pool {kappa} of {n} tokens"
            )));
        }
        let d = snapshot.dims()[2];
        let mut indices = Vec::with_capacity(b);
        let mut data = Vec::with_capacity(b * kappa * d);
        for i in 0..b {
            let picked = select_topk(saliency.row(i), kappa)?;
            for &t in &picked {
                let at = (i * n + t) * d;
                data.extend_from_slice(&snapshot.data()[at..at + d]);
            }
            indices.push(picked);
        }
        pooled.push(PooledTokens {
            layer,
            tokens: Tensor::new(vec![b, kappa, d], data)?,
            indices,
        });
    }
    Ok(pooled)
}

/// Value-level key/value sequence: the layer's own tokens followed by each
/// earlier layer's pooled tokens, in layer order.
pub fn build_extended_tokens<S: Scalar>(
    x: &Tensor<S>,
    pooled: &[PooledTokens<S>],
) -> Result<Tensor<S>> {
    if pooled.is_empty() {
        return Ok(x.clone());
    }
    let mut parts: Vec<&Tensor<S>> = Vec::with_capacity(1 + pooled.len());
    parts.push(x);
    for p in pooled {
        parts.push(&p.tokens);
    }
    Tensor::concat_axis1(&parts)
}

/// Graph node for the extended key/value sequence. With `pooled_grad` off
/// the pooled tokens enter as constants; with it on they are gathered from
/// the recorded layer-input nodes so gradient reaches the earlier layers.
pub fn extended_kv_node<S: Scalar>(
    g: &mut Graph<S>,
    x: NodeId,
    trace: &ForwardTrace<S>,
    pooled: &[PooledTokens<S>],
    pooled_grad: bool,
) -> Result<NodeId> {
    if pooled.is_empty() {
        return Ok(x);
    }
    let mut parts = Vec::with_capacity(1 + pooled.len());
    parts.push(x);
    for p in pooled {
        let node = if pooled_grad {
            let source = *trace.layer_input_nodes.get(p.layer - 1).ok_or_else(|| {
                Error::usage(format!("trace has no input node for layer {}", p.layer))
            })?;
            g.gather_tokens(source, p.indices.clone())?
        } else {
            g.leaf(p.tokens.clone())
        };
        parts.push(node);
    }
    g.concat_tokens(&parts)
}
