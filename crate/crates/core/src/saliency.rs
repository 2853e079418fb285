//! Token saliency: how much attention flows into each token.
//!
//! The cheap detector multiplies a window of recorded attention maps
//! (attention rollout) and reads column means: column `t` of the combined
//! map says how much every query position draws from token `t`. The
//! expensive detector backpropagates the loss and scores tokens by gradient
//! norm; it exists as a baseline to quantify what the attention shortcut
//! saves.

use crate::error::{Error, Result};
use crate::numerics::graph::Graph;
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;
use crate::transformer::{Hooks, Model};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SaliencySource {
    AttentionRollout,
    Gradient,
    Random,
}

/// Per-instance token scores, dims [b, n], each row non-negative and
/// summing to one (up to the arithmetic of its source).
#[derive(Clone, Debug)]
pub struct SaliencyMap<S> {
    scores: Tensor<S>,
    source: SaliencySource,
}

impl<S: Scalar> SaliencyMap<S> {
    /// Wraps raw scores, normalizing each row to sum to one. Rows with
    /// (near) zero mass become uniform.
    pub fn from_scores(mut scores: Tensor<S>, source: SaliencySource) -> Result<Self> {
        if scores.rank() != 2 {
            return Err(Error::shape(format!(
                "saliency scores must be [b, n], got {:?}",
                scores.dims()
            )));
        }
        if !scores.all_finite() {
            return Err(Error::numeric("saliency scores must be finite"));
        }
        let n = scores.dims()[1];
        let tiny = S::cast(1e-12);
        let uniform = S::one() / S::cast(n as f64);
        for row in scores.data_mut().chunks_mut(n) {
            let sum = row.iter().fold(S::zero(), |a, &v| a + v);
            if sum < tiny {
                for v in row.iter_mut() {
                    *v = uniform;
                }
            } else {
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
        }
        Ok(SaliencyMap { scores, source })
    }

    fn from_normalized(scores: Tensor<S>, source: SaliencySource) -> Self {
        SaliencyMap { scores, source }
    }

    pub fn scores(&self) -> &Tensor<S> {
        &self.scores
    }

    pub fn source(&self) -> SaliencySource {
        self.source
    }

    pub fn batch(&self) -> usize {
        self.scores.dims()[0]
    }

    pub fn tokens(&self) -> usize {
        self.scores.dims()[1]
    }

    pub fn row(&self, i: usize) -> &[S] {
        let n = self.tokens();
        &self.scores.data()[i * n..(i + 1) * n]
    }
}

/// Multiplies head-averaged attention maps in the given order. Maps must be
/// square and share dims [b, n, n]; a single map is returned unchanged.
pub fn attention_rollout<S: Scalar>(phis: &[Tensor<S>]) -> Result<Tensor<S>> {
    let first = phis
        .first()
        .ok_or_else(|| Error::usage("attention_rollout needs at least one map"))?;
    let dims = first.dims();
    if dims.len() != 3 || dims[1] != dims[2] {
        return Err(Error::shape(format!(
            "rollout maps must be square [b, n, n], got {dims:?}"
        )));
    }
    for phi in &phis[1..] {
        if phi.dims() != dims {
            return Err(Error::shape(format!(
                "rollout maps disagree: {:?} vs {dims:?}",
                phi.dims()
            )));
        }
    }
    let mut acc = first.clone();
    for phi in &phis[1..] {
        acc = acc.matmul(phi)?;
    }
    Ok(acc)
}

/// Column means of a combined attention map: the saliency of token `t` is
/// the average attention it receives across query positions.
pub fn token_saliency<S: Scalar>(rollout: &Tensor<S>) -> Result<SaliencyMap<S>> {
    let dims = rollout.dims();
    if dims.len() != 3 {
        return Err(Error::shape(format!(
            "token_saliency expects [b, n_q, n_kv], got {dims:?}"
        )));
    }
    let (b, nq, nkv) = (dims[0], dims[1], dims[2]);
    let mut scores = vec![S::zero(); b * nkv];
    let inv = S::one() / S::cast(nq as f64);
    for i in 0..b {
        for t in 0..nkv {
            let mut acc = S::zero();
            for q in 0..nq {
                acc += rollout.data()[(i * nq + q) * nkv + t];
            }
            scores[i * nkv + t] = acc * inv;
        }
    }
    Ok(SaliencyMap::from_normalized(
        Tensor::new(vec![b, nkv], scores)?,
        SaliencySource::AttentionRollout,
    ))
}

/// Loss-gradient saliency at the input of `layer` (1-based): per-token L2
/// norm of d(mean CE)/d(token), row-normalized. Runs a full forward and
/// backward; this is the expensive detector.
pub fn gradient_saliency<S: Scalar>(
    model: &Model<S>,
    images: &Tensor<S>,
    labels: &Tensor<S>,
    layer: usize,
) -> Result<SaliencyMap<S>> {
    if layer == 0 || layer > model.cfg().depth {
        return Err(Error::usage(format!(
            "gradient_saliency layer {layer} outside 1..={}",
            model.cfg().depth
        )));
    }
    let mut g = Graph::new();
    let mut hooks = Hooks::none();
    let pass = model.forward(&mut g, images, &mut hooks, true)?;
    let ce = g.cross_entropy(pass.logits, labels)?;
    let loss = g.mean_all(ce);
    g.backward(loss)?;
    let node = pass.trace.layer_input_nodes[layer - 1];
    let grads = g
        .grad(node)
        .ok_or_else(|| Error::usage("layer input carries no gradient"))?;
    Ok(saliency_from_token_grads(grads)?)
}

/// Per-token L2 norms of a [b, n, d] gradient tensor, row-normalized.
pub fn saliency_from_token_grads<S: Scalar>(grads: &Tensor<S>) -> Result<SaliencyMap<S>> {
    let dims = grads.dims();
    if dims.len() != 3 {
        return Err(Error::shape(format!(
            "token gradients must be [b, n, d], got {dims:?}"
        )));
    }
    let (b, n, d) = (dims[0], dims[1], dims[2]);
    let mut norms = vec![S::zero(); b * n];
    for i in 0..b {
        for t in 0..n {
            let base = (i * n + t) * d;
            let mut acc = S::zero();
            for j in 0..d {
                let v = grads.data()[base + j];
                acc += v * v;
            }
            norms[i * n + t] = acc.sqrt();
        }
    }
    SaliencyMap::from_scores(Tensor::new(vec![b, n], norms)?, SaliencySource::Gradient)
}

/// Uniformly random scores, row-normalized. A control for ablations.
pub fn random_saliency<S: Scalar>(b: usize, n: usize, rng: &mut impl Rng) -> SaliencyMap<S> {
    let data: Vec<S> = (0..b * n).map(|_| S::cast(rng.random::<f64>())).collect();
    SaliencyMap::from_scores(
        Tensor::new(vec![b, n], data).expect("consistent dims"),
        SaliencySource::Random,
    )
    .expect("random scores are finite")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TvNorm {
    L1,
    L2,
}

/// Total variation of one instance's saliency row, interpreted as its
/// square token grid. Forward differences; boundary terms are skipped.
pub fn total_variation<S: Scalar>(row: &[S], norm: TvNorm) -> Result<S> {
    let n = row.len();
    let h = (n as f64).sqrt().round() as usize;
    if h * h != n || n == 0 {
        return Err(Error::usage(format!(
            "total_variation needs a square token grid, got {n} tokens"
        )));
    }
    let at = |y: usize, x: usize| row[y * h + x];
    let mut acc = S::zero();
    for y in 0..h {
        for x in 0..h {
            let dv = if y + 1 < h {
                at(y + 1, x) - at(y, x)
            } else {
                S::zero()
            };
            let dh = if x + 1 < h {
                at(y, x + 1) - at(y, x)
            } else {
                S::zero()
            };
            match norm {
                TvNorm::L1 => acc += dv.abs() + dh.abs(),
                TvNorm::L2 => acc += (dv * dv + dh * dh).sqrt(),
            }
        }
    }
    Ok(acc)
}

/// Per-instance population variance of the n token scores.
pub fn saliency_variance<S: Scalar>(map: &SaliencyMap<S>) -> Vec<S> {
    let n = map.tokens();
    let inv = S::one() / S::cast(n as f64);
    (0..map.batch())
        .map(|i| {
            let row = map.row(i);
            let mean = row.iter().fold(S::zero(), |a, &v| a + v) * inv;
            row.iter()
                .fold(S::zero(), |a, &v| a + (v - mean) * (v - mean))
                * inv
        })
        .collect()
}
