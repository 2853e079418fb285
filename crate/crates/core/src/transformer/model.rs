//! A compact pre-norm transformer encoder over image patches.
//!
//! The encoder is deliberately small: patch projection with a learnable
//! positional embedding, `depth` residual blocks (multi-head attention and a
//! GELU MLP, both pre-norm), and attention-weighted sequence pooling into a
//! linear classifier instead of a class token.
//!
//! Two hook points make token-level augmentation pluggable without touching
//! the encoder itself. A *token hook* rewrites the token tensor entering its
//! layer; a *kv hook* swaps in an alternative key/value set for that layer's
//! attention while queries stay on the token stream. Every forward records a
//! [`ForwardTrace`]: per-layer input snapshots and head-averaged attention
//! maps, which is exactly what saliency computations consume.

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::optim::ParamStore;
use crate::numerics::tensor::Tensor;
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;
use crate::transformer::config::ModelConfig;
use rand::Rng;
use rand_distr::{Distribution, Normal};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Head-averaged attention weights of one layer: dims [b, n_q, n_kv], rows
/// summing to one.
#[derive(Clone, Debug)]
pub struct AttentionRecord<S> {
    pub layer: usize,
    pub phi: Tensor<S>,
}

/// What a forward pass leaves behind for saliency and mixing decisions.
///
/// `layer_inputs[k-1]` is the token tensor entering layer `k`, snapshotted
/// before any hook at that layer ran; `layer_input_nodes` holds the matching
/// graph nodes so gradients with respect to those tokens stay reachable.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace<S: Scalar> {
    pub tokenized: Option<Tensor<S>>,
    pub layer_inputs: Vec<Tensor<S>>,
    pub layer_input_nodes: Vec<NodeId>,
    pub records: Vec<AttentionRecord<S>>,
    /// Graph nodes of the model parameters, index-aligned with the store,
    /// so hooks can run parameter-bearing subgraphs of their own.
    pub param_nodes: Vec<NodeId>,
}

impl<S: Scalar> ForwardTrace<S> {
    pub fn record_for(&self, layer: usize) -> Option<&AttentionRecord<S>> {
        self.records.iter().find(|r| r.layer == layer)
    }
}

pub type TokenHook<'a, S> =
    Box<dyn FnMut(&mut Graph<S>, NodeId, &ForwardTrace<S>) -> Result<NodeId> + 'a>;
pub type KvHook<'a, S> =
    Box<dyn FnMut(&mut Graph<S>, NodeId, &ForwardTrace<S>) -> Result<Option<NodeId>> + 'a>;

/// Layer-addressed hook registry for one forward pass.
#[derive(Default)]
pub struct Hooks<'a, S: Scalar> {
    token: Vec<(usize, TokenHook<'a, S>)>,
    kv: Vec<(usize, KvHook<'a, S>)>,
}

impl<'a, S: Scalar> Hooks<'a, S> {
    pub fn none() -> Self {
        Hooks {
            token: Vec::new(),
            kv: Vec::new(),
        }
    }

    /// Rewrites the tokens entering `layer` (1-based).
    pub fn on_tokens(
        &mut self,
        layer: usize,
        hook: impl FnMut(&mut Graph<S>, NodeId, &ForwardTrace<S>) -> Result<NodeId> + 'a,
    ) {
        self.token.push((layer, Box::new(hook)));
    }

    /// Supplies an alternative key/value token set for `layer`'s attention.
    /// Returning `None` keeps self-attention.
    pub fn on_kv(
        &mut self,
        layer: usize,
        hook: impl FnMut(&mut Graph<S>, NodeId, &ForwardTrace<S>) -> Result<Option<NodeId>> + 'a,
    ) {
        self.kv.push((layer, Box::new(hook)));
    }
}

pub struct ForwardPass<S: Scalar> {
    pub logits: NodeId,
    pub trace: ForwardTrace<S>,
    /// Graph leaves of the parameters, index-aligned with the store.
    pub param_nodes: Vec<NodeId>,
}

#[derive(Clone, Debug)]
struct LayerIdx {
    ln1_gamma: usize,
    ln1_beta: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_gamma: usize,
    ln2_beta: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct ScoreNetIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    patch_weight: usize,
    patch_bias: usize,
    pos_embed: usize,
    layers: Vec<LayerIdx>,
    pool_weight: usize,
    head_weight: usize,
    head_bias: usize,
    scorenet: Option<ScoreNetIdx>,
}

#[derive(Clone)]
pub struct Model<S: Scalar> {
    cfg: ModelConfig,
    params: ParamStore<S>,
    layout: Layout,
}

impl<S: Scalar> Model<S> {
    /// Initializes a model from the given seed. ScoreNet parameters are
    /// created last, so encoders with and without one share their weight
    /// initialization for the same seed.
    pub fn new(cfg: &ModelConfig, with_scorenet: bool, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(seed, Stream::Init);
        let (d, n, c) = (cfg.dim, cfg.n_tokens(), cfg.num_classes);
        let hidden = cfg.hidden_dim();
        let mut params = ParamStore::new();

        let patch_weight = params.add(
            "patch.weight",
            trunc_normal_tensor(&mut rng, vec![cfg.patch_dim(), d]),
        )?;
        let patch_bias = params.add("patch.bias", Tensor::zeros(vec![d]))?;
        let pos_embed = params.add("pos_embed", normal_tensor(&mut rng, vec![n, d]))?;

        let mut layers = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let p = |suffix: &str| format!("layer.{i}.{suffix}");
            layers.push(LayerIdx {
                ln1_gamma: params.add(p("ln1.gamma"), Tensor::filled(vec![d], S::one()))?,
                ln1_beta: params.add(p("ln1.beta"), Tensor::zeros(vec![d]))?,
                wq: params.add(p("attn.wq"), trunc_normal_tensor(&mut rng, vec![d, d]))?,
                bq: params.add(p("attn.bq"), Tensor::zeros(vec![d]))?,
                wk: params.add(p("attn.wk"), trunc_normal_tensor(&mut rng, vec![d, d]))?,
                bk: params.add(p("attn.bk"), Tensor::zeros(vec![d]))?,
                wv: params.add(p("attn.wv"), trunc_normal_tensor(&mut rng, vec![d, d]))?,
                bv: params.add(p("attn.bv"), Tensor::zeros(vec![d]))?,
                wo: params.add(p("attn.wo"), trunc_normal_tensor(&mut rng, vec![d, d]))?,
                bo: params.add(p("attn.bo"), Tensor::zeros(vec![d]))?,
                ln2_gamma: params.add(p("ln2.gamma"), Tensor::filled(vec![d], S::one()))?,
                ln2_beta: params.add(p("ln2.beta"), Tensor::zeros(vec![d]))?,
                w1: params.add(p("mlp.w1"), trunc_normal_tensor(&mut rng, vec![d, hidden]))?,
                b1: params.add(p("mlp.b1"), Tensor::zeros(vec![hidden]))?,
                w2: params.add(p("mlp.w2"), trunc_normal_tensor(&mut rng, vec![hidden, d]))?,
                b2: params.add(p("mlp.b2"), Tensor::zeros(vec![d]))?,
            });
        }

        let pool_weight = params.add("pool.weight", trunc_normal_tensor(&mut rng, vec![d, 1]))?;
        let head_weight = params.add("head.weight", trunc_normal_tensor(&mut rng, vec![d, c]))?;
        let head_bias = params.add("head.bias", Tensor::zeros(vec![c]))?;

        let scorenet = if with_scorenet {
            Some(ScoreNetIdx {
                w1: params.add("scorenet.fc1.weight", trunc_normal_tensor(&mut rng, vec![d, d]))?,
                b1: params.add("scorenet.fc1.bias", Tensor::zeros(vec![d]))?,
                w2: params.add("scorenet.fc2.weight", trunc_normal_tensor(&mut rng, vec![d, c]))?,
                b2: params.add("scorenet.fc2.bias", Tensor::zeros(vec![c]))?,
            })
        } else {
            None
        };

        Ok(Model {
            cfg: cfg.clone(),
            params,
            layout: Layout {
                patch_weight,
                patch_bias,
                pos_embed,
                layers,
                pool_weight,
                head_weight,
                head_bias,
                scorenet,
            },
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn has_scorenet(&self) -> bool {
        self.layout.scorenet.is_some()
    }

    /// Runs the encoder, applying hooks at their layers, and returns logits
    /// plus the forward trace. With `trainable` set, parameters enter the
    /// graph as differentiable leaves.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        images: &Tensor<S>,
        hooks: &mut Hooks<'_, S>,
        trainable: bool,
    ) -> Result<ForwardPass<S>> {
        let patches = extract_patches(images, &self.cfg)?;
        let ids = self.params.enter(g, trainable);
        let mut trace = ForwardTrace::default();
        trace.param_nodes = ids.clone();

        let patch_leaf = g.leaf(patches);
        let proj = g.matmul(patch_leaf, ids[self.layout.patch_weight])?;
        let biased = g.add_bcast(proj, ids[self.layout.patch_bias])?;
        let mut x = g.add_bcast(biased, ids[self.layout.pos_embed])?;
        trace.tokenized = Some(g.value(x).clone());

        let (b, n, d) = {
            let dims = g.dims(x);
            (dims[0], dims[1], dims[2])
        };

        for layer in 1..=self.cfg.depth {
            trace.layer_inputs.push(g.value(x).clone());
            trace.layer_input_nodes.push(x);

            for (at, hook) in hooks.token.iter_mut() {
                if *at == layer {
                    x = hook(g, x, &trace)?;
                    if g.dims(x) != [b, n, d] {
                        return Err(Error::shape(format!(
                            "token hook at layer {layer} returned dims {:?}, expected [{b}, {n}, {d}]",
                            g.dims(x)
                        )));
                    }
                }
            }

            let mut kv = None;
            for (at, hook) in hooks.kv.iter_mut() {
                if *at == layer {
                    if let Some(ext) = hook(g, x, &trace)? {
                        let dims = g.dims(ext);
                        if dims.len() != 3 || dims[0] != b || dims[2] != d {
                            return Err(Error::shape(format!(
                                "kv hook at layer {layer} returned dims {dims:?}, expected [{b}, *, {d}]"
                            )));
                        }
                        kv = Some(ext);
                    }
                }
            }

            let (next, phi) = self.block(g, x, kv, layer, &ids)?;
            x = next;
            trace.records.push(AttentionRecord { layer, phi });
        }

        let logits = self.sequence_pool_classify(g, x, &ids)?;
        Ok(ForwardPass {
            logits,
            trace,
            param_nodes: ids,
        })
    }

    /// Frozen forward with no hooks; returns logits values and the trace.
    pub fn infer(&self, images: &Tensor<S>) -> Result<(Tensor<S>, ForwardTrace<S>)> {
        let mut g = Graph::new();
        let mut hooks = Hooks::none();
        let pass = self.forward(&mut g, images, &mut hooks, false)?;
        Ok((g.value(pass.logits).clone(), pass.trace))
    }

    /// One residual block: pre-norm attention, then pre-norm MLP.
    fn block(
        &self,
        g: &mut Graph<S>,
        x: NodeId,
        kv: Option<NodeId>,
        layer: usize,
        ids: &[NodeId],
    ) -> Result<(NodeId, Tensor<S>)> {
        let lp = &self.layout.layers[layer - 1];
        let h = g.layer_norm(x, ids[lp.ln1_gamma], ids[lp.ln1_beta], S::cast(LN_EPS))?;
        let kvh = match kv {
            Some(ext) => g.layer_norm(ext, ids[lp.ln1_gamma], ids[lp.ln1_beta], S::cast(LN_EPS))?,
            None => h,
        };
        let (attn_out, phi) = self.attention(g, h, kvh, layer, ids)?;
        let x = g.add(x, attn_out)?;

        let h2 = g.layer_norm(x, ids[lp.ln2_gamma], ids[lp.ln2_beta], S::cast(LN_EPS))?;
        let m = g.matmul(h2, ids[lp.w1])?;
        let m = g.add_bcast(m, ids[lp.b1])?;
        let m = g.gelu(m);
        let m = g.matmul(m, ids[lp.w2])?;
        let m = g.add_bcast(m, ids[lp.b2])?;
        let x = g.add(x, m)?;
        Ok((x, phi))
    }

    /// Multi-head attention with queries from `q_in` and keys/values from
    /// `kv_in`. Returns the output tokens and the detached head-averaged
    /// attention map.
    pub fn attention(
        &self,
        g: &mut Graph<S>,
        q_in: NodeId,
        kv_in: NodeId,
        layer: usize,
        ids: &[NodeId],
    ) -> Result<(NodeId, Tensor<S>)> {
        if layer == 0 || layer > self.cfg.depth {
            return Err(Error::usage(format!(
                "attention layer {layer} outside 1..={}",
                self.cfg.depth
            )));
        }
        let lp = &self.layout.layers[layer - 1];
        let (heads, dh) = (self.cfg.heads, self.cfg.head_dim());
        let qd = g.dims(q_in).to_vec();
        let kd = g.dims(kv_in).to_vec();
        if qd.len() != 3 || kd.len() != 3 || qd[0] != kd[0] || qd[2] != kd[2] {
            return Err(Error::shape(format!(
                "attention expects [b, *, d] inputs with shared b and d, got {qd:?} and {kd:?}"
            )));
        }
        let (b, nq, m) = (qd[0], qd[1], kd[1]);

        let q = g.matmul(q_in, ids[lp.wq])?;
        let q = g.add_bcast(q, ids[lp.bq])?;
        let k = g.matmul(kv_in, ids[lp.wk])?;
        let k = g.add_bcast(k, ids[lp.bk])?;
        let v = g.matmul(kv_in, ids[lp.wv])?;
        let v = g.add_bcast(v, ids[lp.bv])?;

        let qh = g.reshape(q, vec![b, nq, heads, dh])?;
        let qh = g.permute(qh, &[0, 2, 1, 3])?;
        let kh = g.reshape(k, vec![b, m, heads, dh])?;
        let kh = g.permute(kh, &[0, 2, 3, 1])?;
        let vh = g.reshape(v, vec![b, m, heads, dh])?;
        let vh = g.permute(vh, &[0, 2, 1, 3])?;

        let scores = g.matmul(qh, kh)?;
        let scores = g.scale(scores, S::cast(1.0 / (dh as f64).sqrt()));
        let attn = g.softmax_rows(scores)?;
        let phi = g.value(attn).mean_axis(1)?;

        let ctx = g.matmul(attn, vh)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, vec![b, nq, heads * dh])?;
        let out = g.matmul(ctx, ids[lp.wo])?;
        let out = g.add_bcast(out, ids[lp.bo])?;
        Ok((out, phi))
    }

    /// Attention-weighted pooling over tokens followed by the linear head.
    pub fn sequence_pool_classify(
        &self,
        g: &mut Graph<S>,
        x: NodeId,
        ids: &[NodeId],
    ) -> Result<NodeId> {
        let dims = g.dims(x).to_vec();
        if dims.len() != 3 {
            return Err(Error::shape(format!(
                "sequence pooling expects [b, n, d], got {dims:?}"
            )));
        }
        let (b, n, d) = (dims[0], dims[1], dims[2]);
        let scores = g.matmul(x, ids[self.layout.pool_weight])?;
        let scores = g.reshape(scores, vec![b, n])?;
        let weights = g.softmax_rows(scores)?;
        let weights = g.reshape(weights, vec![b, 1, n])?;
        let pooled = g.matmul(weights, x)?;
        let pooled = g.reshape(pooled, vec![b, d])?;
        let logits = g.matmul(pooled, ids[self.layout.head_weight])?;
        g.add_bcast(logits, ids[self.layout.head_bias])
    }

    /// Difficulty scorer: mean-pooled tokens through a two-layer MLP. The
    /// input is gradient-stopped, so this head never trains the encoder.
    pub fn scorenet_logits(&self, g: &mut Graph<S>, tokens: NodeId, ids: &[NodeId]) -> Result<NodeId> {
        let sn = self.layout.scorenet.as_ref().ok_or_else(|| {
            Error::usage("this model was built without a ScoreNet")
        })?;
        let dims = g.dims(tokens).to_vec();
        if dims.len() != 3 {
            return Err(Error::shape(format!(
                "scorenet expects [b, n, d] tokens, got {dims:?}"
            )));
        }
        let frozen = g.stop_gradient(tokens);
        let pooled = g.mean_axis(frozen, 1)?;
        let h = g.matmul(pooled, ids[sn.w1])?;
        let h = g.add_bcast(h, ids[sn.b1])?;
        let h = g.gelu(h);
        let out = g.matmul(h, ids[sn.w2])?;
        g.add_bcast(out, ids[sn.b2])
    }

    /// Head-averaged attention maps of layers `layer..=layer+ell`, evaluated
    /// on the given token values with frozen parameters and no hooks. This
    /// is the saliency view of a hook layer: maps are computed on the tokens
    /// as they arrive, before any mixing.
    pub fn eval_attention_records(
        &self,
        tokens: &Tensor<S>,
        layer: usize,
        ell: usize,
    ) -> Result<Vec<Tensor<S>>> {
        if layer == 0 || layer + ell > self.cfg.depth {
            return Err(Error::usage(format!(
                "rollout window {layer}..={} outside 1..={}",
                layer + ell,
                self.cfg.depth
            )));
        }
        let mut g = Graph::new();
        let ids = self.params.enter(&mut g, false);
        let mut x = g.leaf(tokens.clone());
        let mut phis = Vec::with_capacity(ell + 1);
        for l in layer..=layer + ell {
            let (next, phi) = self.block(&mut g, x, None, l, &ids)?;
            phis.push(phi);
            x = next;
        }
        Ok(phis)
    }
}

/// Splits [b, ch, s, s] images into non-overlapping patches, flattened as
/// [b, n, ch * p * p] with the patch grid in row-major order.
pub fn extract_patches<S: Scalar>(images: &Tensor<S>, cfg: &ModelConfig) -> Result<Tensor<S>> {
    let dims = images.dims();
    if dims.len() != 4 || dims[1] != cfg.in_channels || dims[2] != cfg.image_size || dims[3] != cfg.image_size
    {
        return Err(Error::shape(format!(
            "expected images [b, {}, {}, {}], got {dims:?}",
            cfg.in_channels, cfg.image_size, cfg.image_size
        )));
    }
    let (b, ch, s, p) = (dims[0], cfg.in_channels, cfg.image_size, cfg.patch_size);
    let side = s / p;
    let n = side * side;
    let pd = cfg.patch_dim();
    let mut data = Vec::with_capacity(b * n * pd);
    for i in 0..b {
        for py in 0..side {
            for px in 0..side {
                for c in 0..ch {
                    for dy in 0..p {
                        for dx in 0..p {
                            data.push(images.get(&[i, c, py * p + dy, px * p + dx]));
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, n, pd], data)
}

fn trunc_normal_tensor<S: Scalar>(rng: &mut impl Rng, dims: Vec<usize>) -> Tensor<S> {
    let normal = Normal::new(0.0f64, INIT_STD).expect("valid normal");
    let len = dims.iter().product();
    let mut data = Vec::with_capacity(len);
    while data.len() < len {
        let v = normal.sample(rng);
        if v.abs() <= 2.0 * INIT_STD {
            data.push(S::cast(v));
        }
    }
    Tensor::new(dims, data).expect("consistent dims")
}

fn normal_tensor<S: Scalar>(rng: &mut impl Rng, dims: Vec<usize>) -> Tensor<S> {
    let normal = Normal::new(0.0f64, INIT_STD).expect("valid normal");
    let len = dims.iter().product();
    let data = (0..len).map(|_| S::cast(normal.sample(rng))).collect();
    Tensor::new(dims, data).expect("consistent dims")
}
