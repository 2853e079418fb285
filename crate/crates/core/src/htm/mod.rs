//! Horizontal token mixing: replace the weakest tokens of easy instances
//! with salient tokens from optimally matched batch partners, then shift the
//! labels toward the source in proportion to the transplanted saliency.
//!
//! The pipeline is split into a pure planning stage (saliency in, [`MixPlan`]
//! out) and an application stage, so the trainer can re-apply a plan inside
//! an autodiff graph while tests can exercise each rule on plain values.

pub mod assignment;

pub use assignment::{brute_force_match, hungarian_match, GainMatrix, MatchPlan};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::saliency::SaliencyMap;
use crate::scalar::Scalar;
use crate::scorenet::{select_easy, DifficultyVector, EasySelection};

const RELABEL_MIN_MASS: f64 = 1e-12;

/// Aggregate counters for one mixing invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct MixReport<S> {
    /// Instances that actually had at least one token replaced.
    pub num_mixed: usize,
    /// Per selected instance: its batch index and how many tokens it took.
    pub tokens_replaced: Vec<(usize, usize)>,
    /// Objective value of the assignment that produced this plan.
    pub realized_gain: S,
}

impl<S: Scalar> MixReport<S> {
    fn empty() -> Self {
        MixReport {
            num_mixed: 0,
            tokens_replaced: Vec::new(),
            realized_gain: S::zero(),
        }
    }

    /// Mean replaced-token count over instances that mixed.
    pub fn mean_tokens_replaced(&self) -> f64 {
        if self.num_mixed == 0 {
            return 0.0;
        }
        let total: usize = self.tokens_replaced.iter().map(|&(_, c)| c).sum();
        total as f64 / self.num_mixed as f64
    }
}

/// Everything needed to turn a token batch into its mixed counterpart:
/// which instances mix, from whom, which tokens survive, and the labels the
/// mixed batch should be trained against.
#[derive(Clone, Debug)]
pub struct MixPlan<S> {
    pub selection: EasySelection,
    pub assignment: MatchPlan<S>,
    /// (batch, tokens); 1 keeps the instance's own token, 0 takes the
    /// source's. Rows that do not mix are all ones.
    pub keep_mask: Tensor<S>,
    /// Per instance, the batch index tokens are taken from; `i` when
    /// instance `i` is untouched.
    pub source_index: Vec<usize>,
    /// (batch, classes) training targets for the mixed batch.
    pub labels: Tensor<S>,
    pub report: MixReport<S>,
}

impl<S: Scalar> MixPlan<S> {
    fn noop(y: &Tensor<S>, batch: usize, tokens: usize) -> Self {
        MixPlan {
            selection: EasySelection::default(),
            assignment: MatchPlan {
                pairs: Vec::new(),
                realized_gain: S::zero(),
            },
            keep_mask: Tensor::filled(vec![batch, tokens], S::one()),
            source_index: (0..batch).collect(),
            labels: y.clone(),
            report: MixReport::empty(),
        }
    }

    pub fn is_noop(&self) -> bool {
        self.report.num_mixed == 0
    }

    /// Keep mask broadcast across the feature dimension, as (batch, tokens,
    /// dim), for elementwise blending inside a graph.
    pub fn expanded_keep_mask(&self, dim: usize) -> Result<Tensor<S>> {
        if dim == 0 {
            return Err(Error::usage("feature dimension must be positive"));
        }
        let (b, n) = (self.keep_mask.dims()[0], self.keep_mask.dims()[1]);
        let mut data = Vec::with_capacity(b * n * dim);
        for &m in self.keep_mask.data() {
            data.extend(std::iter::repeat(m).take(dim));
        }
        Tensor::new(vec![b, n, dim], data)
    }
}

/// Gain matrix for a selection: entry (k, j) sums, over tokens, how much
/// saliency instance `selection[k]` would gain by taking token t from batch
/// column j, counting only tokens whose advantage clears `rho`.
pub fn pairwise_gain<S: Scalar>(
    s: &SaliencyMap<S>,
    selection: &EasySelection,
    rho: S,
) -> Result<GainMatrix<S>> {
    if !(rho >= S::zero()) || !rho.is_finite() {
        return Err(Error::config(format!(
            "replacement margin must be finite and non-negative, got {rho}"
        )));
    }
    let b = s.batch();
    let n = s.tokens();
    let mut rows = Vec::with_capacity(selection.len());
    for &i in &selection.indices {
        if i >= b {
            return Err(Error::usage(format!(
                "selected instance {i} outside batch of {b}"
            )));
        }
        let easy = s.row(i);
        let mut row = Vec::with_capacity(b);
        for j in 0..b {
            let src = s.row(j);
            let mut total = S::zero();
            for t in 0..n {
                let advantage = src[t] - easy[t] - rho;
                if advantage > S::zero() {
                    total += advantage;
                }
            }
            row.push(total);
        }
        rows.push(row);
    }
    GainMatrix::with_easy_indices(rows, selection.indices.clone())
}

/// Token survival for one pair: an easy token is kept unless the source
/// token is more salient by strictly more than `rho`.
pub fn mix_mask<S: Scalar>(s_easy: &[S], s_src: &[S], rho: S) -> Vec<bool> {
    s_easy
        .iter()
        .zip(s_src)
        .map(|(&e, &s)| !(s - e > rho))
        .collect()
}

/// Mixed label for one pair: a convex combination weighted by the saliency
/// mass that stayed versus the mass that arrived. Degenerate mass (all of it
/// vanishing) falls back to the easy label unchanged.
pub fn relabel<S: Scalar>(
    y_easy: &[S],
    y_src: &[S],
    s_easy: &[S],
    s_src: &[S],
    keep: &[bool],
) -> Vec<S> {
    if keep.iter().all(|&k| k) {
        return y_easy.to_vec();
    }
    let mut kept_mass = S::zero();
    let mut moved_mass = S::zero();
    for t in 0..keep.len() {
        if keep[t] {
            kept_mass += s_easy[t];
        } else {
            moved_mass += s_src[t];
        }
    }
    let denom = kept_mass + moved_mass;
    if denom < S::cast(RELABEL_MIN_MASS) {
        return y_easy.to_vec();
    }
    let w_keep = kept_mass / denom;
    let w_src = S::one() - w_keep;
    y_easy
        .iter()
        .zip(y_src)
        .map(|(&e, &s)| w_keep * e + w_src * s)
        .collect()
}

fn check_labels<S: Scalar>(y: &Tensor<S>, batch: usize) -> Result<()> {
    if y.rank() != 2 || y.dims()[0] != batch {
        return Err(Error::shape(format!(
            "labels must be (batch, classes) with batch {batch}, got {:?}",
            y.dims()
        )));
    }
    Ok(())
}

/// Builds the full plan for a gated selection against a saliency map.
fn plan_from_selection<S: Scalar>(
    y: &Tensor<S>,
    s: &SaliencyMap<S>,
    selection: EasySelection,
    rho: S,
) -> Result<MixPlan<S>> {
    let b = s.batch();
    let n = s.tokens();
    check_labels(y, b)?;
    if selection.is_empty() {
        return Ok(MixPlan::noop(y, b, n));
    }
    let gain = pairwise_gain(s, &selection, rho)?;
    let assignment = hungarian_match(&gain)?;

    let c = y.dims()[1];
    let mut keep_mask = Tensor::filled(vec![b, n], S::one());
    let mut source_index: Vec<usize> = (0..b).collect();
    let mut labels = y.clone();
    let mut tokens_replaced = Vec::with_capacity(assignment.pairs.len());
    let mut num_mixed = 0;
    for &(i, j) in &assignment.pairs {
        let keep = mix_mask(s.row(i), s.row(j), rho);
        let count = keep.iter().filter(|&&k| !k).count();
        tokens_replaced.push((i, count));
        if count == 0 {
            continue;
        }
        num_mixed += 1;
        source_index[i] = j;
        for (t, &k) in keep.iter().enumerate() {
            if !k {
                keep_mask.set(&[i, t], S::zero());
            }
        }
        let y_easy = &y.data()[i * c..(i + 1) * c];
        let y_src = &y.data()[j * c..(j + 1) * c];
        let mixed = relabel(y_easy, y_src, s.row(i), s.row(j), &keep);
        for (k, v) in mixed.into_iter().enumerate() {
            labels.set(&[i, k], v);
        }
    }
    let realized_gain = assignment.realized_gain;
    Ok(MixPlan {
        selection,
        assignment,
        keep_mask,
        source_index,
        labels,
        report: MixReport {
            num_mixed,
            tokens_replaced,
            realized_gain,
        },
    })
}

/// Plans a mixing round: gate by difficulty, match optimally, derive masks
/// and labels. Pure bookkeeping, no tokens touched yet.
pub fn plan_token_mixup<S: Scalar>(
    y: &Tensor<S>,
    s: &SaliencyMap<S>,
    u: &DifficultyVector<S>,
    tau: S,
    rho: S,
) -> Result<MixPlan<S>> {
    if u.len() != s.batch() {
        return Err(Error::shape(format!(
            "{} difficulty values for batch of {}",
            u.len(),
            s.batch()
        )));
    }
    if tau.is_nan() || tau < S::zero() {
        return Err(Error::config(format!(
            "difficulty threshold must be non-negative, got {tau}"
        )));
    }
    plan_from_selection(y, s, select_easy(u, tau), rho)
}

/// Applies a plan to a token batch (batch, tokens, dim). Untouched rows are
/// copied bit for bit; mixed rows take masked-out tokens from their source.
pub fn apply_mix_plan<S: Scalar>(x: &Tensor<S>, plan: &MixPlan<S>) -> Result<Tensor<S>> {
    let (b, n) = (plan.keep_mask.dims()[0], plan.keep_mask.dims()[1]);
    if x.rank() != 3 || x.dims()[0] != b || x.dims()[1] != n {
        return Err(Error::shape(format!(
            "token batch {:?} does not match plan for ({b}, {n})",
            x.dims()
        )));
    }
    let d = x.dims()[2];
    let mut out = x.clone();
    for &(i, _) in &plan.assignment.pairs {
        let j = plan.source_index[i];
        if j == i {
            continue;
        }
        for t in 0..n {
            if plan.keep_mask.get(&[i, t]) == S::zero() {
                let src = (j * n + t) * d;
                let dst = (i * n + t) * d;
                out.data_mut()[dst..dst + d].copy_from_slice(&x.data()[src..src + d]);
            }
        }
    }
    Ok(out)
}

/// One-call mixing round on plain values.
pub fn token_mixup<S: Scalar>(
    x: &Tensor<S>,
    y: &Tensor<S>,
    s: &SaliencyMap<S>,
    u: &DifficultyVector<S>,
    tau: S,
    rho: S,
) -> Result<(Tensor<S>, Tensor<S>, MixPlan<S>)> {
    let plan = plan_token_mixup(y, s, u, tau, rho)?;
    let mixed = apply_mix_plan(x, &plan)?;
    let labels = plan.labels.clone();
    Ok((mixed, labels, plan))
}

/// Ablation: skip the difficulty gate and instead select each instance with
/// probability `expected_k / batch`. Matching, masks and labels then follow
/// the standard pipeline.
pub fn random_sample_plan<S: Scalar>(
    y: &Tensor<S>,
    s: &SaliencyMap<S>,
    rho: S,
    expected_k: f64,
    rng: &mut impl Rng,
) -> Result<MixPlan<S>> {
    if !expected_k.is_finite() || expected_k < 0.0 {
        return Err(Error::config(format!(
            "expected selection size must be finite and non-negative, got {expected_k}"
        )));
    }
    let b = s.batch();
    let p = (expected_k / b as f64).clamp(0.0, 1.0);
    let indices = (0..b).filter(|_| rng.random::<f64>() < p).collect();
    plan_from_selection(y, s, EasySelection { indices }, rho)
}

/// Ablation: pair every instance with a random partner and replace a fixed
/// number of uniformly chosen tokens; labels blend by token count alone.
pub fn random_token_plan<S: Scalar>(
    y: &Tensor<S>,
    tokens: usize,
    per_pair_count: usize,
    rng: &mut impl Rng,
) -> Result<MixPlan<S>> {
    if y.rank() != 2 {
        return Err(Error::shape(format!(
            "labels must be (batch, classes), got {:?}",
            y.dims()
        )));
    }
    let b = y.dims()[0];
    let c = y.dims()[1];
    if per_pair_count > tokens {
        return Err(Error::usage(format!(
            "cannot replace {per_pair_count} of {tokens} tokens"
        )));
    }
    if per_pair_count == 0 {
        return Ok(MixPlan::noop(y, b, tokens));
    }
    let mut sources: Vec<usize> = (0..b).collect();
    sources.shuffle(rng);

    let w_keep = S::cast((tokens - per_pair_count) as f64 / tokens as f64);
    let w_src = S::one() - w_keep;
    let mut keep_mask = Tensor::filled(vec![b, tokens], S::one());
    let mut labels = y.clone();
    let mut pairs = Vec::with_capacity(b);
    let mut tokens_replaced = Vec::with_capacity(b);
    for i in 0..b {
        let j = sources[i];
        pairs.push((i, j));
        tokens_replaced.push((i, per_pair_count));
        let mut picked: Vec<usize> =
            rand::seq::index::sample(rng, tokens, per_pair_count).into_vec();
        picked.sort_unstable();
        for t in picked {
            keep_mask.set(&[i, t], S::zero());
        }
        for k in 0..c {
            let e = y.get(&[i, k]);
            let s = y.get(&[j, k]);
            labels.set(&[i, k], w_keep * e + w_src * s);
        }
    }
    Ok(MixPlan {
        selection: EasySelection {
            indices: (0..b).collect(),
        },
        assignment: MatchPlan {
            pairs,
            realized_gain: S::zero(),
        },
        keep_mask,
        source_index: sources,
        labels,
        report: MixReport {
            num_mixed: b,
            tokens_replaced,
            realized_gain: S::zero(),
        },
    })
}
