//! Optimal easy-to-source pairing.
//!
//! Rows of a [`GainMatrix`] are the instances picked for mixing, columns the
//! whole batch; entry (i, j) is the saliency mass row i would gain by taking
//! tokens from column j. [`hungarian_match`] finds the assignment with
//! maximum total gain in O(n^3); [`brute_force_match`] checks every
//! injective assignment and exists as the oracle for small batches.
//!
//! Both work on the same fixed-point quantization of the gains (comparisons
//! on i64, no float summation-order traps) and both resolve ties toward the
//! lexicographically smallest assignment vector, so their results agree
//! exactly, ties included.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const QUANT_BITS: u32 = 40;

/// Non-negative gains, rows = selected instances, columns = batch.
#[derive(Clone, Debug)]
pub struct GainMatrix<S> {
    rows: usize,
    cols: usize,
    values: Vec<S>,
    easy_indices: Vec<usize>,
}

impl<S: Scalar> GainMatrix<S> {
    /// Builds from nested rows; row k represents batch instance k.
    pub fn new(rows: Vec<Vec<S>>) -> Result<Self> {
        let easy = (0..rows.len()).collect();
        Self::with_easy_indices(rows, easy)
    }

    /// Builds from nested rows, with row k representing `easy_indices[k]`.
    pub fn with_easy_indices(rows: Vec<Vec<S>>, easy_indices: Vec<usize>) -> Result<Self> {
        let r = rows.len();
        if r == 0 {
            return Ok(GainMatrix {
                rows: 0,
                cols: 0,
                values: Vec::new(),
                easy_indices: Vec::new(),
            });
        }
        let c = rows[0].len();
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("gain matrix rows must have equal lengths"));
        }
        if r > c {
            return Err(Error::usage(format!(
                "more selected instances ({r}) than batch columns ({c})"
            )));
        }
        if easy_indices.len() != r {
            return Err(Error::usage(format!(
                "{} easy indices for {r} rows",
                easy_indices.len()
            )));
        }
        let mut seen = vec![false; c];
        for &i in &easy_indices {
            if i >= c || std::mem::replace(&mut seen[i], true) {
                return Err(Error::usage(format!("invalid or repeated easy index {i}")));
            }
        }
        let mut values = Vec::with_capacity(r * c);
        for row in &rows {
            for &v in row {
                if !v.is_finite() || v < S::zero() {
                    return Err(Error::numeric(format!(
                        "gain entries must be finite and non-negative, got {v}"
                    )));
                }
                values.push(v);
            }
        }
        Ok(GainMatrix {
            rows: r,
            cols: c,
            values,
            easy_indices,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> S {
        self.values[row * self.cols + col]
    }

    pub fn easy_indices(&self) -> &[usize] {
        &self.easy_indices
    }

    fn quantized(&self) -> Vec<i64> {
        let mut max_abs = 0.0f64;
        for &v in &self.values {
            max_abs = max_abs.max(v.as_f64().abs());
        }
        let mut scale = (1i64) << QUANT_BITS;
        if max_abs > 0.0 {
            let budget = (i64::MAX / 4) as f64 / (max_abs * (self.cols as f64 + 1.0));
            while (scale as f64) > budget && scale > 1 {
                scale >>= 1;
            }
        }
        self.values
            .iter()
            .map(|v| (v.as_f64() * scale as f64).round() as i64)
            .collect()
    }
}

/// Maximum-gain pairing. `pairs[k]` maps the k-th selected instance (its
/// batch index) to its source's batch index; `realized_gain` is the summed
/// float gain along those pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchPlan<S> {
    pub pairs: Vec<(usize, usize)>,
    pub realized_gain: S,
}

impl<S: Scalar> MatchPlan<S> {
    fn empty() -> Self {
        MatchPlan {
            pairs: Vec::new(),
            realized_gain: S::zero(),
        }
    }

    /// Assignment as row -> column, in row order.
    pub fn columns(&self) -> Vec<usize> {
        self.pairs.iter().map(|&(_, j)| j).collect()
    }
}

struct JvSolution {
    u: Vec<i64>,
    v: Vec<i64>,
    total: i64,
}

/// Square minimum-cost assignment via shortest augmenting paths with
/// potentials. Exact on integer costs.
fn jv_min(n: usize, cost: &impl Fn(usize, usize) -> i64) -> JvSolution {
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![usize::MAX; n];
    for j in 1..=n {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    let total = (0..n).map(|i| cost(i, row_to_col[i])).sum();
    JvSolution { u, v, total }
}

/// Optimal assignment, deterministic under ties: among the maximizing
/// assignments it returns the one whose column vector (in row order) is
/// lexicographically smallest.
pub fn hungarian_match<S: Scalar>(gain: &GainMatrix<S>) -> Result<MatchPlan<S>> {
    if gain.rows() == 0 {
        return Ok(MatchPlan::empty());
    }
    let (r, n) = (gain.rows(), gain.cols());
    let q = gain.quantized();
    // pad to square with zero rows; minimize negated gains
    let cost = |i: usize, j: usize| -> i64 {
        if i < r {
            -q[i * n + j]
        } else {
            0
        }
    };
    let base = jv_min(n, &cost);

    // lock in real rows one by one, always taking the smallest column that
    // still completes to the optimal total
    let mut used = vec![false; n];
    let mut fixed: Vec<usize> = Vec::with_capacity(r);
    let mut remaining_total = base.total;
    for i in 0..r {
        let candidates: Vec<usize> = (0..n)
            .filter(|&j| !used[j] && cost(i, j) - base.u[i + 1] - base.v[j + 1] == 0)
            .collect();
        debug_assert!(!candidates.is_empty(), "an optimal edge always exists");
        let mut chosen = None;
        if candidates.len() == 1 {
            chosen = Some(candidates[0]);
        } else {
            for &j in &candidates {
                let free_cols: Vec<usize> =
                    (0..n).filter(|&c| !used[c] && c != j).collect();
                let sub_rows: Vec<usize> = (i + 1..n).collect();
                let m = sub_rows.len();
                let sub_total = if m == 0 {
                    0
                } else {
                    let sub_cost =
                        |a: usize, b: usize| -> i64 { cost(sub_rows[a], free_cols[b]) };
                    jv_min(m, &sub_cost).total
                };
                if cost(i, j) + sub_total == remaining_total {
                    chosen = Some(j);
                    break;
                }
            }
        }
        let j = chosen.expect("one candidate must complete optimally");
        used[j] = true;
        remaining_total -= cost(i, j);
        fixed.push(j);
    }

    let realized_gain = fixed
        .iter()
        .enumerate()
        .fold(S::zero(), |acc, (i, &j)| acc + gain.get(i, j));
    let pairs = gain
        .easy_indices()
        .iter()
        .zip(&fixed)
        .map(|(&e, &j)| (e, j))
        .collect();
    Ok(MatchPlan {
        pairs,
        realized_gain,
    })
}

/// Exhaustive oracle over every injective assignment, limited to small
/// batches. Same quantization and tie-break as [`hungarian_match`].
pub fn brute_force_match<S: Scalar>(gain: &GainMatrix<S>) -> Result<MatchPlan<S>> {
    if gain.rows() == 0 {
        return Ok(MatchPlan::empty());
    }
    let (r, n) = (gain.rows(), gain.cols());
    if n > 8 {
        return Err(Error::usage(format!(
            "brute force is capped at 8 columns, got {n}"
        )));
    }
    let q = gain.quantized();

    let mut best: Option<(i64, Vec<usize>)> = None;
    let mut current = Vec::with_capacity(r);
    let mut used = vec![false; n];
    // depth-first in ascending column order: the first assignment reaching a
    // given total is the lexicographically smallest with that total
    fn dfs(
        row: usize,
        r: usize,
        n: usize,
        q: &[i64],
        used: &mut [bool],
        current: &mut Vec<usize>,
        total: i64,
        best: &mut Option<(i64, Vec<usize>)>,
    ) {
        if row == r {
            let better = match best {
                None => true,
                Some((bt, _)) => total > *bt,
            };
            if better {
                *best = Some((total, current.clone()));
            }
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                current.push(j);
                dfs(row + 1, r, n, q, used, current, total + q[row * n + j], best);
                current.pop();
                used[j] = false;
            }
        }
    }
    dfs(0, r, n, &q, &mut used, &mut current, 0, &mut best);

    let (_, cols) = best.expect("at least one assignment exists");
    let realized_gain = cols
        .iter()
        .enumerate()
        .fold(S::zero(), |acc, (i, &j)| acc + gain.get(i, j));
    let pairs = gain
        .easy_indices()
        .iter()
        .zip(&cols)
        .map(|(&e, &j)| (e, j))
        .collect();
    Ok(MatchPlan {
        pairs,
        realized_gain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use rand::Rng;

    #[test]
    fn cross_pairing_beats_identity() {
        let gain = GainMatrix::new(vec![vec![0.0f64, 5.0], vec![5.0, 0.0]]).unwrap();
        let plan = hungarian_match(&gain).unwrap();
        assert_eq!(plan.columns(), vec![1, 0]);
        assert!((plan.realized_gain - 10.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_dominance_keeps_identity() {
        let gain = GainMatrix::new(vec![vec![9.0f64, 1.0], vec![1.0, 9.0]]).unwrap();
        let plan = hungarian_match(&gain).unwrap();
        assert_eq!(plan.columns(), vec![0, 1]);
        assert!((plan.realized_gain - 18.0).abs() < 1e-12);
    }

    #[test]
    fn single_row_takes_argmax() {
        let gain = GainMatrix::new(vec![vec![0.1f64, 0.9, 0.4]]).unwrap();
        let plan = hungarian_match(&gain).unwrap();
        assert_eq!(plan.columns(), vec![1]);
    }

    #[test]
    fn ties_resolve_lexicographically() {
        let zero = GainMatrix::new(vec![vec![0.0f64; 3]; 3]).unwrap();
        let plan = hungarian_match(&zero).unwrap();
        assert_eq!(plan.columns(), vec![0, 1, 2]);
        assert_eq!(plan.realized_gain, 0.0);

        let tied = GainMatrix::new(vec![vec![1.0f64, 1.0], vec![0.0, 0.0]]).unwrap();
        let plan = hungarian_match(&tied).unwrap();
        assert_eq!(plan.columns(), vec![0, 1]);

        let brute = brute_force_match(&tied).unwrap();
        assert_eq!(plan, brute);
    }

    #[test]
    fn rectangular_rows_map_to_batch_indices() {
        let gain = GainMatrix::with_easy_indices(
            vec![vec![0.0f64, 0.2, 0.7, 0.1], vec![0.6, 0.0, 0.1, 0.2]],
            vec![1, 3],
        )
        .unwrap();
        let plan = hungarian_match(&gain).unwrap();
        assert_eq!(plan.pairs, vec![(1, 2), (3, 0)]);
        assert!((plan.realized_gain - 1.3).abs() < 1e-12);
    }

    #[test]
    fn empty_selection_yields_empty_plan() {
        let gain = GainMatrix::<f64>::new(vec![]).unwrap();
        assert_eq!(hungarian_match(&gain).unwrap().pairs.len(), 0);
        assert_eq!(brute_force_match(&gain).unwrap().pairs.len(), 0);
    }

    #[test]
    fn validation_catches_bad_inputs() {
        assert!(GainMatrix::new(vec![vec![1.0f64], vec![2.0], vec![3.0]]).is_err());
        assert!(GainMatrix::new(vec![vec![f64::NAN]]).is_err());
        assert!(GainMatrix::new(vec![vec![-0.5f64]]).is_err());
        assert!(
            GainMatrix::with_easy_indices(vec![vec![1.0f64, 2.0]], vec![7]).is_err()
        );
        let wide = GainMatrix::new(vec![vec![0.0f64; 9]]).unwrap();
        assert!(brute_force_match(&wide).is_err());
    }

    #[test]
    fn solver_agrees_with_brute_force_on_random_matrices() {
        let mut rng = stream_rng(77, Stream::Mixup);
        for case in 0..60 {
            let r = rng.random_range(1..=5usize);
            let c = rng.random_range(r..=7usize);
            let rows: Vec<Vec<f64>> = (0..r)
                .map(|_| {
                    (0..c)
                        .map(|_| {
                            if rng.random::<f64>() < 0.3 {
                                0.0
                            } else {
                                rng.random::<f64>()
                            }
                        })
                        .collect()
                })
                .collect();
            let gain = GainMatrix::new(rows).unwrap();
            let fast = hungarian_match(&gain).unwrap();
            let slow = brute_force_match(&gain).unwrap();
            assert_eq!(fast.pairs, slow.pairs, "case {case}");
            assert!(
                (fast.realized_gain - slow.realized_gain).abs() < 1e-9,
                "case {case}"
            );
        }
    }
}
