//! Dense row-major tensors.
//!
//! [`Tensor`] is a plain value: shape plus a flat buffer, no gradient state.
//! Differentiation lives in the graph module; the kernels here are shared by
//! graph ops and by value-level callers (saliency maps, mixing plans).

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    dims: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor from a shape and a row-major buffer.
    pub fn new(dims: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::shape("rank-0 tensors are not supported, use dims [1]"));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero-sized dimension in {dims:?}")));
        }
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} imply {len} elements, buffer holds {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let len = dims.iter().product();
        Tensor::new(dims, vec![S::zero(); len]).expect("zeros shape is internally consistent")
    }

    pub fn filled(dims: Vec<usize>, value: S) -> Self {
        let len = dims.iter().product();
        Tensor::new(dims, vec![value; len]).expect("filled shape is internally consistent")
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
        }
    }

    /// 2-D tensor from nested rows. Rows must have equal lengths.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::shape("from_rows needs at least one row"));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows requires equal-length rows"));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn first(&self) -> S {
        self.data[0]
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.dims.len());
        let mut off = 0;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.dims[i]);
            off = off * self.dims[i] + ix;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> S {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: S) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rows along the last dimension.
    pub fn last_dim_rows(&self) -> impl Iterator<Item = &[S]> {
        let last = *self.dims.last().expect("rank >= 1");
        self.data.chunks(last)
    }

    pub fn reshape(&self, dims: Vec<usize>) -> Result<Tensor<S>> {
        let len: usize = dims.iter().product();
        if dims.iter().any(|&d| d == 0) || len != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) into {dims:?}",
                self.dims,
                self.data.len()
            )));
        }
        Ok(Tensor {
            dims,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Tensor<S>, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "elementwise op on {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            dims: self.dims.clone(),
            data,
        })
    }

    pub fn scale(&self, k: S) -> Tensor<S> {
        self.map(|x| x * k)
    }

    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn sum(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &x| acc + x)
    }

    /// Batched matrix product over the last two dimensions.
    ///
    /// Leading dimensions must match, or be absent on one side (that operand
    /// is then shared across the other's batch).
    pub fn matmul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        matmul_dims(&self.dims, &rhs.dims).map(|spec| {
            let mut out = vec![S::zero(); spec.out_dims.iter().product()];
            matmul_kernel(&spec, &self.data, &rhs.data, &mut out);
            Tensor {
                dims: spec.out_dims,
                data: out,
            }
        })
    }

    /// Swaps the last two dimensions.
    pub fn transpose_last2(&self) -> Result<Tensor<S>> {
        let r = self.dims.len();
        if r < 2 {
            return Err(Error::shape(format!(
                "transpose_last2 needs rank >= 2, got {:?}",
                self.dims
            )));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// Reorders dimensions: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<S>> {
        let r = self.dims.len();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!(
                "invalid permutation {perm:?} for rank {r}"
            )));
        }
        let out_dims: Vec<usize> = perm.iter().map(|&p| self.dims[p]).collect();
        let in_strides = strides(&self.dims);
        let mut data = vec![S::zero(); self.data.len()];
        let mut idx = vec![0usize; r];
        for out_off in 0..data.len() {
            let mut in_off = 0;
            for (axis, &p) in perm.iter().enumerate() {
                in_off += idx[axis] * in_strides[p];
            }
            data[out_off] = self.data[in_off];
            for axis in (0..r).rev() {
                idx[axis] += 1;
                if idx[axis] < out_dims[axis] {
                    break;
                }
                idx[axis] = 0;
            }
        }
        Ok(Tensor {
            dims: out_dims,
            data,
        })
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<S>> {
        let r = self.dims.len();
        if axis >= r {
            return Err(Error::shape(format!(
                "mean_axis {axis} out of range for rank {r}"
            )));
        }
        if r == 1 {
            return Ok(Tensor::scalar(self.sum() / S::cast(self.data.len() as f64)));
        }
        let out_dims: Vec<usize> = self
            .dims
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &d)| d)
            .collect();
        let outer: usize = self.dims[..axis].iter().product();
        let n = self.dims[axis];
        let inner: usize = self.dims[axis + 1..].iter().product();
        let mut data = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                let out_base = o * inner;
                for i in 0..inner {
                    data[out_base + i] += self.data[base + i];
                }
            }
        }
        let inv = S::one() / S::cast(n as f64);
        for x in &mut data {
            *x *= inv;
        }
        Tensor::new(out_dims, data)
    }

    /// Selects rows along axis 0. Indices may repeat.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Tensor<S>> {
        let b = self.dims[0];
        if let Some(&bad) = index.iter().find(|&&i| i >= b) {
            return Err(Error::usage(format!(
                "gather_rows index {bad} out of range for leading dim {b}"
            )));
        }
        if index.is_empty() {
            return Err(Error::usage("gather_rows needs at least one index"));
        }
        let row: usize = self.dims[1..].iter().product();
        let mut dims = self.dims.clone();
        dims[0] = index.len();
        let mut data = Vec::with_capacity(index.len() * row);
        for &i in index {
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        Tensor::new(dims, data)
    }

    /// Concatenates rank-3 tensors along axis 1 (the token axis).
    pub fn concat_axis1(parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
        if parts.is_empty() {
            return Err(Error::usage("concat_axis1 needs at least one part"));
        }
        let b = parts[0].dims[0];
        let d = *parts[0].dims.last().unwrap();
        for p in parts {
            if p.rank() != 3 || p.dims[0] != b || p.dims[2] != d {
                return Err(Error::shape(format!(
                    "concat_axis1 expects [b, *, d] parts, got {:?} vs [{b}, *, {d}]",
                    p.dims
                )));
            }
        }
        let total: usize = parts.iter().map(|p| p.dims[1]).sum();
        let mut data = Vec::with_capacity(b * total * d);
        for i in 0..b {
            for p in parts {
                let m = p.dims[1];
                data.extend_from_slice(&p.data[i * m * d..(i + 1) * m * d]);
            }
        }
        Tensor::new(vec![b, total, d], data)
    }
}

pub(crate) fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

pub(crate) struct MatmulSpec {
    pub out_dims: Vec<usize>,
    pub batches: usize,
    pub m: usize,
    pub k: usize,
    pub p: usize,
    pub lhs_batched: bool,
    pub rhs_batched: bool,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulSpec> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape(format!(
            "matmul needs rank >= 2 operands, got {a:?} x {b:?}"
        )));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, p) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dims disagree: {a:?} x {b:?}"
        )));
    }
    let la = &a[..a.len() - 2];
    let lb = &b[..b.len() - 2];
    let (lead, lhs_batched, rhs_batched) = if la == lb {
        (la, !la.is_empty(), !lb.is_empty())
    } else if la.is_empty() {
        (lb, false, true)
    } else if lb.is_empty() {
        (la, true, false)
    } else {
        return Err(Error::shape(format!(
            "matmul leading dims disagree: {a:?} x {b:?}"
        )));
    };
    let mut out_dims = lead.to_vec();
    out_dims.push(m);
    out_dims.push(p);
    Ok(MatmulSpec {
        out_dims,
        batches: lead.iter().product(),
        m,
        k,
        p,
        lhs_batched,
        rhs_batched,
    })
}

pub(crate) fn matmul_kernel<S: Scalar>(spec: &MatmulSpec, a: &[S], b: &[S], out: &mut [S]) {
    let (m, k, p) = (spec.m, spec.k, spec.p);
    for batch in 0..spec.batches {
        let a_base = if spec.lhs_batched { batch * m * k } else { 0 };
        let b_base = if spec.rhs_batched { batch * k * p } else { 0 };
        let o_base = batch * m * p;
        for i in 0..m {
            for kk in 0..k {
                let av = a[a_base + i * k + kk];
                let b_row = &b[b_base + kk * p..b_base + (kk + 1) * p];
                let o_row = &mut out[o_base + i * p..o_base + (i + 1) * p];
                for (o, &bv) in o_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    }
}
