use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array of arbitrary rank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::contract(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Self {
        let n = numel(shape);
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            data.push(f(&idx));
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(
            &[n, n],
            |ix| if ix[0] == ix[1] { T::one() } else { T::zero() },
        )
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::contract("ragged rows"));
        }
        Self::new(vec![r, c], rows.iter().flatten().copied().collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(
                ix < dim,
                "index {ix} out of bounds for axis {i} of length {dim}"
            );
            off = off * dim + ix;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(
            self.data.len(),
            1,
            "item() on tensor with shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::Shape {
                expected: shape.to_vec(),
                actual: self.shape,
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn expect_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::Shape {
                expected: shape.to_vec(),
                actual: self.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        other.expect_shape(&self.shape)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    /// `self += c * other`
    pub fn axpy(&mut self, c: T, other: &Self) -> Result<()> {
        other.expect_shape(&self.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize_lossy(self.data.len().max(1))
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.shape.len(), "permutation rank");
        let in_strides = self.strides();
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n = self.data.len();
        let mut out = Vec::with_capacity(n);
        if n == 0 {
            return Tensor {
                shape: out_shape,
                data: out,
            };
        }
        let rank = out_shape.len();
        if rank == 0 {
            return self.clone();
        }
        let inner = out_shape[rank - 1];
        let inner_stride = src_strides[rank - 1];
        let mut idx = vec![0usize; rank - 1];
        let mut base = 0usize;
        loop {
            if inner_stride == 1 {
                out.extend_from_slice(&self.data[base..base + inner]);
            } else {
                for j in 0..inner {
                    out.push(self.data[base + j * inner_stride]);
                }
            }
            // advance the outer multi-index
            let mut ax = rank - 1;
            loop {
                if ax == 0 {
                    return Tensor {
                        shape: out_shape,
                        data: out,
                    };
                }
                ax -= 1;
                idx[ax] += 1;
                base += src_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                base -= src_strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
    }

    pub fn transpose2(&self) -> Self {
        assert_eq!(self.ndim(), 2);
        self.permute(&[1, 0])
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.ndim() || start + len > self.shape[axis] {
            return Err(Error::contract(format!(
                "narrow axis {axis} [{start}, {}) on shape {:?}",
                start + len,
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let dim = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Tensor { shape, data })
    }

    /// Concatenates tensors that agree on every axis except `axis`.
    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let rank = first.ndim();
        for p in parts {
            if p.ndim() != rank
                || p.shape[..axis] != first.shape[..axis]
                || p.shape[axis + 1..] != first.shape[axis + 1..]
            {
                return Err(Error::Shape {
                    expected: first.shape.clone(),
                    actual: p.shape.clone(),
                });
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total_axis: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total_axis;
        Ok(Tensor { shape, data })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            p.expect_shape(&first.shape)?;
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    /// Index `i` along the leading axis, dropping that axis.
    pub fn index0(&self, i: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        }
    }

    /// Plain 2-D matrix product.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::Shape {
                expected: vec![self.shape.get(1).copied().unwrap_or(0), usize::MAX],
                actual: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = Tensor::zeros(&[m, n]);
        gemm_into(
            m,
            k,
            n,
            &self.data,
            false,
            &other.data,
            false,
            &mut out.data,
            T::zero(),
        );
        Ok(out)
    }

    /// `x[..., K] · w[K, M] -> [..., M]`
    pub fn matmul_last(&self, w: &Self) -> Result<Self> {
        let k = *self
            .shape
            .last()
            .ok_or_else(|| Error::contract("rank-0 matmul"))?;
        if w.ndim() != 2 || w.shape[0] != k {
            return Err(Error::Shape {
                expected: vec![k, w.shape.get(1).copied().unwrap_or(0)],
                actual: w.shape.clone(),
            });
        }
        let rows = self.data.len() / k.max(1);
        let m = w.shape[1];
        let mut shape = self.shape.clone();
        *shape.last_mut().expect("rank >= 1") = m;
        let mut out = Tensor::zeros(&shape);
        gemm_into(
            rows,
            k,
            m,
            &self.data,
            false,
            &w.data,
            false,
            &mut out.data,
            T::zero(),
        );
        Ok(out)
    }
}

/// `c = a·b + beta·c` with optional transposes on row-major operands.
///
/// `a` is `m×k` (or `k×m` when `ta`), `b` is `k×n` (or `n×k` when `tb`).
#[allow(clippy::too_many_arguments)]
const SMALL_GEMM: usize = 4096;

pub(crate) fn gemm_into<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    beta: T,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    if m * k * n <= SMALL_GEMM {
        // packing overhead dominates for tiny products
        let c = &mut c[..m * n];
        if beta == T::zero() {
            c.iter_mut().for_each(|v| *v = T::zero());
        } else if beta != T::one() {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        for i in 0..m {
            let row = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * rsa as usize + p * csa as usize];
                if tb {
                    for (j, cv) in row.iter_mut().enumerate() {
                        *cv += av * b[p + j * k];
                    }
                } else {
                    for (cv, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                        *cv += av * bv;
                    }
                }
            }
        }
        return;
    }
    // SAFETY: extents checked above; `c` is uniquely borrowed.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
