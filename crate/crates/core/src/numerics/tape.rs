//! Reverse-mode gradient tape over dense tensors.
//!
//! Every operation appends a node holding its forward value. [`Tape::grad`]
//! walks the nodes backwards once and returns the adjoints of the requested
//! parameter leaves.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::tensor::{gemm_into, strides_of};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Constant,
    Param,
    Add(Var, Var),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    Scale(Var, T),
    MatmulLast(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    LeftMatmul {
        m: Rc<Tensor<T>>,
        x: Var,
    },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    Sigmoid(Var),
    Tanh(Var),
    Silu(Var),
    NarrowLast {
        x: Var,
        start: usize,
    },
    Mse {
        pred: Var,
        target: Rc<Tensor<T>>,
        weights: Option<Rc<Tensor<T>>>,
    },
    SumAll(Var),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
}

/// Records tensor operations for reverse-mode differentiation.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Shape of `a ⊕ b` under right-aligned broadcasting where only `b` may broadcast.
fn bcast_strides(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if b.len() > a.len() {
        return Err(Error::Shape {
            expected: a.to_vec(),
            actual: b.to_vec(),
        });
    }
    let pad = a.len() - b.len();
    let bs = strides_of(b);
    let mut out = vec![0; a.len()];
    for i in 0..b.len() {
        let (da, db) = (a[pad + i], b[i]);
        if db == da {
            out[pad + i] = if db == 1 { 0 } else { bs[i] };
        } else if db == 1 {
            out[pad + i] = 0;
        } else {
            return Err(Error::Shape {
                expected: a.to_vec(),
                actual: b.to_vec(),
            });
        }
    }
    Ok(out)
}

/// Calls `f(a_offset, b_offset, run, b_step)` for every contiguous run of the
/// last axis of `a_shape`, with `b` addressed through broadcast strides.
fn for_each_run(
    a_shape: &[usize],
    b_strides: &[usize],
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    let rank = a_shape.len();
    if rank == 0 {
        f(0, 0, 1, 0);
        return;
    }
    let total: usize = a_shape.iter().product();
    if total == 0 {
        return;
    }
    let inner = a_shape[rank - 1];
    let b_step = b_strides[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let mut a_off = 0;
    let mut b_off = 0;
    loop {
        f(a_off, b_off, inner, b_step);
        a_off += inner;
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            b_off += b_strides[ax];
            if idx[ax] < a_shape[ax] {
                break;
            }
            b_off -= b_strides[ax] * a_shape[ax];
            idx[ax] = 0;
        }
    }
}

fn reduce_to<T: Scalar>(g: &Tensor<T>, target: &[usize]) -> Result<Tensor<T>> {
    if g.shape() == target {
        return Ok(g.clone());
    }
    let strides = bcast_strides(g.shape(), target)?;
    let mut out = Tensor::zeros(target);
    let gd = g.data();
    let od = out.data_mut();
    for_each_run(g.shape(), &strides, |ao, bo, run, bstep| {
        if bstep == 0 {
            let mut acc = T::zero();
            for &v in &gd[ao..ao + run] {
                acc += v;
            }
            od[bo] += acc;
        } else {
            for j in 0..run {
                od[bo + j * bstep] += gd[ao + j];
            }
        }
    });
    Ok(out)
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Registers a differentiable leaf.
    pub fn param(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Param)
    }

    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(&self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    fn bcast_apply(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let av = self.value(a);
        let bv = self.value(b);
        let strides = bcast_strides(av.shape(), bv.shape())?;
        let mut out = Tensor::zeros(av.shape());
        let (ad, bd) = (av.data(), bv.data());
        let od = out.data_mut();
        for_each_run(av.shape(), &strides, |ao, bo, run, bstep| {
            for j in 0..run {
                od[ao + j] = f(ad[ao + j], bd[bo + j * bstep]);
            }
        });
        Ok(out)
    }

    /// `a + b` where `b` broadcasts (right-aligned) against `a`.
    pub fn add_bcast(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.bcast_apply(a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::AddBcast(a, b)))
    }

    /// `a * b` where `b` broadcasts (right-aligned) against `a`.
    pub fn mul_bcast(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.bcast_apply(a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::MulBcast(a, b)))
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    /// `x[..., K] · w[K, M]`
    pub fn matmul_last(&self, x: Var, w: Var) -> Result<Var> {
        let v = self.value(x).matmul_last(&self.value(w))?;
        Ok(self.push(v, Op::MatmulLast(x, w)))
    }

    /// Position-wise affine map `x·w + b`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul_last(x, w)?;
        self.add_bcast(y, b)
    }

    /// Batched product `a[G,M,K] · b[G,K,N]`, or `a · b[G,N,K]ᵀ` when `trans_b`.
    pub fn bmm(&self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::Shape {
                expected: sa.to_vec(),
                actual: sb.to_vec(),
            });
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if kb != k {
            return Err(Error::Shape {
                expected: sa.to_vec(),
                actual: sb.to_vec(),
            });
        }
        let mut out = Tensor::zeros(&[g, m, n]);
        {
            let od = out.data_mut();
            for i in 0..g {
                gemm_into(
                    m,
                    k,
                    n,
                    &av.data()[i * m * k..(i + 1) * m * k],
                    false,
                    &bv.data()[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut od[i * m * n..(i + 1) * m * n],
                    T::zero(),
                );
            }
        }
        Ok(self.push(out, Op::Bmm { a, b, trans_b }))
    }

    /// Left-multiplies the leading axis of `x` by a constant matrix `m[P, Q]`.
    pub fn left_matmul(&self, m: Rc<Tensor<T>>, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (p, q) = (m.shape()[0], m.shape()[1]);
        if xv.shape().first() != Some(&q) {
            return Err(Error::Shape {
                expected: vec![q],
                actual: xv.shape().to_vec(),
            });
        }
        let r = xv.len() / q.max(1);
        let mut shape = xv.shape().to_vec();
        shape[0] = p;
        let mut out = Tensor::zeros(&shape);
        gemm_into(
            p,
            q,
            r,
            m.data(),
            false,
            xv.data(),
            false,
            out.data_mut(),
            T::zero(),
        );
        Ok(self.push(out, Op::LeftMatmul { m, x }))
    }

    pub fn permute(&self, x: Var, perm: &[usize]) -> Var {
        let v = self.value(x).permute(perm);
        self.push(v, Op::Permute(x, perm.to_vec()))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = (*self.value(x)).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn softmax_last(&self, x: Var) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap_or(&1);
        let mut out = (*xv).clone();
        for row in out.data_mut().chunks_mut(n.max(1)) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push(out, Op::Softmax(x))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm_last(&self, x: Var) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap_or(&1);
        let nf = T::from_usize_lossy(n);
        let eps = T::lit(LAYER_NORM_EPS);
        let mut out = (*xv).clone();
        let mut inv_std = Vec::with_capacity(xv.len() / n.max(1));
        for row in out.data_mut().chunks_mut(n.max(1)) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(out, Op::LayerNorm { x, inv_std })
    }

    /// LayerNorm with learnable gain and bias over the last axis.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = self.layer_norm_last(x);
        let g = self.mul_bcast(n, gain)?;
        self.add_bcast(g, bias)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn tanh(&self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.tanh());
        self.push(v, Op::Tanh(x))
    }

    pub fn silu(&self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * sigmoid(a));
        self.push(v, Op::Silu(x))
    }

    /// Slice `[start, start+len)` of the last axis.
    pub fn narrow_last(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let axis = xv
            .ndim()
            .checked_sub(1)
            .ok_or_else(|| Error::contract("narrow on scalar"))?;
        let v = xv.narrow(axis, start, len)?;
        Ok(self.push(v, Op::NarrowLast { x, start }))
    }

    /// Mean squared error against a constant target, optionally weighted per element.
    pub fn mse(
        &self,
        pred: Var,
        target: Rc<Tensor<T>>,
        weights: Option<Rc<Tensor<T>>>,
    ) -> Result<Var> {
        let pv = self.value(pred);
        target.expect_shape(pv.shape())?;
        let (num, den) = match &weights {
            Some(w) => {
                w.expect_shape(pv.shape())?;
                let mut num = T::zero();
                for ((&p, &t), &wi) in pv.data().iter().zip(target.data()).zip(w.data()) {
                    num += wi * (p - t) * (p - t);
                }
                (num, w.sum())
            }
            None => {
                let num = pv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &t)| (p - t) * (p - t))
                    .sum::<T>();
                (num, T::from_usize_lossy(pv.len()))
            }
        };
        if den <= T::zero() {
            return Err(Error::contract("mse with zero total weight"));
        }
        Ok(self.push(
            Tensor::scalar(num / den),
            Op::Mse {
                pred,
                target,
                weights,
            },
        ))
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    /// Gradients of the scalar `loss` with respect to each parameter in `params`.
    pub fn grad(&self, loss: Var, params: &[Var]) -> Result<Vec<Tensor<T>>> {
        let nodes = self.nodes.borrow();
        if loss.0 >= nodes.len() || nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(
                "loss must be a scalar recorded on this tape",
            ));
        }
        for p in params {
            match nodes.get(p.0) {
                Some(Node { op: Op::Param, .. }) => {}
                _ => {
                    return Err(Error::contract(format!(
                        "variable {} is not a parameter registered on this tape",
                        p.0
                    )))
                }
            }
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let val = &node.value;
            match &node.op {
                Op::Constant => {}
                Op::Param => {
                    grads[i] = Some(g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[b.0], g.clone());
                    accumulate(&mut grads[a.0], g);
                }
                Op::AddBcast(a, b) => {
                    let gb = reduce_to(&g, nodes[b.0].value.shape())?;
                    accumulate(&mut grads[b.0], gb);
                    accumulate(&mut grads[a.0], g);
                }
                Op::MulBcast(a, b) => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    let strides = bcast_strides(av.shape(), bv.shape())?;
                    let mut ga = Tensor::zeros(av.shape());
                    let mut gab = Tensor::zeros(av.shape());
                    {
                        let (gd, ad, bd) = (g.data(), av.data(), bv.data());
                        let gad = ga.data_mut();
                        for_each_run(av.shape(), &strides, |ao, bo, run, bstep| {
                            for j in 0..run {
                                gad[ao + j] = gd[ao + j] * bd[bo + j * bstep];
                            }
                        });
                        for ((o, &gv), &a_) in gab.data_mut().iter_mut().zip(gd).zip(ad) {
                            *o = gv * a_;
                        }
                    }
                    let gb = reduce_to(&gab, bv.shape())?;
                    accumulate(&mut grads[b.0], gb);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads[a.0], g.scale(*c));
                }
                Op::MatmulLast(x, w) => {
                    let xv = &nodes[x.0].value;
                    let wv = &nodes[w.0].value;
                    let (k, m) = (wv.shape()[0], wv.shape()[1]);
                    let rows = xv.len() / k.max(1);
                    let mut gx = Tensor::zeros(xv.shape());
                    gemm_into(
                        rows,
                        m,
                        k,
                        g.data(),
                        false,
                        wv.data(),
                        true,
                        gx.data_mut(),
                        T::zero(),
                    );
                    let mut gw = Tensor::zeros(wv.shape());
                    gemm_into(
                        k,
                        rows,
                        m,
                        xv.data(),
                        true,
                        g.data(),
                        false,
                        gw.data_mut(),
                        T::zero(),
                    );
                    accumulate(&mut grads[w.0], gw);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Bmm { a, b, trans_b } => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    let (gn, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                    let n = val.shape()[2];
                    let mut ga = Tensor::zeros(av.shape());
                    let mut gb = Tensor::zeros(bv.shape());
                    {
                        let (gad, gbd) = (ga.data_mut(), gb.data_mut());
                        for i in 0..gn {
                            let gs = &g.data()[i * m * n..(i + 1) * m * n];
                            let asl = &av.data()[i * m * k..(i + 1) * m * k];
                            let bsl = &bv.data()[i * k * n..(i + 1) * k * n];
                            // dA = dC · Bᵀ (or dC · B when B was transposed)
                            gemm_into(
                                m,
                                n,
                                k,
                                gs,
                                false,
                                bsl,
                                !trans_b,
                                &mut gad[i * m * k..(i + 1) * m * k],
                                T::zero(),
                            );
                            if *trans_b {
                                // B is [N,K]: dB = dCᵀ · A
                                gemm_into(
                                    n,
                                    m,
                                    k,
                                    gs,
                                    true,
                                    asl,
                                    false,
                                    &mut gbd[i * k * n..(i + 1) * k * n],
                                    T::zero(),
                                );
                            } else {
                                gemm_into(
                                    k,
                                    m,
                                    n,
                                    asl,
                                    true,
                                    gs,
                                    false,
                                    &mut gbd[i * k * n..(i + 1) * k * n],
                                    T::zero(),
                                );
                            }
                        }
                    }
                    accumulate(&mut grads[b.0], gb);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::LeftMatmul { m, x } => {
                    let xv = &nodes[x.0].value;
                    let (p, q) = (m.shape()[0], m.shape()[1]);
                    let r = xv.len() / q.max(1);
                    let mut gx = Tensor::zeros(xv.shape());
                    gemm_into(
                        q,
                        p,
                        r,
                        m.data(),
                        true,
                        g.data(),
                        false,
                        gx.data_mut(),
                        T::zero(),
                    );
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Permute(x, perm) => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    accumulate(&mut grads[x.0], g.permute(&inv));
                }
                Op::Reshape(x) => {
                    let gx = g.reshape(nodes[x.0].value.shape())?;
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Softmax(x) => {
                    let n = *val.shape().last().unwrap_or(&1);
                    let mut gx = Tensor::zeros(val.shape());
                    for ((gxr, yr), gr) in gx
                        .data_mut()
                        .chunks_mut(n)
                        .zip(val.data().chunks(n))
                        .zip(g.data().chunks(n))
                    {
                        let dot = yr.iter().zip(gr).map(|(&y, &gg)| y * gg).sum::<T>();
                        for j in 0..n {
                            gxr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::LayerNorm { x, inv_std } => {
                    let n = *val.shape().last().unwrap_or(&1);
                    let nf = T::from_usize_lossy(n);
                    let mut gx = Tensor::zeros(val.shape());
                    for (r, ((gxr, yr), gr)) in gx
                        .data_mut()
                        .chunks_mut(n)
                        .zip(val.data().chunks(n))
                        .zip(g.data().chunks(n))
                        .enumerate()
                    {
                        let mg = gr.iter().copied().sum::<T>() / nf;
                        let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / nf;
                        for j in 0..n {
                            gxr[j] = inv_std[r] * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Sigmoid(x) => {
                    let gx = val.zip_map(&g, |y, gg| gg * y * (T::one() - y))?;
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Tanh(x) => {
                    let gx = val.zip_map(&g, |y, gg| gg * (T::one() - y * y))?;
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Silu(x) => {
                    let gx = nodes[x.0].value.zip_map(&g, |a, gg| {
                        let s = sigmoid(a);
                        gg * (s + a * s * (T::one() - s))
                    })?;
                    accumulate(&mut grads[x.0], gx);
                }
                Op::NarrowLast { x, start } => {
                    let xs = nodes[x.0].value.shape().to_vec();
                    let full = *xs.last().expect("rank >= 1");
                    let len = *val.shape().last().expect("rank >= 1");
                    let mut gx = Tensor::zeros(&xs);
                    for (dst, src) in gx.data_mut().chunks_mut(full).zip(g.data().chunks(len)) {
                        dst[*start..*start + len].copy_from_slice(src);
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Mse {
                    pred,
                    target,
                    weights,
                } => {
                    let pv = &nodes[pred.0].value;
                    let g0 = g.item();
                    let gx = match weights {
                        Some(w) => {
                            let den = w.sum();
                            let mut gx = pv.sub(target)?;
                            for (v, &wi) in gx.data_mut().iter_mut().zip(w.data()) {
                                *v = *v * wi * T::lit(2.0) * g0 / den;
                            }
                            gx
                        }
                        None => {
                            let c = T::lit(2.0) * g0 / T::from_usize_lossy(pv.len());
                            pv.sub(target)?.scale(c)
                        }
                    };
                    accumulate(&mut grads[pred.0], gx);
                }
                Op::SumAll(x) => {
                    let xs = nodes[x.0].value.shape().to_vec();
                    accumulate(&mut grads[x.0], Tensor::full(&xs, g.item()));
                }
            }
        }

        Ok(params
            .iter()
            .map(|p| {
                grads
                    .get_mut(p.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(nodes[p.0].value.shape()))
            })
            .collect())
    }
}
