//! Reverse-mode tape over dense tensors.
//!
//! Every primitive appends one node holding its forward value. Node indices
//! are a topological order by construction, so `backward` is a single sweep
//! from the root down to index 0.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_nt, matmul_raw, matmul_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    /// Stride 1 with zero padding that preserves spatial size for odd kernels.
    pub fn same(kernel: usize) -> Self {
        Conv2dSpec {
            stride: 1,
            padding: kernel / 2,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias { a: Var, bias: Var, axis: usize },
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    GatherRows { a: Var, idx: Vec<usize> },
    Reshape(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Clamp { a: Var, lo: f64, hi: f64 },
    Softmax { a: Var, axis: usize },
    LogSoftmax { a: Var, axis: usize },
    Sum { a: Var, axis: Option<usize> },
    Mean(Var),
    Conv2d { input: Var, kernel: Var, spec: Conv2dSpec },
    AvgPool2(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of one forward computation. One tape per training step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a parameter as a leaf; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&p, &v)| (p, v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).map(|x| x * factor);
        self.push(v, Op::Scale(a, factor))
    }

    /// Adds `bias` (one value per index of `axis`) broadcast over every other axis.
    pub fn add_bias(&mut self, a: Var, bias: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a);
        if axis >= sa.len() || self.value(bias).numel() != sa[axis] {
            return Err(Error::shape("add_bias", sa, self.shape(bias)));
        }
        let (outer, extent, inner) = Tensor::split_at_axis(sa, axis);
        let mut v = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        let d = v.data_mut();
        for o in 0..outer {
            for (e, &bv) in b.iter().enumerate().take(extent) {
                let base = (o * extent + e) * inner;
                for x in &mut d[base..base + inner] {
                    *x += bv;
                }
            }
        }
        Ok(self.push(v, Op::AddBias { a, bias, axis }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or(Error::Empty("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut extent = 0;
        for &p in parts {
            let s = self.shape(p);
            let conforms = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !conforms {
                return Err(Error::shape("concat", &base, s));
            }
            extent += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = extent;
        let (outer, _, inner) = Tensor::split_at_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let pe = self.shape(p)[axis];
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * pe * inner..(o + 1) * pe * inner]);
            }
        }
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || start >= end || end > sa[axis] {
            return Err(Error::shape("slice", &sa, &[start, end]));
        }
        let (outer, extent, inner) = Tensor::split_at_axis(&sa, axis);
        let width = end - start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&src[base..base + width * inner]);
        }
        let mut shape = sa;
        shape[axis] = width;
        Ok(self.push(Tensor::new(shape, data)?, Op::Slice { a, axis, start }))
    }

    /// Selects rows (axis 0) by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if idx.is_empty() || idx.iter().any(|&i| i >= sa[0]) {
            return Err(Error::shape("gather_rows", &sa, idx));
        }
        let t = self.value(a);
        let cols = t.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let mut shape = sa;
        shape[0] = idx.len();
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self
            .value(a)
            .reshape(shape)
            .map_err(|_| Error::shape("reshape", self.shape(a), shape))?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a))
    }

    /// Clamps into `[lo, hi]`; gradient is zero where the bound is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp { a, lo, hi })
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.axis_softmax(a, axis, false)?;
        Ok(self.push(v, Op::Softmax { a, axis }))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.axis_softmax(a, axis, true)?;
        Ok(self.push(v, Op::LogSoftmax { a, axis }))
    }

    fn axis_softmax(&self, a: Var, axis: usize, log: bool) -> Result<Tensor> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::shape("softmax", t.shape(), &[axis]));
        }
        let (outer, extent, inner) = Tensor::split_at_axis(t.shape(), axis);
        let mut out = t.clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |e: usize| (o * extent + e) * inner + i;
                let max = (0..extent).map(|e| d[at(e)]).fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = (0..extent).map(|e| (d[at(e)] - max).exp()).sum();
                let lse = max + total.ln();
                for e in 0..extent {
                    let z = d[at(e)] - lse;
                    d[at(e)] = if log { z } else { z.exp() };
                }
            }
        }
        Ok(out)
    }

    /// Sum over all elements (shape `[1]`), or over `axis` keeping it with extent 1.
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let t = self.value(a);
        let v = match axis {
            None => Tensor::scalar(t.sum()),
            Some(ax) => {
                if ax >= t.rank() {
                    return Err(Error::shape("sum", t.shape(), &[ax]));
                }
                let (outer, extent, inner) = Tensor::split_at_axis(t.shape(), ax);
                let mut shape = t.shape().to_vec();
                shape[ax] = 1;
                let src = t.data();
                let mut data = vec![0.0; outer * inner];
                for o in 0..outer {
                    for e in 0..extent {
                        let base = (o * extent + e) * inner;
                        for i in 0..inner {
                            data[o * inner + i] += src[base + i];
                        }
                    }
                }
                Tensor::new(shape, data)?
            }
        };
        Ok(self.push(v, Op::Sum { a, axis }))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(v, Op::Mean(a))
    }

    /// 2-D cross-correlation. `input: [B, Ci, H, W]`, `kernel: [Co, Ci, kh, kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, spec: Conv2dSpec) -> Result<Var> {
        let (si, sk) = (self.shape(input), self.shape(kernel));
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] || spec.stride == 0 {
            return Err(Error::shape("conv2d", si, sk));
        }
        let g = ConvGeom::new(si, sk, spec).ok_or_else(|| Error::shape("conv2d", si, sk))?;
        let data = g.forward(self.value(input).data(), self.value(kernel).data());
        let v = Tensor::new(vec![g.b, g.co, g.ho, g.wo], data)?;
        Ok(self.push(v, Op::Conv2d { input, kernel, spec }))
    }

    /// 2x2 average pooling with stride 2 over the last two axes of `[B, C, H, W]`.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::shape("avg_pool2", &s, &[2, 2]));
        }
        let (ho, wo) = (s[2] / 2, s[3] / 2);
        let src = self.value(a).data();
        let mut data = vec![0.0; s[0] * s[1] * ho * wo];
        for bc in 0..s[0] * s[1] {
            let plane = &src[bc * s[2] * s[3]..];
            for i in 0..ho {
                for j in 0..wo {
                    let at = |r: usize, c: usize| plane[r * s[3] + c];
                    data[bc * ho * wo + i * wo + j] = 0.25
                        * (at(2 * i, 2 * j)
                            + at(2 * i, 2 * j + 1)
                            + at(2 * i + 1, 2 * j)
                            + at(2 * i + 1, 2 * j + 1));
                }
            }
        }
        let v = Tensor::new(vec![s[0], s[1], ho, wo], data)?;
        Ok(self.push(v, Op::AvgPool2(a)))
    }

    /// Propagates adjoints from a scalar `root` back through the tape.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self.params.clone();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let ga = matmul_nt(g.data(), tb.data(), m, n, k);
                let gb = matmul_tn(ta.data(), g.data(), m, k, n);
                acc(*a, Tensor::new(vec![m, k], ga).expect("matmul grad"));
                acc(*b, Tensor::new(vec![k, n], gb).expect("matmul grad"));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
            }
            Op::Scale(a, f) => acc(*a, g.map(|x| x * f)),
            Op::AddBias { a, bias, axis } => {
                let (outer, extent, inner) = Tensor::split_at_axis(g.shape(), *axis);
                let mut gb = vec![0.0; extent];
                for o in 0..outer {
                    for (e, slot) in gb.iter_mut().enumerate() {
                        let base = (o * extent + e) * inner;
                        *slot += g.data()[base..base + inner].iter().sum::<f64>();
                    }
                }
                let bshape = self.shape(*bias).to_vec();
                acc(*a, g.clone());
                acc(*bias, Tensor::new(bshape, gb).expect("bias grad"));
            }
            Op::Concat { parts, axis } => {
                let (outer, extent, inner) = Tensor::split_at_axis(g.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let pe = ps[*axis];
                    let mut data = Vec::with_capacity(ps.iter().product());
                    for o in 0..outer {
                        let base = (o * extent + offset) * inner;
                        data.extend_from_slice(&g.data()[base..base + pe * inner]);
                    }
                    offset += pe;
                    acc(p, Tensor::new(ps, data).expect("concat grad"));
                }
            }
            Op::Slice { a, axis, start } => {
                let sa = self.shape(*a).to_vec();
                let (outer, extent, inner) = Tensor::split_at_axis(&sa, *axis);
                let width = g.shape()[*axis];
                let mut full = Tensor::zeros(&sa);
                let d = full.data_mut();
                for o in 0..outer {
                    let dst = (o * extent + start) * inner;
                    let src = o * width * inner;
                    d[dst..dst + width * inner]
                        .copy_from_slice(&g.data()[src..src + width * inner]);
                }
                acc(*a, full);
            }
            Op::GatherRows { a, idx } => {
                let sa = self.shape(*a).to_vec();
                let mut full = Tensor::zeros(&sa);
                let cols = full.cols();
                let d = full.data_mut();
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..cols {
                        d[i * cols + c] += g.data()[r * cols + c];
                    }
                }
                acc(*a, full);
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                acc(*a, g.reshape(&shape).expect("reshape grad"));
            }
            Op::Relu(a) => acc(
                *a,
                g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 }),
            ),
            Op::Sigmoid(a) => acc(*a, g.zip_map(out, |gv, y| gv * y * (1.0 - y))),
            Op::Tanh(a) => acc(*a, g.zip_map(out, |gv, y| gv * (1.0 - y * y))),
            Op::Exp(a) => acc(*a, g.zip_map(out, |gv, y| gv * y)),
            Op::Log(a) => acc(*a, g.zip_map(self.value(*a), |gv, x| gv / x)),
            Op::Abs(a) => acc(*a, g.zip_map(self.value(*a), |gv, x| gv * sign(x))),
            Op::Clamp { a, lo, hi } => acc(
                *a,
                g.zip_map(self.value(*a), |gv, x| {
                    if x >= *lo && x <= *hi {
                        gv
                    } else {
                        0.0
                    }
                }),
            ),
            Op::Softmax { a, axis } => {
                // dx = y * (g - sum(g * y))
                let gy = g.zip_map(out, |x, y| x * y);
                let s = reduce_axis(&gy, *axis);
                let mut dx = gy;
                for_axis(out.shape(), *axis, |flat, red| {
                    dx.data_mut()[flat] -= out.data()[flat] * s[red];
                });
                acc(*a, dx);
            }
            Op::LogSoftmax { a, axis } => {
                // dx = g - softmax * sum(g)
                let s = reduce_axis(g, *axis);
                let mut dx = g.clone();
                for_axis(out.shape(), *axis, |flat, red| {
                    dx.data_mut()[flat] -= out.data()[flat].exp() * s[red];
                });
                acc(*a, dx);
            }
            Op::Sum { a, axis } => {
                let sa = self.shape(*a).to_vec();
                let full = match axis {
                    None => Tensor::full(&sa, g.item()),
                    Some(ax) => {
                        let mut t = Tensor::zeros(&sa);
                        let gd = g.data().to_vec();
                        let d = t.data_mut();
                        for_axis(&sa, *ax, |flat, red| d[flat] = gd[red]);
                        t
                    }
                };
                acc(*a, full);
            }
            Op::Mean(a) => {
                let sa = self.shape(*a).to_vec();
                let n = sa.iter().product::<usize>() as f64;
                acc(*a, Tensor::full(&sa, g.item() / n));
            }
            Op::Conv2d {
                input,
                kernel,
                spec,
            } => {
                let (ti, tk) = (self.value(*input), self.value(*kernel));
                let geom = ConvGeom::new(ti.shape(), tk.shape(), *spec).expect("conv geometry");
                let (gi, gk) = geom.backward(ti.data(), tk.data(), g.data());
                acc(*input, Tensor::new(ti.shape().to_vec(), gi).expect("conv grad"));
                acc(*kernel, Tensor::new(tk.shape().to_vec(), gk).expect("conv grad"));
            }
            Op::AvgPool2(a) => {
                let s = self.shape(*a).to_vec();
                let (ho, wo) = (g.shape()[2], g.shape()[3]);
                let mut full = Tensor::zeros(&s);
                let d = full.data_mut();
                for bc in 0..s[0] * s[1] {
                    for i in 0..ho {
                        for j in 0..wo {
                            let gv = 0.25 * g.data()[bc * ho * wo + i * wo + j];
                            for (r, c) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                d[bc * s[2] * s[3] + (2 * i + r) * s[3] + 2 * j + c] += gv;
                            }
                        }
                    }
                }
                acc(*a, full);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sum over `axis`, returned flat in `(outer, inner)` order.
fn reduce_axis(t: &Tensor, axis: usize) -> Vec<f64> {
    let (outer, _, inner) = Tensor::split_at_axis(t.shape(), axis);
    let mut s = vec![0.0; outer * inner];
    for_axis(t.shape(), axis, |flat, red| s[red] += t.data()[flat]);
    s
}

/// Visits every flat index with its reduced `(outer, inner)` index.
fn for_axis(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize)) {
    let (outer, extent, inner) = Tensor::split_at_axis(shape, axis);
    for o in 0..outer {
        for e in 0..extent {
            for i in 0..inner {
                f((o * extent + e) * inner + i, o * inner + i);
            }
        }
    }
}

struct ConvGeom {
    b: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(si: &[usize], sk: &[usize], spec: Conv2dSpec) -> Option<Self> {
        let (h, w, kh, kw) = (si[2], si[3], sk[2], sk[3]);
        let (ph, pw) = (h + 2 * spec.padding, w + 2 * spec.padding);
        if ph < kh || pw < kw {
            return None;
        }
        Some(ConvGeom {
            b: si[0],
            ci: si[1],
            h,
            w,
            co: sk[0],
            kh,
            kw,
            ho: (ph - kh) / spec.stride + 1,
            wo: (pw - kw) / spec.stride + 1,
            stride: spec.stride,
            pad: spec.padding,
        })
    }

    /// Input coordinate for output position `o` and kernel tap `k`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }

    fn forward(&self, input: &[f64], kernel: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.b * self.co * self.ho * self.wo];
        for b in 0..self.b {
            for co in 0..self.co {
                let out_plane = &mut out[(b * self.co + co) * self.ho * self.wo..][..self.ho * self.wo];
                for ci in 0..self.ci {
                    let in_plane = &input[(b * self.ci + ci) * self.h * self.w..][..self.h * self.w];
                    for ki in 0..self.kh {
                        for kj in 0..self.kw {
                            let kv = kernel[((co * self.ci + ci) * self.kh + ki) * self.kw + kj];
                            if kv == 0.0 {
                                continue;
                            }
                            for oi in 0..self.ho {
                                let Some(ii) = self.src(oi, ki, self.h) else {
                                    continue;
                                };
                                for oj in 0..self.wo {
                                    if let Some(jj) = self.src(oj, kj, self.w) {
                                        out_plane[oi * self.wo + oj] += kv * in_plane[ii * self.w + jj];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn backward(&self, input: &[f64], kernel: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut gi = vec![0.0; input.len()];
        let mut gk = vec![0.0; kernel.len()];
        for b in 0..self.b {
            for co in 0..self.co {
                let g_plane = &g[(b * self.co + co) * self.ho * self.wo..][..self.ho * self.wo];
                for ci in 0..self.ci {
                    let off = (b * self.ci + ci) * self.h * self.w;
                    for ki in 0..self.kh {
                        for kj in 0..self.kw {
                            let kidx = ((co * self.ci + ci) * self.kh + ki) * self.kw + kj;
                            let kv = kernel[kidx];
                            let mut kacc = 0.0;
                            for oi in 0..self.ho {
                                let Some(ii) = self.src(oi, ki, self.h) else {
                                    continue;
                                };
                                for oj in 0..self.wo {
                                    if let Some(jj) = self.src(oj, kj, self.w) {
                                        let gv = g_plane[oi * self.wo + oj];
                                        let at = off + ii * self.w + jj;
                                        kacc += gv * input[at];
                                        gi[at] += gv * kv;
                                    }
                                }
                            }
                            gk[kidx] += kacc;
                        }
                    }
                }
            }
        }
        (gi, gk)
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` when no path connects it to the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|&v| self.get(v))
    }

    /// One gradient per parameter in `store`, zero-filled for parameters off the path.
    pub fn for_params(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| {
                self.param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect()
    }
}
