//! Reverse-mode tape. Every primitive appends one node; [`Graph::backward`]
//! walks the tape once in reverse and accumulates gradients additively.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, ConvGeom};
use super::{Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Reshape(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
        trans_b: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    AddScalar { x: Var, s: Var },
    Scale { x: Var, factor: T },
    ScaleOuter { x: Var, factors: Vec<T> },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    /// Keeps `d gelu / dx` at every input.
    Gelu { x: Var, slope: Vec<T> },
    Conv2d {
        x: Var,
        w: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<T>,
        cout: usize,
    },
    Depthwise {
        x: Var,
        w: Var,
        bias: Var,
        dims: (usize, usize, usize, usize),
        k: usize,
    },
    Gather { x: Var, index: Vec<usize> },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        lens: Vec<usize>,
        inner: usize,
    },
    MeanAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// A single forward pass recorded for reverse-mode differentiation.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    macs: u64,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            macs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by forward primitives so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, present after [`Graph::backward`] reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let op = if trans_b { "matmul_t" } else { "matmul" };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err(op, &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let shared_b = lead_b.is_empty();
        if kb != k || (!shared_b && lead_a != lead_b) {
            return Err(shape_err(op, &sa, &sb));
        }
        let batch: usize = lead_a.iter().product();
        let mut out = vec![T::ZERO; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            if shared_b {
                kernels::gemm(batch * m, k, n, av, false, bv, trans_b, &mut out, false);
            }
            for i in (0..batch).filter(|_| !shared_b) {
                let bs = if shared_b { 0 } else { i * k * n };
                kernels::gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[bs..bs + k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        self.macs += (batch * m * k * n) as u64;
        let mut shape = lead_a.to_vec();
        shape.extend_from_slice(&[m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            rg,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
                trans_b,
            },
        ))
    }

    /// Batched `a @ b`; `b` is either `[k, n]` (shared) or has the same
    /// leading extents as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Batched `a @ b^T` with `b` stored as `[..., n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    /// `x[..., c] + bias[c]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [c] {
            return Err(shape_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let mut value = self.value(x).clone();
        let bv = self.value(bias).data().to_vec();
        for row in value.data_mut().chunks_mut(c) {
            for (v, &b) in row.iter_mut().zip(&bv) {
                *v += b;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, rg, Op::AddBias { x, bias }))
    }

    /// Adds a learnable scalar (`[1]`) to every element.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.shape(s) != [1] {
            return Err(shape_err("add_scalar", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).data()[0];
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v += sv);
        let rg = self.rg(&[x, s]);
        Ok(self.push(value, rg, Op::AddScalar { x, s }))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v *= factor);
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Scale { x, factor })
    }

    /// Multiplies each slice along the leading axis by a constant factor.
    pub fn scale_outer(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.first() != Some(&factors.len()) {
            return Err(shape_err("scale_outer", &shape, &[factors.len()]));
        }
        let mut value = self.value(x).clone();
        let inner = value.len() / factors.len().max(1);
        for (chunk, &f) in value.data_mut().chunks_mut(inner.max(1)).zip(&factors) {
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::ScaleOuter { x, factors }))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| shape_err("softmax", &shape, &[]))?;
        if n == 0 {
            return Err(shape_err("softmax", &shape, &[]));
        }
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(n) {
            softmax_row(row);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Softmax(x)))
    }

    /// Layer norm over the last axis with biased variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| shape_err("layer_norm", &shape, &[]))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("layer_norm", &shape, self.shape(gamma)));
        }
        if !(eps > T::ZERO) {
            return Err(Error::Contract("layer_norm eps must be positive".to_string()));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let rows = xv.len() / c;
        let cf = T::from_usize(c);
        let mut xhat = vec![T::ZERO; xv.len()];
        let mut rstd = vec![T::ZERO; rows];
        let mut out = vec![T::ZERO; xv.len()];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let rs = T::ONE / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[r * c + j] = xh;
                out[r * c + j] = gv[j] * xh + bv[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let mut slope = Vec::with_capacity(value.len());
        for v in value.data_mut() {
            let cdf = std_normal_cdf(*v);
            slope.push(cdf + *v * std_normal_pdf(*v));
            *v *= cdf;
        }
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Gelu { x, slope })
    }

    /// Channel-last convolution: `x[b, h, w, cin]`, `w[kh, kw, cin, cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sx[3] || stride == 0 {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        let (kh, kw, cout) = (sw[0], sw[1], sw[3]);
        if self.shape(bias) != [cout] {
            return Err(shape_err("conv2d", &sw, self.shape(bias)));
        }
        if sx[1] + 2 * pad < kh || sx[2] + 2 * pad < kw {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        let geom = ConvGeom {
            batch: sx[0],
            h: sx[1],
            w: sx[2],
            cin: sx[3],
            kh,
            kw,
            stride,
            pad,
            oh: (sx[1] + 2 * pad - kh) / stride + 1,
            ow: (sx[2] + 2 * pad - kw) / stride + 1,
        };
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let rows = geom.rows();
        let p = geom.patch_len();
        let mut out = vec![T::ZERO; rows * cout];
        let bv = self.value(bias).data();
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(bv);
        }
        kernels::gemm(rows, p, cout, &cols, false, self.value(w).data(), false, &mut out, true);
        self.macs += (rows * p * cout) as u64;
        let value = Tensor::new(&[geom.batch, geom.oh, geom.ow, cout], out)?;
        let rg = self.rg(&[x, w, bias]);
        let cols = if self.rg(&[w]) { cols } else { Vec::new() };
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                x,
                w,
                bias,
                geom,
                cols,
                cout,
            },
        ))
    }

    /// Depthwise `k x k` "same" convolution: `x[b, h, w, c]`, `w[k, k, c]`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 3 || sw[0] != sw[1] || sw[0] % 2 == 0 || sw[2] != sx[3] {
            return Err(shape_err("depthwise_conv", &sx, &sw));
        }
        if self.shape(bias) != [sx[3]] {
            return Err(shape_err("depthwise_conv", &sw, self.shape(bias)));
        }
        let dims = (sx[0], sx[1], sx[2], sx[3]);
        let k = sw[0];
        let mut out = vec![T::ZERO; self.value(x).len()];
        kernels::depthwise(
            self.value(x).data(),
            self.value(w).data(),
            self.value(bias).data(),
            dims,
            k,
            &mut out,
        );
        self.macs += (out.len() * k * k) as u64;
        let rg = self.rg(&[x, w, bias]);
        Ok(self.push(Tensor::new(&sx, out)?, rg, Op::Depthwise { x, w, bias, dims, k }))
    }

    /// `out[i] = x.flat[index[i]]`, reshaped to `shape`. Backs every permute,
    /// window partition and significance-ordered token gather.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x).data();
        if index.len() != shape.iter().product::<usize>() {
            return Err(shape_err("gather", shape, &[index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.len()) {
            return Err(shape_err("gather", &[bad], &[xv.len()]));
        }
        let data = index.iter().map(|&i| xv[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Gather { x, index }))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| shape_err("concat", &[], &[]))?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", &first, &[axis]));
        }
        let (outer, _, inner) = outer_inner(&first, axis);
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(shape_err("concat", &first, s));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&lens) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(&shape, data)?,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                lens,
                inner,
            },
        ))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(shape_err("mean_axis", &shape, &[axis]));
        }
        let (outer, len, inner) = outer_inner(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![T::ZERO; outer * inner];
        let lf = T::from_usize(len);
        for o in 0..outer {
            for l in 0..len {
                let src = &xv[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= lf);
        let mut oshape = shape.clone();
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(&oshape, out)?,
            rg,
            Op::MeanAxis {
                x,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || shape[1] < 2 {
            return Err(shape_err("cross_entropy", &shape, &[labels.len()]));
        }
        let k = shape[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::ZERO;
        for (row, &label) in probs.chunks_mut(k).zip(labels) {
            let max = row.iter().copied().fold(row[0], T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[label];
            softmax_row(row);
        }
        loss /= T::from_usize(labels.len());
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`; gradients accumulate on every
    /// node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract("backward needs a scalar loss".to_string()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::ONE]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gy) = self.nodes[idx].grad.take() else {
                continue;
            };
            let (before, rest) = self.nodes.split_at_mut(idx);
            let node = &rest[0];
            backprop(&node.op, &node.value, &gy, before);

            rest[0].grad = Some(gy);
        }
        Ok(())
    }
}

pub(crate) fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(row[0], T::max);
    let mut total = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn std_normal_cdf<T: Real>(x: T) -> T {
    T::from_f64(0.5) * (T::ONE + (x * T::from_f64(core::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn std_normal_pdf<T: Real>(x: T) -> T {
    (-(x * x) * T::from_f64(0.5)).exp() * T::from_f64(0.398_942_280_401_432_7)
}

/// Takes (or zero-creates) the gradient buffer of `v` if it needs one.
fn take<T: Real>(nodes: &mut [Node<T>], v: Var) -> Option<Vec<T>> {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(node.grad.take().unwrap_or_else(|| vec![T::ZERO; node.value.len()]))
}

fn put<T>(nodes: &mut [Node<T>], v: Var, g: Option<Vec<T>>) {
    if let Some(g) = g {
        nodes[v.0].grad = Some(g);
    }
}

fn add_into<T: Real>(nodes: &mut [Node<T>], v: Var, f: impl FnOnce(&mut [T])) {
    if let Some(mut g) = take(nodes, v) {
        f(&mut g);
        nodes[v.0].grad = Some(g);
    }
}

fn backprop<T: Real>(op: &Op<T>, out: &Tensor<T>, gy: &[T], nodes: &mut [Node<T>]) {
    match op {
        Op::Leaf => {}
        Op::Reshape(x) => add_into(nodes, *x, |g| {
            g.iter_mut().zip(gy).for_each(|(a, &b)| *a += b);
        }),
        &Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            shared_b,
            trans_b,
        } => {
            if let Some(mut ga) = take(nodes, a) {
                let bv = nodes[b.0].value.data();
                if shared_b {
                    kernels::gemm(batch * m, n, k, gy, false, bv, !trans_b, &mut ga, true);
                }
                for i in (0..batch).filter(|_| !shared_b) {
                    let bs = if shared_b { 0 } else { i * k * n };
                    kernels::gemm(
                        m,
                        n,
                        k,
                        &gy[i * m * n..(i + 1) * m * n],
                        false,
                        &bv[bs..bs + k * n],
                        !trans_b,
                        &mut ga[i * m * k..(i + 1) * m * k],
                        true,
                    );
                }
                put(nodes, a, Some(ga));
            }
            if let Some(mut gb) = take(nodes, b) {
                let av = nodes[a.0].value.data();
                if shared_b {
                    let rows = batch * m;
                    if trans_b {
                        kernels::gemm(n, rows, k, gy, true, av, false, &mut gb, true);
                    } else {
                        kernels::gemm(k, rows, n, av, true, gy, false, &mut gb, true);
                    }
                }
                for i in (0..batch).filter(|_| !shared_b) {
                    let bs = if shared_b { 0 } else { i * k * n };
                    let ai = &av[i * m * k..(i + 1) * m * k];
                    let gi = &gy[i * m * n..(i + 1) * m * n];
                    let dst = &mut gb[bs..bs + k * n];
                    if trans_b {
                        kernels::gemm(n, m, k, gi, true, ai, false, dst, true);
                    } else {
                        kernels::gemm(k, m, n, ai, true, gi, false, dst, true);
                    }
                }
                put(nodes, b, Some(gb));
            }
        }
        &Op::Add(a, b) => {
            for v in [a, b] {
                add_into(nodes, v, |g| g.iter_mut().zip(gy).for_each(|(d, &s)| *d += s));
            }
        }
        &Op::Mul(a, b) => {
            let av = nodes[a.0].value.data().to_vec();
            let bv = nodes[b.0].value.data().to_vec();
            add_into(nodes, a, |g| {
                for i in 0..g.len() {
                    g[i] += gy[i] * bv[i];
                }
            });
            add_into(nodes, b, |g| {
                for i in 0..g.len() {
                    g[i] += gy[i] * av[i];
                }
            });
        }
        &Op::AddBias { x, bias } => {
            add_into(nodes, x, |g| g.iter_mut().zip(gy).for_each(|(d, &s)| *d += s));
            add_into(nodes, bias, |g| {
                let c = g.len();
                for row in gy.chunks(c) {
                    g.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
                }
            });
        }
        &Op::AddScalar { x, s } => {
            add_into(nodes, x, |g| g.iter_mut().zip(gy).for_each(|(d, &v)| *d += v));
            add_into(nodes, s, |g| g[0] += gy.iter().copied().sum::<T>());
        }
        &Op::Scale { x, factor } => {
            add_into(nodes, x, |g| g.iter_mut().zip(gy).for_each(|(d, &v)| *d += v * factor));
        }
        Op::ScaleOuter { x, factors } => add_into(nodes, *x, |g| {
            let inner = g.len() / factors.len();
            for (i, (d, &v)) in g.iter_mut().zip(gy).enumerate() {
                *d += v * factors[i / inner];
            }
        }),
        &Op::Softmax(x) => {
            let n = *out.shape().last().expect("rank");
            let y = out.data();
            add_into(nodes, x, |g| {
                for ((grow, yrow), dyrow) in g.chunks_mut(n).zip(y.chunks(n)).zip(gy.chunks(n)) {
                    let dot: T = yrow.iter().zip(dyrow).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        grow[j] += yrow[j] * (dyrow[j] - dot);
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let c = rstd.len().max(1);
            let c = xhat.len() / c;
            let gv = nodes[gamma.0].value.data().to_vec();
            add_into(nodes, *gamma, |g| {
                for (xr, dr) in xhat.chunks(c).zip(gy.chunks(c)) {
                    for j in 0..c {
                        g[j] += dr[j] * xr[j];
                    }
                }
            });
            add_into(nodes, *beta, |g| {
                for dr in gy.chunks(c) {
                    g.iter_mut().zip(dr).for_each(|(d, &s)| *d += s);
                }
            });
            add_into(nodes, *x, |g| {
                let cf = T::from_usize(c);
                let mut dxhat = vec![T::ZERO; c];
                for (r, &rs) in rstd.iter().enumerate() {
                    let xr = &xhat[r * c..(r + 1) * c];
                    let dr = &gy[r * c..(r + 1) * c];
                    let mut mean_d = T::ZERO;
                    let mut mean_dx = T::ZERO;
                    for j in 0..c {
                        dxhat[j] = dr[j] * gv[j];
                        mean_d += dxhat[j];
                        mean_dx += dxhat[j] * xr[j];
                    }
                    mean_d /= cf;
                    mean_dx /= cf;
                    for j in 0..c {
                        g[r * c + j] += rs * (dxhat[j] - mean_d - xr[j] * mean_dx);
                    }
                }
            });
        }
        Op::Gelu { x, slope } => add_into(nodes, *x, |g| {
            for ((a, &b), &d) in g.iter_mut().zip(gy).zip(slope) {
                *a += b * d;
            }
        }),
        Op::Conv2d {
            x,
            w,
            bias,
            geom,
            cols,
            cout,
        } => {
            let (rows, p, cout) = (geom.rows(), geom.patch_len(), *cout);
            add_into(nodes, *bias, |g| {
                for row in gy.chunks(cout) {
                    g.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
                }
            });
            add_into(nodes, *w, |g| {
                kernels::gemm(p, rows, cout, cols, true, gy, false, g, true);
            });
            if nodes[x.0].requires_grad {
                let mut dcols = vec![T::ZERO; rows * p];
                kernels::gemm(rows, cout, p, gy, false, nodes[w.0].value.data(), true, &mut dcols, false);
                add_into(nodes, *x, |g| kernels::col2im(&dcols, geom, g));
            }
        }
        &Op::Depthwise { x, w, bias, dims, k } => {
            let c = dims.3;
            add_into(nodes, bias, |g| {
                for row in gy.chunks(c) {
                    g.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
                }
            });
            let mut gx = take(nodes, x);
            let mut gw = take(nodes, w);
            kernels::depthwise_backward(
                nodes[x.0].value.data(),
                nodes[w.0].value.data(),
                gy,
                dims,
                k,
                gx.as_deref_mut(),
                gw.as_deref_mut(),
            );
            put(nodes, x, gx);
            put(nodes, w, gw);
        }
        Op::Gather { x, index } => add_into(nodes, *x, |g| {
            for (&i, &v) in index.iter().zip(gy) {
                g[i] += v;
            }
        }),
        Op::Concat {
            parts,
            outer,
            lens,
            inner,
        } => {
            let total: usize = lens.iter().sum();
            let mut offset = 0;
            for (&p, &len) in parts.iter().zip(lens) {
                add_into(nodes, p, |g| {
                    for o in 0..*outer {
                        let src = &gy[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        let dst = &mut g[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                    }
                });
                offset += len;
            }
        }
        &Op::MeanAxis {
            x,
            outer,
            len,
            inner,
        } => {
            let lf = T::from_usize(len);
            add_into(nodes, x, |g| {
                for o in 0..outer {
                    let src = &gy[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        let dst = &mut g[(o * len + l) * inner..(o * len + l + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s / lf);
                    }
                }
            });
        }
        &Op::Sum(x) => add_into(nodes, x, |g| g.iter_mut().for_each(|d| *d += gy[0])),
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let k = probs.len() / labels.len();
            let scale = gy[0] / T::from_usize(labels.len());
            add_into(nodes, *logits, |g| {
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == label { T::ONE } else { T::ZERO };
                        g[r * k + j] += (probs[r * k + j] - onehot) * scale;
                    }
                }
            });
        }
    }
}

