//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every op appends one node holding its output value. `backward` walks the
//! tape in exact reverse append order, and every backward rule accumulates
//! into its inputs' gradient buffers. Leaf gradients persist across calls
//! until [`Graph::zero_grad`]; interior gradients are rebuilt on every call.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-supplied differentiable op. Used by gradient-check fixtures.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// One gradient buffer per input, each the length of that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

enum Op {
    Leaf,
    Binary { kind: BinaryKind, a: Var, b: Var },
    AddScalar(Var),
    MulScalar(Var, f64),
    ClampMin(Var, f64),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Sigmoid(Var),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Expand(Var),
    Reduce { x: Var, kind: ReduceKind, axes: Vec<usize>, argmax: Vec<usize> },
    Softmax { x: Var, axis: usize, scale: f64 },
    Concat { xs: Vec<Var>, axis: usize },
    IndexSelect { x: Var, indices: Vec<usize> },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    AdaptiveAvgPool { x: Var },
    UpsampleBilinear { x: Var },
    ResizeNearest { x: Var },
    L2NormChannels { x: Var, norms: Vec<f64>, eps: f64 },
    SegLoss { logits: Var, labels: Vec<u8>, probs: Vec<f64>, count: usize },
    AttrLoss { logits: Var, targets: Vec<f64>, present: Vec<bool>, pos_weight: Vec<f64>, count: usize },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
    tag: Option<&'static str>,
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor shaped like the value; zeros if none reached it.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape(), g.clone()).expect("grad length matches value"),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    /// Marks a node so its element count is reported by [`Graph::tagged_numel`].
    pub fn tag(&mut self, v: Var, tag: &'static str) {
        self.nodes[v.0].tag = Some(tag);
    }

    pub fn tagged_numel(&self, tag: &str) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.tag == Some(tag))
            .map(|n| n.value.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op, tag: None });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ---------------------------------------------------------------- elementwise

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)?;
        let (da, db) = (self.data(a), self.data(b));
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let out = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let stra = bcast_strides(&sa, &out_shape);
            let strb = bcast_strides(&sb, &out_shape);
            let mut out = vec![0.0; out_shape.iter().product()];
            walk2(&out_shape, &stra, &strb, |o, ia, ib| out[o] = f(da[ia], db[ib]));
            out
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&out_shape, out)?, rg, Op::Binary { kind, a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = map(self.value(a), |x| x + c);
        let rg = self.any_grad(&[a]);
        self.push(t, rg, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = map(self.value(a), |x| x * c);
        let rg = self.any_grad(&[a]);
        self.push(t, rg, Op::MulScalar(a, c))
    }

    pub fn clamp_min(&mut self, a: Var, min: f64) -> Var {
        let t = map(self.value(a), |x| x.max(min));
        let rg = self.any_grad(&[a]);
        self.push(t, rg, Op::ClampMin(a, min))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = map(self.value(a), f64::exp);
        let rg = self.any_grad(&[a]);
        self.push(t, rg, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = map(self.value(a), f64::ln);
        let rg = self.any_grad(&[a]);
        self.push(t, rg, Op::Log(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = map(self.value(a), |x| if x > 0.0 { x } else { 0.0 });
        let rg = self.any_grad(&[a]);
        self.push(t, rg, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = map(self.value(a), sigmoid);
        let rg = self.any_grad(&[a]);
        self.push(t, rg, Op::Sigmoid(a))
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, rg, Op::MatMul(a, b)))
    }

    /// Batched product of `[B, M, K]` and `[B, K, N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape(format!("bmm {sa:?} x {sb:?}")));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..bs {
            gemm_nn(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&[bs, m, n], out)?, rg, Op::Bmm(a, b)))
    }

    // ---------------------------------------------------------------- shape ops

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(t, rg, Op::Reshape(a)))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!("invalid permutation {perm:?} for {s:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let in_strides = contiguous_strides(&s);
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let zeros = vec![0; s.len()];
        let d = self.data(a);
        let mut out = Vec::with_capacity(d.len());
        walk2(&out_shape, &src_strides, &zeros, |_, ia, _| out.push(d[ia]));
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(&out_shape, out)?, rg, Op::Permute(a, perm.to_vec())))
    }

    /// Broadcasts `a` to `shape` (size-1 axes stretch; missing leading axes are added).
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if broadcast_shape(shape, &s)? != shape {
            return Err(Error::shape(format!("cannot expand {s:?} to {shape:?}")));
        }
        let strides = bcast_strides(&s, shape);
        let zeros = vec![0; shape.len()];
        let d = self.data(a);
        let mut out = Vec::with_capacity(shape.iter().product());
        walk2(shape, &strides, &zeros, |_, ia, _| out.push(d[ia]));
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Expand(a)))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::shape("concat of nothing"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::shape(format!("concat axis {axis} for rank {}", first.len())));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let same = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::shape(format!("concat {s:?} with {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let n = self.shape(x)[axis] * inner;
                out.extend_from_slice(&self.data(x)[o * n..(o + 1) * n]);
            }
        }
        let rg = self.any_grad(xs);
        Ok(self.push(Tensor::new(&out_shape, out)?, rg, Op::Concat { xs: xs.to_vec(), axis }))
    }

    /// Gathers rows along axis 0.
    pub fn index_select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if indices.is_empty() || indices.iter().any(|&i| i >= s[0]) {
            return Err(Error::shape(format!("index_select {indices:?} on leading dim {}", s[0])));
        }
        let row: usize = s[1..].iter().product();
        let d = self.data(a);
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&d[i * row..(i + 1) * row]);
        }
        let mut out_shape = s.clone();
        out_shape[0] = indices.len();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(&out_shape, out)?, rg, Op::IndexSelect { x: a, indices: indices.to_vec() }))
    }

    // ---------------------------------------------------------------- reductions

    /// Reduces over `axes`, keeping them as size-1 dimensions when `keepdim`.
    /// An empty axis set is the identity.
    pub fn reduce(&mut self, kind: ReduceKind, a: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.iter().any(|&ax| ax >= s.len()) {
            return Err(Error::shape(format!("reduce axes {axes:?} for {s:?}")));
        }
        let kept: Vec<usize> = s.iter().enumerate().map(|(i, &d)| if axes.contains(&i) { 1 } else { d }).collect();
        let out_numel: usize = kept.iter().product();
        let out_strides = bcast_strides(&kept, &s);
        let in_strides = contiguous_strides(&s);
        let d = self.data(a);
        let count: usize = axes.iter().map(|&ax| s[ax]).product();
        let (mut out, mut argmax) = (vec![0.0; out_numel], Vec::new());
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                walk2(&s, &in_strides, &out_strides, |_, ia, io| out[io] += d[ia]);
                if kind == ReduceKind::Mean {
                    for v in &mut out {
                        *v /= count as f64;
                    }
                }
            }
            ReduceKind::Max => {
                out.fill(f64::NEG_INFINITY);
                argmax = vec![usize::MAX; out_numel];
                walk2(&s, &in_strides, &out_strides, |_, ia, io| {
                    if argmax[io] == usize::MAX || d[ia] > out[io] {
                        out[io] = d[ia];
                        argmax[io] = ia;
                    }
                });
            }
        }
        let out_shape = if keepdim {
            kept
        } else {
            let mut v: Vec<usize> = s.iter().enumerate().filter(|(i, _)| !axes.contains(i)).map(|(_, &d)| d).collect();
            if v.is_empty() {
                v.push(1);
            }
            v
        };
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(&out_shape, out)?, rg, Op::Reduce { x: a, kind, axes, argmax }))
    }

    pub fn sum(&mut self, a: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(ReduceKind::Sum, a, axes, keepdim)
    }

    pub fn mean(&mut self, a: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(ReduceKind::Mean, a, axes, keepdim)
    }

    pub fn max(&mut self, a: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(ReduceKind::Max, a, axes, keepdim)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.sum(a, &axes, false)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_scaled(a, axis, 1.0)
    }

    /// `scale * softmax(a)` along `axis`, evaluated as `(scale * e_i) / sum(e)`
    /// so that a constant input with `scale == len(axis)` yields exactly 1.
    pub fn softmax_scaled(&mut self, a: Var, axis: usize, scale: f64) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::shape(format!("softmax axis {axis} for {s:?}")));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let d = self.data(a);
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| d[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (d[idx(j)] - m).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[idx(j)] = scale * out[idx(j)] / z;
                }
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(&s, out)?, rg, Op::Softmax { x: a, axis, scale }))
    }

    // ---------------------------------------------------------------- conv / pooling

    /// Direct cross-correlation of `[B, Ci, H, W]` with `[Co, Ci, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] {
            return Err(Error::shape(format!("conv2d input {sx:?} weight {sw:?}")));
        }
        if sx[1] != sw[1] {
            return Err(Error::shape(format!("conv2d channel mismatch: input {} weight {}", sx[1], sw[1])));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d stride must be positive"));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape(format!("conv2d bias {:?} for {} outputs", self.shape(b), sw[0])));
            }
        }
        let geo = ConvGeom::new(&sx, &sw, stride, pad)?;
        let out = conv2d_forward(self.data(x), self.data(w), b.map(|b| self.data(b)), &geo);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.any_grad(&inputs);
        let shape = [geo.b, geo.co, geo.ho, geo.wo];
        Ok(self.push(Tensor::new(&shape, out)?, rg, Op::Conv2d { x, w, b, stride, pad }))
    }

    /// Training-mode batch norm over `[B, C, H, W]`: normalizes each channel with
    /// its biased batch statistics, which are returned for running-stat updates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let s = self.shape(x).to_vec();
        check_bn_shapes(&s, self.shape(gamma), self.shape(beta))?;
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let n = b * hw;
        if n < 2 {
            return Err(Error::DegenerateBatch(format!("batch norm over {n} value(s) per channel")));
        }
        let d = self.data(x);
        let (mut mean, mut var) = (vec![0.0; c], vec![0.0; c]);
        for ch in 0..c {
            let mut acc = 0.0;
            for bi in 0..b {
                acc += d[(bi * c + ch) * hw..(bi * c + ch + 1) * hw].iter().sum::<f64>();
            }
            mean[ch] = acc / n as f64;
            let mut acc = 0.0;
            for bi in 0..b {
                acc += d[(bi * c + ch) * hw..(bi * c + ch + 1) * hw]
                    .iter()
                    .map(|v| (v - mean[ch]) * (v - mean[ch]))
                    .sum::<f64>();
            }
            var[ch] = acc / n as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let v = self.bn_apply(x, gamma, beta, &mean, inv_std, true)?;
        Ok((v, BatchStats { mean, var }))
    }

    /// Eval-mode batch norm using fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check_bn_shapes(&s, self.shape(gamma), self.shape(beta))?;
        if running_mean.len() != s[1] || running_var.len() != s[1] {
            return Err(Error::shape("running statistics length differs from channel count"));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.bn_apply(x, gamma, beta, running_mean, inv_std, false)
    }

    fn bn_apply(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: Vec<f64>, batch_stats: bool) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let (d, g, bt) = (self.data(x), self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; d.len()];
        let mut out = vec![0.0; d.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * hw;
                for i in base..base + hw {
                    xhat[i] = (d[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(Tensor::new(&s, out)?, rg, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats }))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || stride == 0 || k > s[2] || k > s[3] {
            return Err(Error::shape(format!("max_pool2d window {k} on {s:?}")));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let d = self.data(x);
        let mut out = vec![0.0; b * c * ho * wo];
        let mut argmax = vec![0; out.len()];
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..k {
                        for kx in 0..k {
                            let i = base + (oy * stride + ky) * w + ox * stride + kx;
                            if d[i] > d[best] {
                                best = i;
                            }
                        }
                    }
                    let o = (plane * ho + oy) * wo + ox;
                    out[o] = d[best];
                    argmax[o] = best;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&[b, c, ho, wo], out)?, rg, Op::MaxPool2d { x, argmax }))
    }

    /// Average pooling of `[B, C, H, W]` onto an `out_h x out_w` grid whose cell
    /// `i` covers rows `floor(i*H/out_h) .. ceil((i+1)*H/out_h)`.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || out_h == 0 || out_w == 0 || out_h > s[2] || out_w > s[3] {
            return Err(Error::shape(format!("adaptive pool to {out_h}x{out_w} on {s:?}")));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let d = self.data(x);
        let mut out = vec![0.0; b * c * out_h * out_w];
        for plane in 0..b * c {
            for oy in 0..out_h {
                let (y0, y1) = bin(oy, h, out_h);
                for ox in 0..out_w {
                    let (x0, x1) = bin(ox, w, out_w);
                    let mut acc = 0.0;
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            acc += d[plane * h * w + yy * w + xx];
                        }
                    }
                    out[(plane * out_h + oy) * out_w + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&[b, c, out_h, out_w], out)?, rg, Op::AdaptiveAvgPool { x }))
    }

    /// Bilinear resize of `[B, C, h, w]` with corner-anchored alignment
    /// (`src = dst * (in - 1) / (out - 1)`).
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || out_h == 0 || out_w == 0 {
            return Err(Error::shape(format!("bilinear resize of {s:?} to {out_h}x{out_w}")));
        }
        let (ry, rx) = (bilinear_taps(s[2], out_h), bilinear_taps(s[3], out_w));
        let (h, w) = (s[2], s[3]);
        let d = self.data(x);
        let mut out = vec![0.0; s[0] * s[1] * out_h * out_w];
        for plane in 0..s[0] * s[1] {
            let src = &d[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
            for (oy, &(y0, y1, fy)) in ry.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in rx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&[s[0], s[1], out_h, out_w], out)?, rg, Op::UpsampleBilinear { x }))
    }

    /// Nearest-neighbour resize: `src = floor(dst * in / out)`.
    pub fn resize_nearest(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || out_h == 0 || out_w == 0 {
            return Err(Error::shape(format!("nearest resize of {s:?} to {out_h}x{out_w}")));
        }
        let t = resize_nearest_tensor(self.value(x), out_h, out_w);
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, rg, Op::ResizeNearest { x }))
    }

    /// Divides each `[B, C, H, W]` position's channel vector by `max(||v||_2, eps)`.
    pub fn l2_normalize_channels(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape(format!("l2 normalization expects rank 4, got {s:?}")));
        }
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let d = self.data(x);
        let mut norms = vec![0.0; b * hw];
        for bi in 0..b {
            for ch in 0..c {
                let row = &d[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
                for (n, v) in norms[bi * hw..(bi + 1) * hw].iter_mut().zip(row) {
                    *n += v * v;
                }
            }
        }
        for n in &mut norms {
            *n = n.sqrt();
        }
        let mut out = vec![0.0; d.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * hw;
                for p in 0..hw {
                    out[base + p] = d[base + p] / norms[bi * hw + p].max(eps);
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&s, out)?, rg, Op::L2NormChannels { x, norms, eps }))
    }

    // ---------------------------------------------------------------- losses

    /// Mean per-pixel softmax cross entropy over `[B, N, H, W]` logits.
    /// Label 255 marks an ignored pixel.
    pub fn seg_loss(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 4 || labels.len() != s[0] * s[2] * s[3] {
            return Err(Error::shape(format!("seg loss logits {s:?} with {} labels", labels.len())));
        }
        let (b, n, hw) = (s[0], s[1], s[2] * s[3]);
        let d = self.data(logits);
        let mut probs = vec![0.0; d.len()];
        let (mut total, mut count) = (0.0, 0usize);
        for bi in 0..b {
            for p in 0..hw {
                let label = labels[bi * hw + p];
                let idx = |k: usize| (bi * n + k) * hw + p;
                let m = (0..n).map(|k| d[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..n).map(|k| (d[idx(k)] - m).exp()).sum();
                for k in 0..n {
                    probs[idx(k)] = (d[idx(k)] - m).exp() / z;
                }
                if label == IGNORE_LABEL {
                    continue;
                }
                if label as usize >= n {
                    return Err(Error::LabelRange { label, classes: n });
                }
                total += m + z.ln() - d[idx(label as usize)];
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptyLoss("every pixel carries the ignore label"));
        }
        let rg = self.any_grad(&[logits]);
        let op = Op::SegLoss { logits, labels: labels.to_vec(), probs, count };
        Ok(self.push(Tensor::scalar(total / count as f64), rg, op))
    }

    /// Mean over present entries of the positively weighted sigmoid cross entropy
    /// `w*y*softplus(-z) + (1-y)*softplus(z)` for `[B, N]` logits.
    pub fn attr_loss(&mut self, logits: Var, targets: &[f64], present: &[bool], pos_weight: &[f64]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || targets.len() != s[0] * s[1] || present.len() != targets.len() || pos_weight.len() != s[1] {
            return Err(Error::shape(format!(
                "attr loss logits {s:?}, {} targets, {} mask entries, {} weights",
                targets.len(),
                present.len(),
                pos_weight.len()
            )));
        }
        let d = self.data(logits);
        let (mut total, mut count) = (0.0, 0usize);
        for (i, &z) in d.iter().enumerate() {
            if !present[i] {
                continue;
            }
            let y = targets[i];
            let w = pos_weight[i % s[1]];
            total += w * y * softplus(-z) + (1.0 - y) * softplus(z);
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyLoss("no attribute label is present"));
        }
        let rg = self.any_grad(&[logits]);
        let op = Op::AttrLoss {
            logits,
            targets: targets.to_vec(),
            present: present.to_vec(),
            pos_weight: pos_weight.to_vec(),
            count,
        };
        Ok(self.push(Tensor::scalar(total / count as f64), rg, op))
    }

    pub fn custom(&mut self, inputs: &[Var], op: Box<dyn CustomOp>) -> Result<Var> {
        let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = op.forward(&vals)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(out, rg, Op::Custom { inputs: inputs.to_vec(), op }))
    }

    // ---------------------------------------------------------------- backward

    /// Back-propagates from a one-element `loss`. Leaf gradients accumulate
    /// across calls; interior gradients are recomputed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!("backward needs a scalar loss, got {:?}", self.shape(loss))));
        }
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        accumulate(&mut self.nodes[loss.0].grad, 1, |g| g[0] += 1.0);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let contribs = self.backward_node(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, cg) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                let n = cg.len();
                accumulate(&mut self.nodes[v.0].grad, n, |acc| {
                    for (a, c) in acc.iter_mut().zip(&cg) {
                        *a += c;
                    }
                });
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::Binary { kind, a, b } => {
                let (a, b) = (*a, *b);
                let out_shape = node.value.shape();
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (da, db) = (self.data(a), self.data(b));
                let mut ga = vec![0.0; da.len()];
                let mut gb = vec![0.0; db.len()];
                let stra = bcast_strides(sa, out_shape);
                let strb = bcast_strides(sb, out_shape);
                walk2(out_shape, &stra, &strb, |o, ia, ib| {
                    let (x, y) = (da[ia], db[ib]);
                    let (dx, dy) = match kind {
                        BinaryKind::Add => (1.0, 1.0),
                        BinaryKind::Sub => (1.0, -1.0),
                        BinaryKind::Mul => (y, x),
                        BinaryKind::Div => (1.0 / y, -x / (y * y)),
                    };
                    ga[ia] += g[o] * dx;
                    gb[ib] += g[o] * dy;
                });
                let mut v = Vec::new();
                if needs(a) {
                    v.push((a, ga));
                }
                if needs(b) {
                    v.push((b, gb));
                }
                v
            }
            Op::AddScalar(a) => vec![(*a, g.to_vec())],
            Op::MulScalar(a, c) => vec![(*a, g.iter().map(|x| x * c).collect())],
            Op::ClampMin(a, m) => {
                let d = self.data(*a);
                vec![(*a, g.iter().zip(d).map(|(g, &x)| if x > *m { *g } else { 0.0 }).collect())]
            }
            Op::Exp(a) => vec![(*a, g.iter().zip(out).map(|(g, y)| g * y).collect())],
            Op::Log(a) => vec![(*a, g.iter().zip(self.data(*a)).map(|(g, x)| g / x).collect())],
            Op::Relu(a) => {
                vec![(*a, g.iter().zip(self.data(*a)).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect())]
            }
            Op::Sigmoid(a) => vec![(*a, g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect())],
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                let mut v = Vec::new();
                if needs(a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(g, self.data(b), &mut ga, m, n, k);
                    v.push((a, ga));
                }
                if needs(b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(self.data(a), g, &mut gb, m, k, n);
                    v.push((b, gb));
                }
                v
            }
            Op::Bmm(a, b) => {
                let (a, b) = (*a, *b);
                let (bs, m, k) = (self.shape(a)[0], self.shape(a)[1], self.shape(a)[2]);
                let n = self.shape(b)[2];
                let (da, db) = (self.data(a), self.data(b));
                let mut ga = vec![0.0; bs * m * k];
                let mut gb = vec![0.0; bs * k * n];
                for i in 0..bs {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    gemm_nt(gi, &db[i * k * n..(i + 1) * k * n], &mut ga[i * m * k..(i + 1) * m * k], m, n, k);
                    gemm_tn(&da[i * m * k..(i + 1) * m * k], gi, &mut gb[i * k * n..(i + 1) * k * n], m, k, n);
                }
                let mut v = Vec::new();
                if needs(a) {
                    v.push((a, ga));
                }
                if needs(b) {
                    v.push((b, gb));
                }
                v
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Permute(a, perm) => {
                let s = self.shape(*a);
                let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
                let in_strides = contiguous_strides(s);
                let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                let zeros = vec![0; s.len()];
                let mut ga = vec![0.0; g.len()];
                walk2(&out_shape, &src, &zeros, |o, ia, _| ga[ia] = g[o]);
                vec![(*a, ga)]
            }
            Op::Expand(a) => {
                let s = self.shape(*a);
                let out_shape = node.value.shape();
                let strides = bcast_strides(s, out_shape);
                let zeros = vec![0; out_shape.len()];
                let mut ga = vec![0.0; self.data(*a).len()];
                walk2(out_shape, &strides, &zeros, |o, ia, _| ga[ia] += g[o]);
                vec![(*a, ga)]
            }
            Op::Concat { xs, axis } => {
                let first = self.shape(xs[0]);
                let outer: usize = first[..*axis].iter().product();
                let inner: usize = first[axis + 1..].iter().product();
                let mut grads: Vec<Vec<f64>> = xs.iter().map(|&x| Vec::with_capacity(self.data(x).len())).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (j, &x) in xs.iter().enumerate() {
                        let n = self.shape(x)[*axis] * inner;
                        grads[j].extend_from_slice(&g[off..off + n]);
                        off += n;
                    }
                }
                xs.iter().copied().zip(grads).collect()
            }
            Op::IndexSelect { x, indices } => {
                let row: usize = self.shape(*x)[1..].iter().product();
                let mut gx = vec![0.0; self.data(*x).len()];
                for (j, &i) in indices.iter().enumerate() {
                    for (a, b) in gx[i * row..(i + 1) * row].iter_mut().zip(&g[j * row..(j + 1) * row]) {
                        *a += b;
                    }
                }
                vec![(*x, gx)]
            }
            Op::Reduce { x, kind, axes, argmax } => {
                let s = self.shape(*x);
                let mut gx = vec![0.0; self.data(*x).len()];
                match kind {
                    ReduceKind::Max => {
                        for (o, &ia) in argmax.iter().enumerate() {
                            gx[ia] += g[o];
                        }
                    }
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let kept: Vec<usize> =
                            s.iter().enumerate().map(|(i, &d)| if axes.contains(&i) { 1 } else { d }).collect();
                        let out_strides = bcast_strides(&kept, s);
                        let in_strides = contiguous_strides(s);
                        let scale = if *kind == ReduceKind::Mean {
                            1.0 / axes.iter().map(|&ax| s[ax]).product::<usize>() as f64
                        } else {
                            1.0
                        };
                        walk2(s, &in_strides, &out_strides, |_, ia, io| gx[ia] = g[io] * scale);
                    }
                }
                vec![(*x, gx)]
            }
            Op::Softmax { x, axis, scale } => {
                let s = self.shape(*x);
                let (outer, n, inner) = split_axis(s, *axis);
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g[idx(j)] * out[idx(j)] / scale).sum();
                        for j in 0..n {
                            gx[idx(j)] = out[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let geo = ConvGeom::new(self.shape(*x), self.shape(*w), *stride, *pad).expect("validated in forward");
                let (gx, gw, gb) = conv2d_backward(self.data(*x), self.data(*w), g, &geo, needs(*x));
                let mut v = vec![(*w, gw)];
                if needs(*x) {
                    v.push((*x, gx));
                }
                if let Some(b) = b {
                    v.push((*b, gb));
                }
                v
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let s = self.shape(*x);
                let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                let gm = self.data(*gamma);
                let (mut ggamma, mut gbeta) = (vec![0.0; c], vec![0.0; c]);
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        for i in base..base + hw {
                            ggamma[ch] += g[i] * xhat[i];
                            gbeta[ch] += g[i];
                        }
                    }
                }
                let mut gx = vec![0.0; g.len()];
                if *batch_stats {
                    let n = (b * hw) as f64;
                    for ch in 0..c {
                        // sum(dxhat) = gamma * sum(g); sum(dxhat * xhat) = gamma * dgamma
                        let sum_d = gm[ch] * gbeta[ch];
                        let sum_dx = gm[ch] * ggamma[ch];
                        for bi in 0..b {
                            let base = (bi * c + ch) * hw;
                            for i in base..base + hw {
                                let dxhat = g[i] * gm[ch];
                                gx[i] = inv_std[ch] / n * (n * dxhat - sum_d - xhat[i] * sum_dx);
                            }
                        }
                    }
                } else {
                    for bi in 0..b {
                        for ch in 0..c {
                            let base = (bi * c + ch) * hw;
                            for i in base..base + hw {
                                gx[i] = g[i] * gm[ch] * inv_std[ch];
                            }
                        }
                    }
                }
                vec![(*x, gx), (*gamma, ggamma), (*beta, gbeta)]
            }
            Op::MaxPool2d { x, argmax } => {
                let mut gx = vec![0.0; self.data(*x).len()];
                for (o, &i) in argmax.iter().enumerate() {
                    gx[i] += g[o];
                }
                vec![(*x, gx)]
            }
            Op::AdaptiveAvgPool { x } => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
                let mut gx = vec![0.0; self.data(*x).len()];
                for plane in 0..s[0] * s[1] {
                    for oy in 0..oh {
                        let (y0, y1) = bin(oy, h, oh);
                        for ox in 0..ow {
                            let (x0, x1) = bin(ox, w, ow);
                            let share = g[(plane * oh + oy) * ow + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    gx[plane * h * w + yy * w + xx] += share;
                                }
                            }
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::UpsampleBilinear { x } => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
                let (ry, rx) = (bilinear_taps(h, oh), bilinear_taps(w, ow));
                let mut gx = vec![0.0; self.data(*x).len()];
                for plane in 0..s[0] * s[1] {
                    let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                    let src = &g[plane * oh * ow..(plane + 1) * oh * ow];
                    for (oy, &(y0, y1, fy)) in ry.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in rx.iter().enumerate() {
                            let gv = src[oy * ow + ox];
                            dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                            dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                            dst[y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::ResizeNearest { x } => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
                let mut gx = vec![0.0; self.data(*x).len()];
                for plane in 0..s[0] * s[1] {
                    for oy in 0..oh {
                        let sy = oy * h / oh;
                        for ox in 0..ow {
                            let sx = ox * w / ow;
                            gx[plane * h * w + sy * w + sx] += g[(plane * oh + oy) * ow + ox];
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::L2NormChannels { x, norms, eps } => {
                let s = self.shape(*x);
                let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut dots = vec![0.0; b * hw];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        for p in 0..hw {
                            dots[bi * hw + p] += out[base + p] * g[base + p];
                        }
                    }
                }
                let mut gx = vec![0.0; g.len()];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        for p in 0..hw {
                            let n = norms[bi * hw + p];
                            gx[base + p] = if n > *eps {
                                (g[base + p] - out[base + p] * dots[bi * hw + p]) / n
                            } else {
                                g[base + p] / eps
                            };
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::SegLoss { logits, labels, probs, count } => {
                let s = self.shape(*logits);
                let (b, n, hw) = (s[0], s[1], s[2] * s[3]);
                let scale = g[0] / *count as f64;
                let mut gx = vec![0.0; probs.len()];
                for bi in 0..b {
                    for p in 0..hw {
                        let label = labels[bi * hw + p];
                        if label == IGNORE_LABEL {
                            continue;
                        }
                        for k in 0..n {
                            let i = (bi * n + k) * hw + p;
                            let onehot = if k == label as usize { 1.0 } else { 0.0 };
                            gx[i] = (probs[i] - onehot) * scale;
                        }
                    }
                }
                vec![(*logits, gx)]
            }
            Op::AttrLoss { logits, targets, present, pos_weight, count } => {
                let na = pos_weight.len();
                let scale = g[0] / *count as f64;
                let gx = self
                    .data(*logits)
                    .iter()
                    .enumerate()
                    .map(|(i, &z)| {
                        if !present[i] {
                            return 0.0;
                        }
                        let (y, w) = (targets[i], pos_weight[i % na]);
                        let sz = sigmoid(z);
                        (w * y * (sz - 1.0) + (1.0 - y) * sz) * scale
                    })
                    .collect();
                vec![(*logits, gx)]
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let grads = op.backward(&vals, &node.value, g);
                inputs.iter().copied().zip(grads).collect()
            }
        }
    }
}

pub const IGNORE_LABEL: u8 = 255;

fn accumulate(slot: &mut Option<Vec<f64>>, n: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; n]);
    f(buf);
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape")
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` computed as `max(x, 0) + ln(1 + e^{-|x|})`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn check_bn_shapes(s: &[usize], gamma: &[usize], beta: &[usize]) -> Result<()> {
    if s.len() != 4 || gamma != [s[1]] || beta != [s[1]] {
        return Err(Error::shape(format!("batch norm input {s:?} with gamma {gamma:?} beta {beta:?}")));
    }
    Ok(())
}

fn bin(i: usize, len: usize, bins: usize) -> (usize, usize) {
    (i * len / bins, ((i + 1) * len).div_ceil(bins))
}

/// For each output coordinate: (lower source index, upper source index, upper weight).
fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            if out_len == 1 || in_len == 1 {
                return (0, 0, 0.0);
            }
            let src = o as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn resize_nearest_tensor(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let d = x.data();
    let mut out = Vec::with_capacity(s[0] * s[1] * out_h * out_w);
    for plane in 0..s[0] * s[1] {
        for oy in 0..out_h {
            let sy = oy * h / out_h;
            for ox in 0..out_w {
                out.push(d[plane * h * w + sy * w + ox * w / out_w]);
            }
        }
    }
    Tensor::new(&[s[0], s[1], out_h, out_w], out).expect("resize shape")
}

fn split_axis(s: &[usize], axis: usize) -> (usize, usize, usize) {
    (s[..axis].iter().product(), s[axis], s[axis + 1..].iter().product())
}

fn contiguous_strides(s: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; s.len()];
    let mut acc = 1;
    for i in (0..s.len()).rev() {
        strides[i] = acc;
        acc *= s[i];
    }
    strides
}

/// Numpy-style broadcast of two shapes (shorter shape padded with leading 1s).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let get = |s: &[usize], i: usize| if i + s.len() < n { 1 } else { s[i + s.len() - n] };
    (0..n)
        .map(|i| match (get(a, i), get(b, i)) {
            (x, y) if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(Error::shape(format!("shapes {a:?} and {b:?} do not broadcast"))),
        })
        .collect()
}

fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let pad = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + pad] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// Visits every index of `shape` in row-major order, passing the flat output
/// index and the two operand offsets implied by their strides.
fn walk2(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = shape.len();
    let total: usize = shape.iter().product();
    if total == 0 {
        return;
    }
    let inner = shape[n - 1];
    let (ia_step, ib_step) = (sa[n - 1], sb[n - 1]);
    let mut idx = vec![0usize; n];
    let (mut ia, mut ib, mut o) = (0usize, 0usize, 0usize);
    while o < total {
        for j in 0..inner {
            f(o + j, ia + j * ia_step, ib + j * ib_step);
        }
        o += inner;
        let mut d = n - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            ia -= sa[d] * shape[d];
            ib -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

/// out[m,n] += a[m,k] * b[k,n]
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,k] += g[m,n] * b[k,n]^T
fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] += gr.iter().zip(&b[p * n..(p + 1) * n]).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// out[k,n] += a[m,k]^T * g[m,n]
fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, gv) in out[p * n..(p + 1) * n].iter_mut().zip(gr) {
                *o += av * gv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    b: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(sx: &[usize], sw: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (h, w, k) = (sx[2], sx[3], sw[2]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(format!("conv2d kernel {k} larger than padded input {h}x{w} (pad {pad})")));
        }
        Ok(ConvGeom {
            b: sx[0],
            ci: sx[1],
            h,
            w,
            co: sw[0],
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    /// Output positions `o` along an axis with `0 <= o*stride + off < in_len`.
    fn valid(&self, out_len: usize, in_len: usize, off: isize) -> (usize, usize) {
        let s = self.stride as isize;
        let start = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let last = in_len as isize - 1 - off;
        let end = if last < 0 { 0 } else { (last / s + 1).min(out_len as isize) };
        (start as usize, (end.max(start)) as usize)
    }
}

fn conv2d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, geo: &ConvGeom) -> Vec<f64> {
    let ConvGeom { b, ci, h, w: wd, co, k, stride, pad, ho, wo } = *geo;
    let mut out = vec![0.0; b * co * ho * wo];
    for bi in 0..b {
        for oc in 0..co {
            let plane = &mut out[(bi * co + oc) * ho * wo..(bi * co + oc + 1) * ho * wo];
            if let Some(bias) = bias {
                plane.fill(bias[oc]);
            }
            for ic in 0..ci {
                let src = &x[(bi * ci + ic) * h * wd..(bi * ci + ic + 1) * h * wd];
                for ky in 0..k {
                    let (oy0, oy1) = geo.valid(ho, h, ky as isize - pad as isize);
                    for kx in 0..k {
                        let wv = w[((oc * ci + ic) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let xoff = kx as isize - pad as isize;
                        let (ox0, ox1) = geo.valid(wo, wd, xoff);
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - pad;
                            let orow = &mut plane[oy * wo + ox0..oy * wo + ox1];
                            let irow = &src[iy * wd..(iy + 1) * wd];
                            if stride == 1 {
                                let ix0 = (ox0 as isize + xoff) as usize;
                                for (o, i) in orow.iter_mut().zip(&irow[ix0..ix0 + (ox1 - ox0)]) {
                                    *o += wv * i;
                                }
                            } else {
                                for (j, o) in orow.iter_mut().enumerate() {
                                    let ix = ((ox0 + j) * stride) as isize + xoff;
                                    *o += wv * irow[ix as usize];
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

fn conv2d_backward(x: &[f64], w: &[f64], g: &[f64], geo: &ConvGeom, need_x: bool) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let ConvGeom { b, ci, h, w: wd, co, k, stride, pad, ho, wo } = *geo;
    let mut gx = if need_x { vec![0.0; x.len()] } else { Vec::new() };
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; co];
    for bi in 0..b {
        for oc in 0..co {
            let gplane = &g[(bi * co + oc) * ho * wo..(bi * co + oc + 1) * ho * wo];
            gb[oc] += gplane.iter().sum::<f64>();
            for ic in 0..ci {
                let xoff_plane = (bi * ci + ic) * h * wd;
                let src = &x[xoff_plane..xoff_plane + h * wd];
                for ky in 0..k {
                    let (oy0, oy1) = geo.valid(ho, h, ky as isize - pad as isize);
                    for kx in 0..k {
                        let widx = ((oc * ci + ic) * k + ky) * k + kx;
                        let wv = w[widx];
                        let xoff = kx as isize - pad as isize;
                        let (ox0, ox1) = geo.valid(wo, wd, xoff);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - pad;
                            let grow = &gplane[oy * wo + ox0..oy * wo + ox1];
                            if stride == 1 {
                                let ix0 = (ox0 as isize + xoff) as usize + iy * wd;
                                let n = ox1 - ox0;
                                acc += grow.iter().zip(&src[ix0..ix0 + n]).map(|(a, b)| a * b).sum::<f64>();
                                if need_x {
                                    let dst = &mut gx[xoff_plane + ix0..xoff_plane + ix0 + n];
                                    for (d, gv) in dst.iter_mut().zip(grow) {
                                        *d += wv * gv;
                                    }
                                }
                            } else {
                                for (j, gv) in grow.iter().enumerate() {
                                    let ix = (((ox0 + j) * stride) as isize + xoff) as usize + iy * wd;
                                    acc += gv * src[ix];
                                    if need_x {
                                        gx[xoff_plane + ix] += wv * gv;
                                    }
                                }
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_ones_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[1.5, -2.0, 0.25]));
        let ones = g.constant(Tensor::ones(&[3]));
        let y = g.mul(x, ones).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn mul_backward_routes_other_operand() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[2.0, 5.0]));
        let y = g.param(t(&[2], &[3.0, 7.0]));
        let p = g.mul(x, y).unwrap();
        let l = g.sum_all(p).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, 7.0]);
        assert_eq!(g.grad(y).unwrap(), &[2.0, 5.0]);
    }

    #[test]
    fn incompatible_shapes_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones(&[2, 3]));
        let b = g.constant(Tensor::ones(&[2, 2]));
        assert!(matches!(g.add(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn trailing_size_one_broadcast_reduces_in_backward() {
        let mut g = Graph::new();
        let a = g.param(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.param(t(&[2, 1], &[10.0, 20.0]));
        let c = g.mul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[10.0, 20.0, 30.0, 80.0, 100.0, 120.0]);
        let l = g.sum_all(c).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[6.0, 15.0]);
        assert_eq!(g.grad(a).unwrap(), &[10.0, 10.0, 10.0, 20.0, 20.0, 20.0]);
    }

    #[test]
    fn matmul_cases() {
        let mut g = Graph::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
        let r = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let q = g.matmul(r, c).unwrap();
        assert_eq!(g.value(q).data(), &[11.0]);
        assert!(matches!(g.matmul(r, r), Err(Error::Shape(_))));
    }

    #[test]
    fn reductions() {
        let mut g = Graph::new();
        let v = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let s = g.sum_all(v).unwrap();
        assert_eq!(g.value(s).item(), 6.0);
        let m = g.constant(t(&[2, 2], &[1.0, 5.0, 7.0, 2.0]));
        let mx = g.max(m, &[1], false).unwrap();
        assert_eq!(g.value(mx).data(), &[5.0, 7.0]);
        let same = g.sum(m, &[], false).unwrap();
        assert_eq!(g.value(same), g.value(m));
    }

    #[test]
    fn mean_backward_divides_evenly() {
        let mut g = Graph::new();
        let x = g.param(t(&[4], &[1.0, -3.0, 2.0, 8.0]));
        let m = g.mean(x, &[0], false).unwrap();
        let l = g.mul_scalar(m, 2.0);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.5; 4]);
    }

    #[test]
    fn max_ties_route_to_first_index() {
        let mut g = Graph::new();
        let x = g.param(t(&[4], &[1.0, 3.0, 3.0, 0.0]));
        let m = g.max(x, &[0], false).unwrap();
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_values() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[3]));
        let s = g.softmax(z, 0).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let l = g.constant(t(&[2], &[2f64.ln(), 1f64.ln()]));
        let s = g.softmax(l, 0).unwrap();
        assert!((g.value(s).data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((g.value(s).data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let mut g = Graph::new();
        let x = g.constant(t(&[4], &[1e4, -1e4, 9999.5, 0.0]));
        let s = g.softmax(x, 0).unwrap();
        let total: f64 = g.value(s).data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(g.value(s).is_finite());
    }

    #[test]
    fn backward_sum_and_square() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![0.3, 1.0, -2.0, 4.0, 5.0]));
        let l = g.sum_all(x).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 5]);

        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![3.0]));
        let sq = g.mul(x, x).unwrap();
        let l = g.sum_all(sq).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let l = g.sum_all(x).unwrap();
        g.backward(l).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
        g.zero_grad();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn fan_out_accumulates_both_paths() {
        // l = sum(2x) + sum(x*x); dl/dx = 2 + 2x
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, -0.5, 3.0]));
        let a = g.mul_scalar(x, 2.0);
        let b = g.mul(x, x).unwrap();
        let s = g.add(a, b).unwrap();
        let l = g.sum_all(s).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 1.0, 8.0]);
    }

    #[test]
    fn permute_round_trip() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        // element [k, i, j] == x[i, j, k]
        assert_eq!(g.value(p).data()[(3 * 2 + 1) * 3 + 2], ((1 * 3 + 2) * 4 + 3) as f64);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }

    #[test]
    fn conv_boundary_counts() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn bilinear_constant_stays_constant() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 2, 3, 3], 1.75));
        let y = g.upsample_bilinear(x, 8, 5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 1.75).abs() < 1e-15));
    }
}
