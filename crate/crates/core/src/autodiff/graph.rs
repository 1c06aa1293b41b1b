use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, Element, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train-mode ops use batch statistics and random masks; eval-mode ops are
/// deterministic functions of their inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    geom: Conv2dGeom,
}

pub(crate) enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var, map_a: Option<Vec<usize>>, map_b: Option<Vec<usize>> },
    Sub { a: Var, b: Var, map_a: Option<Vec<usize>>, map_b: Option<Vec<usize>> },
    Mul { a: Var, b: Var, map_a: Option<Vec<usize>>, map_b: Option<Vec<usize>> },
    Scale { a: Var, c: F },
    AddScalar { a: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Reshape { a: Var },
    Relu { a: Var },
    Sigmoid { a: Var },
    Tanh { a: Var },
    Exp { a: Var },
    Log { a: Var },
    Softplus { a: Var },
    Softmax { a: Var, axis: usize },
    Sum { a: Var },
    Mean { a: Var },
    SumAxis { a: Var, axis: usize },
    Transpose { a: Var },
    Conv2d { x: Var, w: Var, b: Option<Var>, dims: ConvDims, cols: Vec<F> },
    BatchNorm { x: Var, gamma: Var, beta: Var, x_hat: Vec<F>, inv_std: Vec<F>, batch_stats: bool },
    Dropout { a: Var, mask: Vec<F> },
    Embedding { table: Var, ids: Vec<usize> },
}

pub(crate) struct Node<F> {
    pub(crate) value: Tensor<F>,
    pub(crate) op: Op<F>,
    pub(crate) requires_grad: bool,
}

/// Append-only tape of tensor operations.
///
/// Inputs always precede outputs, so the node order is a topological order
/// and [`Graph::backward`] walks it in reverse.
pub struct Graph<F: Element = f32> {
    pub(crate) nodes: Vec<Node<F>>,
    frozen_relu: Option<(Vec<bool>, usize)>,
}

/// Batch statistics produced by a train-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

fn layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let dim = |s: &[usize], i: usize| {
        if i + s.len() >= rank {
            s[i + s.len() - rank]
        } else {
            1
        }
    };
    (0..rank)
        .map(|i| {
            let (da, db) = (dim(a, i), dim(b, i));
            if da == db || db == 1 {
                Some(da)
            } else if da == 1 {
                Some(db)
            } else {
                None
            }
        })
        .collect()
}

/// Maps each flat index of `out` to the flat index of a broadcast input.
/// `None` means the input already has the output shape.
fn broadcast_map(out: &[usize], inp: &[usize]) -> Option<Vec<usize>> {
    if out == inp {
        return None;
    }
    let rank = out.len();
    let offset = rank - inp.len();
    let mut in_strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..inp.len()).rev() {
        if inp[i] != 1 {
            in_strides[i + offset] = s;
        }
        s *= inp[i];
    }
    let numel: usize = out.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut counter = vec![0usize; rank];
    let mut idx = 0usize;
    for _ in 0..numel {
        map.push(idx);
        for d in (0..rank).rev() {
            counter[d] += 1;
            idx += in_strides[d];
            if counter[d] < out[d] {
                break;
            }
            idx -= in_strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    Some(map)
}

#[inline]
fn at(map: &Option<Vec<usize>>, i: usize) -> usize {
    match map {
        Some(m) => m[i],
        None => i,
    }
}

fn sigmoid<F: Element>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

impl<F: Element> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Element> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), frozen_relu: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable or fixed input tensor.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// Sign pattern of every ReLU input on the tape. Two evaluations with
    /// equal patterns lie in the same piecewise-smooth region.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu { a } = node.op {
                out.extend(self.nodes[a.0].value.data().iter().map(|&v| v > F::zero()));
            }
        }
        out
    }

    fn push(&mut self, name: &'static str, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Result<Var, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Result<Var, AutodiffError> {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push(name, value, op, &[a])
    }

    /// 2-D matrix product `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.matmul_impl(a, b, false)
    }

    /// 2-D matrix product `a · bᵀ`; `b` is stored `n x k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bad = || AutodiffError::shape("matmul", format!("{:?} x {:?}{}", sa, sb, if trans_b { "ᵀ" } else { "" }));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(bad());
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(bad());
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), trans_b, &mut out, F::zero());
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        make: impl FnOnce(Option<Vec<usize>>, Option<Vec<usize>>) -> Op<F>,
    ) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)
            .ok_or_else(|| AutodiffError::shape(name, format!("{:?} vs {:?}", sa, sb)))?;
        let map_a = broadcast_map(&out_shape, &sa);
        let map_b = broadcast_map(&out_shape, &sb);
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let numel: usize = out_shape.iter().product();
        let data = (0..numel).map(|i| f(xa[at(&map_a, i)], xb[at(&map_b, i)])).collect();
        let value = Tensor::new(out_shape, data)?;
        self.push(name, value, make(map_a, map_b), &[a, b])
    }

    /// Elementwise sum with right-aligned broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("add", a, b, |x, y| x + y, |map_a, map_b| Op::Add { a, b, map_a, map_b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("sub", a, b, |x, y| x - y, |map_a, map_b| Op::Sub { a, b, map_a, map_b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("mul", a, b, |x, y| x * y, |map_a, map_b| Op::Mul { a, b, map_a, map_b })
    }

    pub fn scale(&mut self, a: Var, c: F) -> Result<Var, AutodiffError> {
        self.unary("scale", a, |v| v * c, Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Result<Var, AutodiffError> {
        self.unary("add_scalar", a, |v| v + c, Op::AddScalar { a })
    }

    /// `1 - a`, the complement of a gate.
    pub fn one_minus(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let neg = self.scale(a, -F::one())?;
        self.add_scalar(neg, F::one())
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        if inputs.is_empty() {
            return Err(AutodiffError::invalid("concat", "no inputs"));
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(AutodiffError::shape("concat", format!("axis {} on {:?}", axis, first)));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !ok {
                return Err(AutodiffError::shape("concat", format!("{:?} vs {:?} on axis {}", first, s, axis)));
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = layout(&out_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let x = self.value(v);
                let chunk = x.shape()[axis] * inner;
                data.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(out_shape, data)?;
        self.push("concat", value, Op::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(AutodiffError::shape("slice", format!("[{}..{}] on axis {} of {:?}", start, start + len, axis, s)));
        }
        let (outer, n, inner) = layout(&s, axis);
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = s;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        self.push("slice", value, Op::Slice { a, axis, start }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let value = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape { a }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let Some((pattern, used)) = self.frozen_relu.as_mut() else {
            return self.unary("relu", a, |v| v.max(F::zero()), Op::Relu { a });
        };
        let x = &self.nodes[a.0].value;
        let mask = pattern
            .get(*used..*used + x.numel())
            .ok_or_else(|| AutodiffError::invalid("relu", "frozen pattern exhausted"))?;
        *used += x.numel();
        let data = x.data().iter().zip(mask).map(|(&v, &on)| if on { v } else { F::zero() }).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push("relu", value, Op::Relu { a }, &[a])
    }

    /// Makes subsequent ReLUs gate by `pattern` (as returned by
    /// [`Graph::kink_pattern`]) instead of by the sign of their input, so a
    /// perturbed forward pass stays on the linear piece of a reference
    /// point. Intended for forward-only evaluation in gradient checks.
    pub fn freeze_relu_pattern(&mut self, pattern: Vec<bool>) {
        self.frozen_relu = Some((pattern, 0));
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary("tanh", a, |v| v.tanh(), Op::Tanh { a })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary("exp", a, |v| v.exp(), Op::Exp { a })
    }

    pub fn log(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary("log", a, |v| v.ln(), Op::Log { a })
    }

    /// `log(1 + exp(a))`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(
            "softplus",
            a,
            |v| v.max(F::zero()) + (-v.abs()).exp().ln_1p(),
            Op::Softplus { a },
        )
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(AutodiffError::shape("softmax", format!("axis {} on {:?}", axis, s)));
        }
        let (outer, n, inner) = layout(&s, axis);
        let x = self.value(a).data();
        let mut data = vec![F::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| x[idx(j)]).fold(F::neg_infinity(), F::max);
                let mut total = F::zero();
                for j in 0..n {
                    let e = (x[idx(j)] - max).exp();
                    data[idx(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    data[idx(j)] /= total;
                }
            }
        }
        let value = Tensor::new(s, data)?;
        self.push("softmax", value, Op::Softmax { a, axis }, &[a])
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let total = F::of(self.value(a).data().iter().map(|v| v.f64()).sum());
        self.push("sum", Tensor::scalar(total), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let x = self.value(a);
        if x.numel() == 0 {
            return Err(AutodiffError::invalid("mean", "empty tensor"));
        }
        let total: f64 = x.data().iter().map(|v| v.f64()).sum();
        let value = Tensor::scalar(F::of(total / x.numel() as f64));
        self.push("mean", value, Op::Mean { a }, &[a])
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(AutodiffError::shape("sum_axis", format!("axis {} on {:?}", axis, s)));
        }
        let (outer, n, inner) = layout(&s, axis);
        let x = self.value(a).data();
        let mut acc = vec![0.0f64; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    acc[o * inner + i] += x[o * n * inner + j * inner + i].f64();
                }
            }
        }
        let data = acc.into_iter().map(F::of).collect();
        let mut out_shape = s;
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, data)?;
        self.push("sum_axis", value, Op::SumAxis { a, axis }, &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(AutodiffError::shape("transpose", format!("{:?} is not a matrix", s)));
        }
        let (r, c) = (s[0], s[1]);
        let x = self.value(a).data();
        let mut data = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = x[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], data)?;
        self.push("transpose", value, Op::Transpose { a }, &[a])
    }

    /// Cross-correlation of `x: [N, C, H, W]` with `w: [O, C, KH, KW]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: Conv2dGeom) -> Result<Var, AutodiffError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let bad = |why: &str| AutodiffError::shape("conv2d", format!("{}: input {:?}, weight {:?}", why, sx, sw));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(bad("rank/channel mismatch"));
        }
        if geom.stride.0 == 0 || geom.stride.1 == 0 {
            return Err(bad("zero stride"));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        let (ph, pw) = geom.padding;
        if h + 2 * ph < kh || wd + 2 * pw < kw {
            return Err(bad("input smaller than kernel"));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(bad("bias shape"));
            }
        }
        let oh = (h + 2 * ph - kh) / geom.stride.0 + 1;
        let ow = (wd + 2 * pw - kw) / geom.stride.1 + 1;
        let dims = ConvDims { n, c, h, w: wd, o, kh, kw, oh, ow, geom };
        let ckk = c * kh * kw;
        let p = oh * ow;
        let xs = self.value(x).data();
        let mut cols = vec![F::zero(); n * ckk * p];
        for ni in 0..n {
            im2col(&xs[ni * c * h * wd..(ni + 1) * c * h * wd], &dims, &mut cols[ni * ckk * p..(ni + 1) * ckk * p]);
        }
        let ws = self.value(w).data();
        let mut out = vec![F::zero(); n * o * p];
        for ni in 0..n {
            F::gemm(o, ckk, p, ws, false, &cols[ni * ckk * p..], false, &mut out[ni * o * p..(ni + 1) * o * p], F::zero());
        }
        if let Some(b) = b {
            let bs = self.value(b).data();
            for ni in 0..n {
                for oi in 0..o {
                    for v in &mut out[(ni * o + oi) * p..(ni * o + oi + 1) * p] {
                        *v += bs[oi];
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, o, oh, ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", value, Op::Conv2d { x, w, b, dims, cols }, &inputs)
    }

    /// Batch normalization of `x: [N, C]` over the batch axis using the
    /// batch's own statistics. Returns the biased batch mean and variance
    /// so the caller can maintain running estimates.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<(Var, BatchStats<F>), AutodiffError> {
        let (n, c) = self.check_bn(x, gamma, beta)?;
        let xs = self.value(x).data();
        let nf = F::of(n as f64);
        let mut mean = vec![F::zero(); c];
        let mut var = vec![F::zero(); c];
        for r in 0..n {
            for j in 0..c {
                mean[j] += xs[r * c + j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= nf);
        for r in 0..n {
            for j in 0..c {
                let d = xs[r * c + j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= nf);
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, inv_std, true)?;
        Ok((out, BatchStats { mean, var }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batchnorm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[F], var: &[F], eps: F) -> Result<Var, AutodiffError> {
        let (_, c) = self.check_bn(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(AutodiffError::shape("batchnorm", format!("running stats of length {} for {} channels", mean.len(), c)));
        }
        let inv_std = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        self.bn_apply(x, gamma, beta, mean, inv_std, false)
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize), AutodiffError> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] == 0 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return Err(AutodiffError::shape(
                "batchnorm",
                format!("input {:?}, gamma {:?}, beta {:?}", s, self.shape(gamma), self.shape(beta)),
            ));
        }
        Ok((s[0], s[1]))
    }

    fn bn_apply(&mut self, x: Var, gamma: Var, beta: Var, mean: &[F], inv_std: Vec<F>, batch_stats: bool) -> Result<Var, AutodiffError> {
        let s = self.shape(x).to_vec();
        let (n, c) = (s[0], s[1]);
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut x_hat = vec![F::zero(); n * c];
        let mut out = vec![F::zero(); n * c];
        for r in 0..n {
            for j in 0..c {
                let h = (xs[r * c + j] - mean[j]) * inv_std[j];
                x_hat[r * c + j] = h;
                out[r * c + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(s, out)?;
        self.push("batchnorm", value, Op::BatchNorm { x, gamma, beta, x_hat, inv_std, batch_stats }, &[x, gamma, beta])
    }

    /// Inverted dropout. Eval mode, or `p == 0`, returns `a` unchanged; in
    /// train mode the mask is a pure function of `seed`.
    pub fn dropout(&mut self, a: Var, p: f64, mode: Mode, seed: u64) -> Result<Var, AutodiffError> {
        if !(0.0..=1.0).contains(&p) {
            return Err(AutodiffError::invalid("dropout", format!("p = {} outside [0, 1]", p)));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(a);
        }
        let n = self.value(a).numel();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = if p >= 1.0 { F::zero() } else { F::of(1.0 / (1.0 - p)) };
        let mask: Vec<F> = (0..n).map(|_| if rng.gen::<f64>() < p { F::zero() } else { keep }).collect();
        let x = self.value(a);
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push("dropout", value, Op::Dropout { a, mask }, &[a])
    }

    /// Rows of `table: [V, E]` selected by `ids`, giving `[ids.len(), E]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(AutodiffError::shape("embedding_lookup", format!("table {:?}", s)));
        }
        let (v, e) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(AutodiffError::invalid("embedding_lookup", format!("id {} out of range for {} rows", bad, v)));
        }
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            data.extend_from_slice(&t[i * e..(i + 1) * e]);
        }
        let value = Tensor::new(vec![ids.len(), e], data)?;
        self.push("embedding_lookup", value, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    /// Reverse-mode accumulation from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>, AutodiffError> {
        let ls = self.value(loss);
        if ls.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(ls.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<F>>], v: Var) -> Option<&'a mut Vec<F>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
    }

    fn propagate(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let sa = self.nodes[a.0].value.shape();
                let (m, k) = (sa[0], sa[1]);
                let n = node.value.shape()[1];
                if let Some(ga) = self.acc(grads, *a) {
                    // dA = dC · op(B)ᵀ
                    F::gemm(m, n, k, g, false, val(*b), !trans_b, ga, F::one());
                }
                if let Some(gb) = self.acc(grads, *b) {
                    if *trans_b {
                        // B is n x k: dB = dCᵀ · A
                        F::gemm(n, m, k, g, true, val(*a), false, gb, F::one());
                    } else {
                        F::gemm(k, m, n, val(*a), true, g, false, gb, F::one());
                    }
                }
            }
            Op::Add { a, b, map_a, map_b } | Op::Sub { a, b, map_a, map_b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -F::one() } else { F::one() };
                if let Some(ga) = self.acc(grads, *a) {
                    for (j, &gv) in g.iter().enumerate() {
                        ga[at(map_a, j)] += gv;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (j, &gv) in g.iter().enumerate() {
                        gb[at(map_b, j)] += sign * gv;
                    }
                }
            }
            Op::Mul { a, b, map_a, map_b } => {
                let (xa, xb) = (val(*a), val(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for (j, &gv) in g.iter().enumerate() {
                        ga[at(map_a, j)] += gv * xb[at(map_b, j)];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (j, &gv) in g.iter().enumerate() {
                        gb[at(map_b, j)] += gv * xa[at(map_a, j)];
                    }
                }
            }
            Op::Scale { a, c } => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * *c);
                }
            }
            Op::AddScalar { a } | Op::Reshape { a } => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = layout(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.nodes[v.0].value.shape()[*axis];
                    if let Some(gv) = self.acc(grads, v) {
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset * inner..o * total * inner + (offset + len) * inner];
                            let dst = &mut gv[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let (outer, n, inner) = layout(self.nodes[a.0].value.shape(), *axis);
                let len = node.value.shape()[*axis];
                if let Some(ga) = self.acc(grads, *a) {
                    for o in 0..outer {
                        let base = o * n * inner + start * inner;
                        let dst = &mut ga[base..base + len * inner];
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Relu { a } => {
                let x = val(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        if x[j] > F::zero() {
                            ga[j] += g[j];
                        }
                    }
                }
            }
            Op::Sigmoid { a } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * y[j] * (F::one() - y[j]);
                    }
                }
            }
            Op::Tanh { a } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * (F::one() - y[j] * y[j]);
                    }
                }
            }
            Op::Exp { a } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * y[j];
                    }
                }
            }
            Op::Log { a } => {
                let x = val(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] / x[j];
                    }
                }
            }
            Op::Softplus { a } => {
                let x = val(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * sigmoid(x[j]);
                    }
                }
            }
            Op::Softmax { a, axis } => {
                let (outer, n, inner) = layout(node.value.shape(), *axis);
                if let Some(ga) = self.acc(grads, *a) {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let idx = |j: usize| o * n * inner + j * inner + ii;
                            let dot: F = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..n {
                                ga[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean { a } => {
                if let Some(ga) = self.acc(grads, *a) {
                    let s = g[0] / F::of(ga.len() as f64);
                    ga.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::SumAxis { a, axis } => {
                let (outer, n, inner) = layout(self.nodes[a.0].value.shape(), *axis);
                if let Some(ga) = self.acc(grads, *a) {
                    for o in 0..outer {
                        for j in 0..n {
                            for ii in 0..inner {
                                ga[o * n * inner + j * inner + ii] += g[o * inner + ii];
                            }
                        }
                    }
                }
            }
            Op::Transpose { a } => {
                let s = node.value.shape();
                let (r, c) = (s[0], s[1]);
                if let Some(ga) = self.acc(grads, *a) {
                    for i2 in 0..r {
                        for j in 0..c {
                            ga[j * r + i2] += g[i2 * c + j];
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, dims, cols } => {
                let d = *dims;
                let ckk = d.c * d.kh * d.kw;
                let p = d.oh * d.ow;
                if let Some(gw) = self.acc(grads, *w) {
                    for ni in 0..d.n {
                        F::gemm(d.o, p, ckk, &g[ni * d.o * p..], false, &cols[ni * ckk * p..], true, gw, F::one());
                    }
                }
                if let Some(b) = b {
                    if let Some(gb) = self.acc(grads, *b) {
                        for ni in 0..d.n {
                            for oi in 0..d.o {
                                gb[oi] += g[(ni * d.o + oi) * p..(ni * d.o + oi + 1) * p].iter().copied().sum();
                            }
                        }
                    }
                }
                let ws = val(*w);
                if let Some(gx) = self.acc(grads, *x) {
                    let mut dcols = vec![F::zero(); ckk * p];
                    let chw = d.c * d.h * d.w;
                    for ni in 0..d.n {
                        F::gemm(ckk, d.o, p, ws, true, &g[ni * d.o * p..], false, &mut dcols, F::zero());
                        col2im(&dcols, &d, &mut gx[ni * chw..(ni + 1) * chw]);
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, x_hat, inv_std, batch_stats } => {
                let s = node.value.shape();
                let (n, c) = (s[0], s[1]);
                let gm = val(*gamma);
                let mut sum_g = vec![F::zero(); c];
                let mut sum_gx = vec![F::zero(); c];
                for r in 0..n {
                    for j in 0..c {
                        sum_g[j] += g[r * c + j];
                        sum_gx[j] += g[r * c + j] * x_hat[r * c + j];
                    }
                }
                if let Some(gg) = self.acc(grads, *gamma) {
                    gg.iter_mut().zip(&sum_gx).for_each(|(d, &v)| *d += v);
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    gb.iter_mut().zip(&sum_g).for_each(|(d, &v)| *d += v);
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let nf = F::of(n as f64);
                    for r in 0..n {
                        for j in 0..c {
                            let k = r * c + j;
                            gx[k] += if *batch_stats {
                                gm[j] * inv_std[j] / nf * (nf * g[k] - sum_g[j] - x_hat[k] * sum_gx[j])
                            } else {
                                gm[j] * inv_std[j] * g[k]
                            };
                        }
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * mask[j];
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let e = self.nodes[table.0].value.shape()[1];
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        gt[id * e..(id + 1) * e].iter_mut().zip(&g[r * e..(r + 1) * e]).for_each(|(d, &v)| *d += v);
                    }
                }
            }
        }
    }
}

fn im2col<F: Element>(x: &[F], d: &ConvDims, cols: &mut [F]) {
    let p = d.oh * d.ow;
    let (sh, sw) = d.geom.stride;
    let (ph, pw) = d.geom.padding;
    for ci in 0..d.c {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (ci * d.kh + ki) * d.kw + kj;
                for oy in 0..d.oh {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    for ox in 0..d.ow {
                        let ix = (ox * sw + kj) as isize - pw as isize;
                        cols[row * p + oy * d.ow + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < d.h && (ix as usize) < d.w {
                            x[(ci * d.h + iy as usize) * d.w + ix as usize]
                        } else {
                            F::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<F: Element>(cols: &[F], d: &ConvDims, dx: &mut [F]) {
    let p = d.oh * d.ow;
    let (sh, sw) = d.geom.stride;
    let (ph, pw) = d.geom.padding;
    for ci in 0..d.c {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (ci * d.kh + ki) * d.kw + kj;
                for oy in 0..d.oh {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    if iy < 0 || iy as usize >= d.h {
                        continue;
                    }
                    for ox in 0..d.ow {
                        let ix = (ox * sw + kj) as isize - pw as isize;
                        if ix >= 0 && (ix as usize) < d.w {
                            dx[(ci * d.h + iy as usize) * d.w + ix as usize] += cols[row * p + oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Gradients keyed by graph node.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Element> Gradients<F> {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Tensor<F> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient matches node shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// True when some gradient actually reached `v`.
    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<F>> {
        self.grads[v.0].take()
    }
}
