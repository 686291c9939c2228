//! Reverse-mode automatic differentiation over rank-3 tensors.
//!
//! Every tensor has shape `[batch, rows, cols]`; plain matrices use a batch
//! of one, scalars are `[1, 1, 1]`. Binary elementwise ops broadcast any axis
//! of extent one. Nodes are appended in evaluation order, so the node list is
//! already a topological order and the backward pass walks it in reverse.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::matrix::Matrix;
use crate::numerics::matexp_trace;

pub type Shape = [usize; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self { shape, data: vec![0.0; shape[0] * shape[1] * shape[2]] }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), shape[0] * shape[1] * shape[2], "tensor data does not match shape {shape:?}");
        Self { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: [1, 1, 1], data: vec![v] }
    }

    pub fn matrix(m: &Matrix) -> Self {
        Self::from_vec([1, m.rows(), m.cols()], m.as_slice().to_vec())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, b: usize, i: usize, j: usize) -> f64 {
        self.data[(b * self.shape[1] + i) * self.shape[2] + j]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Fixed linear map `out[o] = Σ w · in[i]`, stored row-compressed.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMap {
    pub in_len: usize,
    pub out_shape: Shape,
    offsets: Vec<usize>,
    entries: Vec<(usize, f64)>,
}

impl SparseMap {
    pub fn builder(in_len: usize, out_shape: Shape) -> SparseMapBuilder {
        SparseMapBuilder { map: SparseMap { in_len, out_shape, offsets: vec![0], entries: Vec::new() } }
    }

    fn out_len(&self) -> usize {
        self.offsets.len() - 1
    }
}

pub struct SparseMapBuilder {
    map: SparseMap,
}

impl SparseMapBuilder {
    /// Add one input term to the output row currently being built.
    pub fn term(&mut self, input: usize, weight: f64) -> &mut Self {
        debug_assert!(input < self.map.in_len);
        self.map.entries.push((input, weight));
        self
    }

    /// Close the current output row.
    pub fn finish_row(&mut self) -> &mut Self {
        self.map.offsets.push(self.map.entries.len());
        self
    }

    pub fn build(self) -> SparseMap {
        let m = self.map;
        assert_eq!(m.out_len(), m.out_shape.iter().product::<usize>(), "sparse map row count");
        m
    }
}

/// DFT amplitude probes: for each entry, the amplitude of `x[b, :, c]` at
/// frequency bin `bin`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandPlan {
    pub probes: Vec<(usize, usize, usize)>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Sigmoid(Var),
    Exp(Var),
    Gelu(Var),
    Square(Var),
    Abs(Var),
    MaskedLog { x: Var, eps: f64, mask: Rc<Vec<bool>> },
    Softmax(Var),
    LayerNorm { x: Var, eps: f64 },
    Sum(Var),
    WeightedSum(Var, Rc<Vec<f64>>),
    Sparse(Var, Rc<SparseMap>),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    MatExpTrace { x: Var, grad: Matrix },
    Band { x: Var, plan: Rc<BandPlan>, re: Vec<f64>, im: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn broadcast_shape(a: Shape, b: Shape) -> Shape {
    let mut out = [0; 3];
    for k in 0..3 {
        assert!(a[k] == b[k] || a[k] == 1 || b[k] == 1, "cannot broadcast {a:?} with {b:?}");
        out[k] = a[k].max(b[k]);
    }
    out
}

#[inline]
fn bidx(shape: Shape, b: usize, i: usize, j: usize) -> usize {
    let b = if shape[0] == 1 { 0 } else { b };
    let i = if shape[1] == 1 { 0 } else { i };
    let j = if shape[2] == 1 { 0 } else { j };
    (b * shape[1] + i) * shape[2] + j
}

/// `out[m×n] += a[m×k] · b[k×n]`
fn mm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (d, &bv) in dst.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *d += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
fn mm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            out[i * n + j] += ar.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
fn mm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let br = &b[r * n..(r + 1) * n];
        for p in 0..k {
            let av = a[r * k + p];
            if av == 0.0 {
                continue;
            }
            for (d, &bv) in out[p * n..(p + 1) * n].iter_mut().zip(br) {
                *d += av * bv;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_C * (x + 0.044_715 * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let t = libm::tanh(GELU_C * (x + 0.044_715 * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044_715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
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

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let shape = broadcast_shape(sa, sb);
        let (va, vb) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
        let mut out = Vec::with_capacity(shape.iter().product());
        if sa == sb {
            out.extend(va.iter().zip(vb).map(|(&x, &y)| f(x, y)));
        } else {
            for bb in 0..shape[0] {
                for i in 0..shape[1] {
                    for j in 0..shape[2] {
                        out.push(f(va[bidx(sa, bb, i, j)], vb[bidx(sb, bb, i, j)]));
                    }
                }
            }
        }
        self.push(Tensor::from_vec(shape, out), op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = &self.nodes[x.0].value;
        let out = Tensor::from_vec(t.shape, t.data.iter().map(|&v| f(v)).collect());
        self.push(out, op, &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddConst(x), |v| v + c)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), libm::exp)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), gelu)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    /// `log(x + eps)` where `mask` is true, `floor` elsewhere.
    pub fn masked_log(&mut self, x: Var, eps: f64, mask: Rc<Vec<bool>>, floor: f64) -> Var {
        let t = &self.nodes[x.0].value;
        assert_eq!(mask.len(), t.len());
        let data =
            t.data.iter().zip(mask.iter()).map(|(&v, &keep)| if keep { libm::log(v + eps) } else { floor }).collect();
        let out = Tensor::from_vec(t.shape, data);
        self.push(out, Op::MaskedLog { x, eps, mask }, &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa[2], sb[1], "matmul inner dims {sa:?} x {sb:?}");
        assert!(sa[0] == sb[0] || sa[0] == 1 || sb[0] == 1, "matmul batch {sa:?} x {sb:?}");
        let (m, k, n) = (sa[1], sa[2], sb[2]);
        let batch = sa[0].max(sb[0]);
        let mut out = Tensor::zeros([batch, m, n]);
        {
            let (va, vb) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
            for bb in 0..batch {
                let ao = if sa[0] == 1 { 0 } else { bb * m * k };
                let bo = if sb[0] == 1 { 0 } else { bb * k * n };
                mm_nn(&va[ao..ao + m * k], &vb[bo..bo + k * n], &mut out.data[bb * m * n..(bb + 1) * m * n], m, k, n);
            }
        }
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa[2], sb[2], "matmul_nt inner dims {sa:?} x {sb:?}");
        assert!(sa[0] == sb[0] || sa[0] == 1 || sb[0] == 1);
        let (m, k, n) = (sa[1], sa[2], sb[1]);
        let batch = sa[0].max(sb[0]);
        let mut out = Tensor::zeros([batch, m, n]);
        {
            let (va, vb) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
            for bb in 0..batch {
                let ao = if sa[0] == 1 { 0 } else { bb * m * k };
                let bo = if sb[0] == 1 { 0 } else { bb * n * k };
                mm_nt(&va[ao..ao + m * k], &vb[bo..bo + n * k], &mut out.data[bb * m * n..(bb + 1) * m * n], m, k, n);
            }
        }
        self.push(out, Op::MatMulNT(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let [b, r, c] = t.shape;
        let mut out = Tensor::zeros([b, c, r]);
        for bb in 0..b {
            for i in 0..r {
                for j in 0..c {
                    out.data[(bb * c + j) * r + i] = t.data[(bb * r + i) * c + j];
                }
            }
        }
        self.push(out, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Var {
        let t = &self.nodes[x.0].value;
        assert_eq!(t.len(), shape.iter().product::<usize>(), "reshape {:?} -> {shape:?}", t.shape);
        let out = Tensor::from_vec(shape, t.data.clone());
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let c = t.shape[2];
        let mut data = t.data.clone();
        for row in data.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - m);
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let out = Tensor::from_vec(t.shape, data);
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Normalise each row of the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let t = &self.nodes[x.0].value;
        let c = t.shape[2];
        let mut data = t.data.clone();
        for row in data.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / libm::sqrt(var + eps);
            row.iter_mut().for_each(|v| *v = (*v - mean) * r);
        }
        let out = Tensor::from_vec(t.shape, data);
        self.push(out, Op::LayerNorm { x, eps }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// `Σ w[i] · x[i]` with fixed weights.
    pub fn weighted_sum(&mut self, x: Var, w: Rc<Vec<f64>>) -> Var {
        let t = &self.nodes[x.0].value;
        assert_eq!(w.len(), t.len());
        let s = t.data.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
        self.push(Tensor::scalar(s), Op::WeightedSum(x, w), &[x])
    }

    pub fn sparse(&mut self, x: Var, map: Rc<SparseMap>) -> Var {
        let t = &self.nodes[x.0].value;
        assert_eq!(map.in_len, t.len(), "sparse map input length");
        let mut out = Tensor::zeros(map.out_shape);
        for o in 0..map.out_len() {
            out.data[o] = map.entries[map.offsets[o]..map.offsets[o + 1]].iter().map(|&(i, w)| w * t.data[i]).sum();
        }
        self.push(out, Op::Sparse(x, map), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = &self.nodes[x.0].value;
        let [b, r, c] = t.shape;
        assert!(start + len <= c);
        let mut data = Vec::with_capacity(b * r * len);
        for row in t.data.chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::from_vec([b, r, len], data);
        self.push(out, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let first = self.shape(xs[0]);
        let widths: Vec<usize> = xs
            .iter()
            .map(|&v| {
                let s = self.shape(v);
                assert_eq!((s[0], s[1]), (first[0], first[1]), "concat_cols leading dims");
                s[2]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let rows = first[0] * first[1];
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[v.0].value.data[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::from_vec([first[0], first[1], total], data);
        self.push(out, Op::ConcatCols(xs.to_vec()), xs)
    }

    /// `tr(exp(X))` for a square `[1, C, C]` input.
    pub fn matexp_trace(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        assert!(t.shape[0] == 1 && t.shape[1] == t.shape[2], "matexp_trace needs [1, C, C]");
        let m = Matrix::from_vec(t.shape[1], t.shape[2], t.data.clone()).expect("shape checked");
        let (tr, grad) = matexp_trace(&m, true).expect("finite square input");
        let grad = grad.expect("gradient requested");
        self.push(Tensor::scalar(tr), Op::MatExpTrace { x, grad }, &[x])
    }

    /// DFT amplitudes of `x: [B, T, C]` at the probes in `plan`, as `[1, 1, P]`.
    pub fn band_amplitudes(&mut self, x: Var, plan: Rc<BandPlan>) -> Var {
        let t = &self.nodes[x.0].value;
        let [_, len, c] = t.shape;
        let mut re = Vec::with_capacity(plan.probes.len());
        let mut im = Vec::with_capacity(plan.probes.len());
        let mut amp = Vec::with_capacity(plan.probes.len());
        for &(b, ch, f) in &plan.probes {
            let (mut sr, mut si) = (0.0, 0.0);
            for step in 0..len {
                let a = 2.0 * PI * ((f * step) % len) as f64 / len as f64;
                let v = t.data[(b * len + step) * c + ch];
                sr += v * libm::cos(a);
                si -= v * libm::sin(a);
            }
            re.push(sr);
            im.push(si);
            amp.push(libm::hypot(sr, si));
        }
        let n = amp.len();
        self.push(Tensor::from_vec([1, 1, n], amp), Op::Band { x, plan, re, im }, &[x])
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    let shape = self.shape(v);
                    if let Some(ga) = self.acc(grads, v) {
                        if shape == out.shape {
                            ga.iter_mut().zip(g).for_each(|(d, &x)| *d += s * x);
                        } else {
                            self.reduce_into(ga, shape, out.shape, |o| s * g[o]);
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (va, vb) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
                let [bs, rs, cs] = out.shape;
                if let Some(ga) = self.acc(grads, *a) {
                    let mut o = 0;
                    for bb in 0..bs {
                        for i in 0..rs {
                            for j in 0..cs {
                                ga[bidx(sa, bb, i, j)] += g[o] * vb[bidx(sb, bb, i, j)];
                                o += 1;
                            }
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let mut o = 0;
                    for bb in 0..bs {
                        for i in 0..rs {
                            for j in 0..cs {
                                gb[bidx(sb, bb, i, j)] += g[o] * va[bidx(sa, bb, i, j)];
                                o += 1;
                            }
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, &v)| *d += s * v);
                }
            }
            Op::AddConst(x) | Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[1], sa[2], sb[2]);
                let batch = out.shape[0];
                let (va, vb) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
                if let Some(ga) = self.acc(grads, *a) {
                    for bb in 0..batch {
                        let ao = if sa[0] == 1 { 0 } else { bb * m * k };
                        let bo = if sb[0] == 1 { 0 } else { bb * k * n };
                        mm_nt(&g[bb * m * n..(bb + 1) * m * n], &vb[bo..bo + k * n], &mut ga[ao..ao + m * k], m, n, k);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for bb in 0..batch {
                        let ao = if sa[0] == 1 { 0 } else { bb * m * k };
                        let bo = if sb[0] == 1 { 0 } else { bb * k * n };
                        mm_tn(&va[ao..ao + m * k], &g[bb * m * n..(bb + 1) * m * n], &mut gb[bo..bo + k * n], m, k, n);
                    }
                }
            }
            Op::MatMulNT(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[1], sa[2], sb[1]);
                let batch = out.shape[0];
                let (va, vb) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
                if let Some(ga) = self.acc(grads, *a) {
                    for bb in 0..batch {
                        let ao = if sa[0] == 1 { 0 } else { bb * m * k };
                        let bo = if sb[0] == 1 { 0 } else { bb * n * k };
                        mm_nn(&g[bb * m * n..(bb + 1) * m * n], &vb[bo..bo + n * k], &mut ga[ao..ao + m * k], m, n, k);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for bb in 0..batch {
                        let ao = if sa[0] == 1 { 0 } else { bb * m * k };
                        let bo = if sb[0] == 1 { 0 } else { bb * n * k };
                        mm_tn(&g[bb * m * n..(bb + 1) * m * n], &va[ao..ao + m * k], &mut gb[bo..bo + n * k], m, n, k);
                    }
                }
            }
            Op::Transpose(x) => {
                let [b, c, r] = out.shape;
                if let Some(gx) = self.acc(grads, *x) {
                    for bb in 0..b {
                        for j in 0..c {
                            for i in 0..r {
                                gx[(bb * r + i) * c + j] += g[(bb * c + j) * r + i];
                            }
                        }
                    }
                }
            }
            Op::Sigmoid(x) => self.pointwise(grads, *x, g, |_, y| y * (1.0 - y), &out.data),
            Op::Exp(x) => self.pointwise(grads, *x, g, |_, y| y, &out.data),
            Op::Gelu(x) => self.pointwise(grads, *x, g, |xv, _| gelu_grad(xv), &out.data),
            Op::Square(x) => self.pointwise(grads, *x, g, |xv, _| 2.0 * xv, &out.data),
            Op::Abs(x) => self.pointwise(
                grads,
                *x,
                g,
                |xv, _| {
                    if xv > 0.0 {
                        1.0
                    } else if xv < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                },
                &out.data,
            ),
            Op::MaskedLog { x, eps, mask } => {
                let xv = &self.nodes[x.0].value.data;
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..gx.len() {
                        if mask[i] {
                            gx[i] += g[i] / (xv[i] + eps);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let c = out.shape[2];
                if let Some(gx) = self.acc(grads, *x) {
                    for ((yr, gr), dr) in out.data.chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for k in 0..c {
                            dr[k] += yr[k] * (gr[k] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, eps } => {
                let c = out.shape[2];
                let xv = &self.nodes[x.0].value.data;
                if let Some(gx) = self.acc(grads, *x) {
                    for (((yr, gr), dr), xr) in
                        out.data.chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)).zip(xv.chunks(c))
                    {
                        let mean = xr.iter().sum::<f64>() / c as f64;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                        let r = 1.0 / libm::sqrt(var + eps);
                        let gm = gr.iter().sum::<f64>() / c as f64;
                        let gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / c as f64;
                        for k in 0..c {
                            dr[k] += r * (gr[k] - gm - yr[k] * gy);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::WeightedSum(x, w) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(w.iter()).for_each(|(d, w)| *d += g[0] * w);
                }
            }
            Op::Sparse(x, map) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..map.out_len() {
                        for &(i, w) in &map.entries[map.offsets[o]..map.offsets[o + 1]] {
                            gx[i] += w * g[o];
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let len = out.shape[2];
                let c = self.shape(*x)[2];
                if let Some(gx) = self.acc(grads, *x) {
                    for (dr, gr) in gx.chunks_mut(c).zip(g.chunks(len)) {
                        dr[*start..*start + len].iter_mut().zip(gr).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::ConcatCols(xs) => {
                let total = out.shape[2];
                let mut offset = 0;
                for &v in xs {
                    let w = self.shape(v)[2];
                    if let Some(gx) = self.acc(grads, v) {
                        for (dr, gr) in gx.chunks_mut(w).zip(g.chunks(total)) {
                            dr.iter_mut().zip(&gr[offset..offset + w]).for_each(|(d, v)| *d += v);
                        }
                    }
                    offset += w;
                }
            }
            Op::MatExpTrace { x, grad } => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(grad.as_slice()).for_each(|(d, v)| *d += g[0] * v);
                }
            }
            Op::Band { x, plan, re, im } => {
                let [_, len, c] = self.shape(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for (p, &(b, ch, f)) in plan.probes.iter().enumerate() {
                        let amp = out.data[p];
                        if amp < 1e-12 {
                            continue;
                        }
                        for step in 0..len {
                            let a = 2.0 * PI * ((f * step) % len) as f64 / len as f64;
                            let d = (re[p] * libm::cos(a) - im[p] * libm::sin(a)) / amp;
                            gx[(b * len + step) * c + ch] += g[p] * d;
                        }
                    }
                }
            }
        }
    }

    fn pointwise(&self, grads: &mut [Option<Vec<f64>>], x: Var, g: &[f64], f: impl Fn(f64, f64) -> f64, y: &[f64]) {
        let xv = &self.nodes[x.0].value.data;
        if let Some(gx) = self.acc(grads, x) {
            for i in 0..gx.len() {
                gx[i] += g[i] * f(xv[i], y[i]);
            }
        }
    }

    fn reduce_into(&self, dst: &mut [f64], small: Shape, big: Shape, g: impl Fn(usize) -> f64) {
        let mut o = 0;
        for bb in 0..big[0] {
            for i in 0..big[1] {
                for j in 0..big[2] {
                    dst[bidx(small, bb, i, j)] += g(o);
                    o += 1;
                }
            }
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}
