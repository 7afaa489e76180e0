//! Reverse-mode automatic differentiation over a tape of tensor ops.
//!
//! A [`Graph`] is built fresh for every forward pass. Ops append nodes and
//! return [`Var`] handles; [`Graph::backward`] walks the tape in reverse and
//! returns gradients for every leaf that asked for one.

use crate::attention;
use crate::image_ops::{self, ConvGeometry};
use crate::tensor::{gemm, Tensor};

/// Largest `heads · Lq · Lk` whose attention weights an inference-only
/// node keeps; bigger nodes use the blocked kernel and drop them.
pub const ATTENTION_SAVE_LIMIT: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// `x[r, c] + b[c]`
    AddRow(Var, Var),
    /// `x[r, c] * g[c]`
    MulRow(Var, Var),
    /// `x[r, ..] + b[r]`
    AddCol(Var, Var),
    /// `x[r, ..] * g[r]`
    MulCol(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        a_trans: bool,
        b_trans: bool,
    },
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Sum(Var),
    LogSoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        inv_std: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeometry,
        col: Option<Vec<f64>>,
    },
    Resize {
        x: Var,
        dims: (usize, usize, usize),
    },
    Crop {
        x: Var,
        dims: (usize, usize, usize),
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` if nothing upstream of the loss
    /// depended on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn slot(grads: &mut [Option<Vec<f64>>], id: Var, len: usize) -> &mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// A leaf that gradients are not tracked for.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient [`Graph::backward`] will report.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise op on mismatched shapes");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, op, needs)
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let vx = self.value(x);
        let value = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&v| f(v)).collect());
        let needs = self.needs(x);
        self.push(value, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v + c, Op::AddScalar(x))
    }

    fn broadcast(&mut self, x: Var, p: Var, along_rows: bool, mul: bool) -> Var {
        let vx = self.value(x);
        let (rows, cols) = vx.rows_cols();
        let vp = self.data(p);
        let expected = if along_rows { cols } else { rows };
        assert_eq!(vp.len(), expected, "broadcast operand has wrong length");
        let mut data = vx.data().to_vec();
        for (r, row) in data.chunks_mut(cols).enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                let q = if along_rows { vp[c] } else { vp[r] };
                if mul {
                    *v *= q;
                } else {
                    *v += q;
                }
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data);
        let op = match (along_rows, mul) {
            (true, false) => Op::AddRow(x, p),
            (true, true) => Op::MulRow(x, p),
            (false, false) => Op::AddCol(x, p),
            (false, true) => Op::MulCol(x, p),
        };
        let needs = self.needs(x) || self.needs(p);
        self.push(value, op, needs)
    }

    /// Adds a length-`C` vector to every row of an `[R, C]` matrix.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        self.broadcast(x, b, true, false)
    }

    pub fn mul_row(&mut self, x: Var, g: Var) -> Var {
        self.broadcast(x, g, true, true)
    }

    /// Adds `b[r]` to every element of leading-axis slice `r` (per-channel
    /// bias on a `[C, H, W]` map).
    pub fn add_col(&mut self, x: Var, b: Var) -> Var {
        self.broadcast(x, b, false, false)
    }

    pub fn mul_col(&mut self, x: Var, g: Var) -> Var {
        self.broadcast(x, g, false, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, a_trans: bool, b: Var, b_trans: bool) -> Var {
        let (ar, ac) = self.value(a).dims2();
        let (br, bc) = self.value(b).dims2();
        let (m, k) = if a_trans { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if b_trans { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dimensions differ: {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), a_trans, self.data(b), b_trans, &mut out, false);
        let needs = self.needs(a) || self.needs(b);
        self.push(
            Tensor::new([m, n], out),
            Op::MatMul {
                a,
                b,
                a_trans,
                b_trans,
            },
            needs,
        )
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.value(x).rows_cols();
        let src = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::new([c, r], out), Op::Transpose(x), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Var {
        let value = self.value(x).clone().reshaped(shape);
        let needs = self.needs(x);
        self.push(value, Op::Reshape(x), needs)
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).rows_cols().1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).rows_cols();
            assert_eq!(c, cols, "concat_rows column mismatch");
            rows += r;
            data.extend_from_slice(self.data(p));
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::new([rows, cols], data), Op::ConcatRows(parts.to_vec()), needs)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let (r, c) = self.value(x).rows_cols();
        assert!(start <= end && end <= r, "row slice {start}..{end} of {r}");
        let data = self.data(x)[start * c..end * c].to_vec();
        let needs = self.needs(x);
        self.push(Tensor::new([end - start, c], data), Op::SliceRows { x, start }, needs)
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let (r, c) = self.value(x).rows_cols();
        let src = self.data(x);
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            assert!(i < r);
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let needs = self.needs(x);
        self.push(
            Tensor::new([rows.len(), c], data),
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            needs,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, |v| gelu(v).0, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, softplus, Op::Softplus(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.value(x).dims2();
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::new([r, c], data), Op::LogSoftmaxRows(x), needs)
    }

    /// Normalizes each row to zero mean and unit variance (no affine).
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let (r, c) = self.value(x).rows_cols();
        let mut data = self.data(x).to_vec();
        let mut inv_std = Vec::with_capacity(r);
        for row in data.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, data), Op::LayerNormRows { x, inv_std }, needs)
    }

    /// 2-D convolution of a `[Cin, H, W]` map with `[Cout, Cin, k, k]`
    /// weights (no bias).
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let (cin, h, wd) = self.value(x).dims3();
        let ws = self.value(w).shape().to_vec();
        assert!(
            ws.len() == 4 && ws[1] == cin && ws[2] == ws[3],
            "conv weight {ws:?} incompatible with input channels {cin}"
        );
        let geom = ConvGeometry {
            in_channels: cin,
            height: h,
            width: wd,
            kernel: ws[2],
            stride,
            pad,
        };
        let cout = ws[0];
        let (oh, ow) = (geom.out_height(), geom.out_width());
        let col = if geom.is_pointwise() {
            None
        } else {
            Some(image_ops::im2col(self.data(x), &geom))
        };
        let mut out = vec![0.0; cout * oh * ow];
        let rhs = col.as_deref().unwrap_or_else(|| self.data(x));
        gemm(cout, geom.col_rows(), oh * ow, self.data(w), false, rhs, false, &mut out, false);
        let needs = self.needs(x) || self.needs(w);
        self.push(Tensor::new([cout, oh, ow], out), Op::Conv2d { x, w, geom, col }, needs)
    }

    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let dims = self.value(x).dims3();
        let (c, h, w) = dims;
        let out = image_ops::resize_bilinear(self.data(x), c, h, w, out_h, out_w);
        let needs = self.needs(x);
        self.push(Tensor::new([c, out_h, out_w], out), Op::Resize { x, dims }, needs)
    }

    pub fn crop(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let dims = self.value(x).dims3();
        let (c, h, w) = dims;
        assert!(out_h <= h && out_w <= w);
        let out = image_ops::crop(self.data(x), c, h, w, out_h, out_w);
        let needs = self.needs(x);
        self.push(Tensor::new([c, out_h, out_w], out), Op::Crop { x, dims }, needs)
    }

    /// Multi-head attention over projected `q [Lq, C]`, `k [Lk, C]`,
    /// `v [Lk, C]`. `mask[i * Lk + j] == true` blocks key `j` for query `i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&[bool]>) -> Var {
        let (lq, c) = self.value(q).dims2();
        let (lk, ck) = self.value(k).dims2();
        assert_eq!(c, ck);
        assert_eq!(self.value(v).dims2(), (lk, c));
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        let (output, probs) = if !needs && heads * lq * lk > ATTENTION_SAVE_LIMIT {
            let out = attention::forward_blocked(
                self.data(q),
                self.data(k),
                self.data(v),
                lq,
                lk,
                c,
                heads,
                mask,
                ATTENTION_SAVE_LIMIT,
            );
            (out, Vec::new())
        } else {
            let res = attention::forward(self.data(q), self.data(k), self.data(v), lq, lk, c, heads, mask);
            (res.output, res.probs)
        };
        self.push(
            Tensor::new([lq, c], output),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            needs,
        )
    }

    /// Attention weights `[heads, Lq, Lk]` saved by an attention node.
    /// `None` for large inference-only nodes, which do not keep them.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } if !probs.is_empty() => Some(probs),
            _ => None,
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &v in [a, b].iter() {
                    if self.needs(*v) {
                        slot(grads, *v, g.len()).iter_mut().zip(g).for_each(|(d, x)| *d += x);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    slot(grads, *a, g.len()).iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if self.needs(*b) {
                    slot(grads, *b, g.len()).iter_mut().zip(g).for_each(|(d, x)| *d -= x);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.data(*a), self.data(*b));
                if self.needs(*a) {
                    let d = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        d[i] += g[i] * vb[i];
                    }
                }
                if self.needs(*b) {
                    let d = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        d[i] += g[i] * va[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let vb = self.data(*b);
                if self.needs(*a) {
                    let d = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        d[i] += g[i] / vb[i];
                    }
                }
                if self.needs(*b) {
                    let d = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        d[i] -= g[i] * out[i] / vb[i];
                    }
                }
            }
            Op::Scale(x, c) => {
                let d = slot(grads, *x, g.len());
                d.iter_mut().zip(g).for_each(|(d, v)| *d += v * c);
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                let d = slot(grads, *x, g.len());
                d.iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
            Op::AddRow(x, p) | Op::MulRow(x, p) | Op::AddCol(x, p) | Op::MulCol(x, p) => {
                let along_rows = matches!(node.op, Op::AddRow(..) | Op::MulRow(..));
                let mul = matches!(node.op, Op::MulRow(..) | Op::MulCol(..));
                let (_, cols) = node.value.rows_cols();
                let vp = self.data(*p);
                let vx = self.data(*x);
                if self.needs(*x) {
                    let d = slot(grads, *x, g.len());
                    if mul {
                        for (i, (d, gv)) in d.iter_mut().zip(g).enumerate() {
                            let q = if along_rows { vp[i % cols] } else { vp[i / cols] };
                            *d += gv * q;
                        }
                    } else {
                        d.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                    }
                }
                if self.needs(*p) {
                    let d = slot(grads, *p, vp.len());
                    for (i, gv) in g.iter().enumerate() {
                        let j = if along_rows { i % cols } else { i / cols };
                        d[j] += if mul { gv * vx[i] } else { *gv };
                    }
                }
            }
            Op::MatMul {
                a,
                b,
                a_trans,
                b_trans,
            } => {
                let (m, n) = node.value.dims2();
                let (ar, ac) = self.value(*a).dims2();
                let k = if *a_trans { ar } else { ac };
                if self.needs(*a) {
                    // dA = g · op(B)ᵀ, stored in A's layout.
                    let d = slot(grads, *a, ar * ac);
                    if *a_trans {
                        // A is k×m: dA = op(B) · gᵀ
                        gemm(k, n, m, self.data(*b), *b_trans, g, true, d, true);
                    } else {
                        gemm(m, n, k, g, false, self.data(*b), !*b_trans, d, true);
                    }
                }
                if self.needs(*b) {
                    let len = self.value(*b).len();
                    let d = slot(grads, *b, len);
                    if *b_trans {
                        // B is n×k: dB = gᵀ · op(A)
                        gemm(n, m, k, g, true, self.data(*a), *a_trans, d, true);
                    } else {
                        gemm(k, m, n, self.data(*a), !*a_trans, g, false, d, true);
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = node.value.dims2();
                let d = slot(grads, *x, g.len());
                // output is r×c, input was c×r
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] += g[i * c + j];
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.needs(p) {
                        let d = slot(grads, p, len);
                        d.iter_mut().zip(&g[offset..offset + len]).for_each(|(d, v)| *d += v);
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let (_, c) = node.value.rows_cols();
                let len = self.value(*x).len();
                let d = slot(grads, *x, len);
                d[start * c..start * c + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, v)| *d += v);
            }
            Op::GatherRows { x, rows } => {
                let (_, c) = node.value.rows_cols();
                let len = self.value(*x).len();
                let d = slot(grads, *x, len);
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        d[r * c + j] += g[k * c + j];
                    }
                }
            }
            Op::Relu(x) => {
                let vx = self.data(*x);
                let d = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    if vx[i] > 0.0 {
                        d[i] += g[i];
                    }
                }
            }
            Op::Gelu(x) => {
                let vx = self.data(*x);
                let d = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    d[i] += g[i] * gelu(vx[i]).1;
                }
            }
            Op::Sigmoid(x) => {
                let d = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    d[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }
            Op::Softplus(x) => {
                let vx = self.data(*x);
                let d = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    d[i] += g[i] * sigmoid(vx[i]);
                }
            }
            Op::Sum(x) => {
                let len = self.value(*x).len();
                let d = slot(grads, *x, len);
                d.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::LogSoftmaxRows(x) => {
                let (_, c) = node.value.dims2();
                let d = slot(grads, *x, g.len());
                for ((drow, grow), orow) in d.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                    let gs: f64 = grow.iter().sum();
                    for j in 0..c {
                        drow[j] += grow[j] - orow[j].exp() * gs;
                    }
                }
            }
            Op::LayerNormRows { x, inv_std } => {
                let (_, c) = node.value.rows_cols();
                let d = slot(grads, *x, g.len());
                let n = c as f64;
                for (r, ((drow, grow), yrow)) in
                    d.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)).enumerate()
                {
                    let mg = grow.iter().sum::<f64>() / n;
                    let mgy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / n;
                    for j in 0..c {
                        drow[j] += inv_std[r] * (grow[j] - mg - yrow[j] * mgy);
                    }
                }
            }
            Op::Conv2d { x, w, geom, col } => {
                let cout = node.value.shape()[0];
                let plane = geom.col_cols();
                let krows = geom.col_rows();
                let rhs = col.as_deref().unwrap_or_else(|| self.data(*x));
                if self.needs(*w) {
                    let d = slot(grads, *w, cout * krows);
                    gemm(cout, plane, krows, g, false, rhs, true, d, true);
                }
                if self.needs(*x) {
                    let len = self.value(*x).len();
                    if geom.is_pointwise() {
                        let d = slot(grads, *x, len);
                        gemm(krows, cout, plane, self.data(*w), true, g, false, d, true);
                    } else {
                        let mut dcol = vec![0.0; krows * plane];
                        gemm(krows, cout, plane, self.data(*w), true, g, false, &mut dcol, false);
                        let d = slot(grads, *x, len);
                        image_ops::col2im(&dcol, geom, d);
                    }
                }
            }
            Op::Resize { x, dims } => {
                let (c, h, w) = *dims;
                let (_, oh, ow) = node.value.dims3();
                let d = slot(grads, *x, c * h * w);
                image_ops::resize_bilinear_backward(g, c, h, w, oh, ow, d);
            }
            Op::Crop { x, dims } => {
                let (c, h, w) = *dims;
                let (_, oh, ow) = node.value.dims3();
                let d = slot(grads, *x, c * h * w);
                for ch in 0..c {
                    for y in 0..oh {
                        let src = &g[(ch * oh + y) * ow..(ch * oh + y + 1) * ow];
                        let start = (ch * h + y) * w;
                        d[start..start + ow].iter_mut().zip(src).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (lq, c) = self.value(*q).dims2();
                let lk = self.value(*k).dims2().0;
                let (dq, dk, dv) = attention::backward(
                    self.data(*q),
                    self.data(*k),
                    self.data(*v),
                    probs,
                    g,
                    lq,
                    lk,
                    c,
                    *heads,
                );
                for (var, delta) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.needs(var) {
                        let len = delta.len();
                        slot(grads, var, len).iter_mut().zip(&delta).for_each(|(d, x)| *d += x);
                    }
                }
            }
        }
    }
}
