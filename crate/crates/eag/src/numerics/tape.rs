//! Reverse-mode differentiation over a fixed operation set.
//!
//! A [`Tape`] owns the forward values; [`Tape::backward`] walks nodes in
//! reverse creation order (a valid topological order, since operands always
//! precede results) and accumulates gradients. The op set is exactly what the
//! models need: matmul, layer norm, GELU, fused softmax attention, a
//! bidirectional depthwise temporal convolution, elementwise arithmetic, row
//! gather/assembly, row norms, powers, and reductions.
//!
//! Gradients of every op are validated against central differences in the
//! test suite; that check is the contract.

use std::cell::RefCell;
use std::sync::Arc;

use crate::numerics::tensor::{dgemm, Tensor};

const GELU_S2P: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

const TANH_A: [f64; 7] = [
    4.893_524_558_917_86e-3,
    6.372_619_288_754_36e-4,
    1.485_722_357_179_79e-5,
    5.122_297_090_371_14e-8,
    -8.604_671_522_137_35e-11,
    2.000_187_904_824_77e-13,
    -2.760_768_477_423_55e-16,
];
const TANH_B: [f64; 4] = [
    4.893_525_185_543_85e-3,
    2.268_434_632_439e-3,
    1.185_347_056_866_54e-4,
    1.198_258_394_667_02e-6,
];
const TANH_CLAMP: f64 = 7.99;

#[inline(always)]
fn horner(coefs: &[f64], s: f64) -> f64 {
    let mut acc = 0.0;
    for &c in coefs.iter().rev() {
        acc = acc * s + c;
    }
    acc
}

#[inline(always)]
fn horner_deriv(coefs: &[f64], s: f64) -> f64 {
    let mut acc = 0.0;
    for (i, &c) in coefs.iter().enumerate().skip(1).rev() {
        acc = acc * s + i as f64 * c;
    }
    acc
}

/// Rational tanh approximation (max error ~3e-8), branch-free so the GELU
/// loops autovectorize.
#[inline(always)]
fn fast_tanh(x: f64) -> f64 {
    let x = x.clamp(-TANH_CLAMP, TANH_CLAMP);
    let s = x * x;
    x * horner(&TANH_A, s) / horner(&TANH_B, s)
}

/// Value and exact derivative of [`fast_tanh`]; the backward pass must
/// differentiate the approximation itself for finite differences to agree.
#[inline(always)]
fn fast_tanh_and_deriv(x: f64) -> (f64, f64) {
    let inside = if x.abs() <= TANH_CLAMP { 1.0 } else { 0.0 };
    let x = x.clamp(-TANH_CLAMP, TANH_CLAMP);
    let s = x * x;
    let p = horner(&TANH_A, s);
    let q = horner(&TANH_B, s);
    let dpds = horner_deriv(&TANH_A, s);
    let dqds = horner_deriv(&TANH_B, s);
    let value = x * p / q;
    // d/dx [x p(s)/q(s)] = p/q + 2 s (p' q - p q') / q^2 with s = x^2
    let deriv = p / q + 2.0 * s * (dpds * q - p * dqds) / (q * q);
    (value, deriv * inside)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(&self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    /// [R,C] + broadcast [1,C]
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// [R,C] * broadcast [1,C]
    MulRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Matmul(usize, usize),
    Gelu(usize),
    Exp(usize),
    Ln(usize),
    LayerNorm {
        x: usize,
        eps: f64,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        batch: usize,
        heads: usize,
        tq: usize,
        tk: usize,
        bias: Option<Tensor>,
    },
    BidirConv {
        x: usize,
        kernel: usize,
        batch: usize,
        t: usize,
    },
    GatherRows {
        x: usize,
        idx: Arc<Vec<usize>>,
    },
    AssembleRows {
        sources: Arc<Vec<(usize, usize)>>,
    },
    RowNorm(usize),
    PowScalar {
        x: usize,
        p: f64,
    },
    Sum(usize),
    Mean(usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients keyed by tape variable. Only leaf gradients are retained after
/// backward; intermediate buffers are freed as soon as they are consumed.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[v.0].value)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    // ---- elementwise and broadcast arithmetic -------------------------------

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(va.shape(), vb.shape(), "add shapes");
            let mut out = va.clone();
            out.add_inplace(vb);
            out
        };
        self.push(value, Op::Add(a.0, b.0))
    }

    /// x [R,C] + row [1,C] broadcast over rows.
    pub fn add_row(&self, x: Var, row: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (vx, vr) = (&nodes[x.0].value, &nodes[row.0].value);
            let cols = vx.cols();
            assert_eq!(vr.len(), cols, "add_row width");
            let mut out = vx.clone();
            let rdat = vr.data();
            for chunk in out.data_mut().chunks_mut(cols) {
                for (o, r) in chunk.iter_mut().zip(rdat.iter()) {
                    *o += r;
                }
            }
            out
        };
        self.push(value, Op::AddRow(x.0, row.0))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(va.shape(), vb.shape(), "sub shapes");
            let mut out = va.clone();
            out.axpy_inplace(-1.0, vb);
            out
        };
        self.push(value, Op::Sub(a.0, b.0))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(va.shape(), vb.shape(), "mul shapes");
            let mut out = va.clone();
            for (o, y) in out.data_mut().iter_mut().zip(vb.data().iter()) {
                *o *= y;
            }
            out
        };
        self.push(value, Op::Mul(a.0, b.0))
    }

    /// x [R,C] * row [1,C] broadcast over rows.
    pub fn mul_row(&self, x: Var, row: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (vx, vr) = (&nodes[x.0].value, &nodes[row.0].value);
            let cols = vx.cols();
            assert_eq!(vr.len(), cols, "mul_row width");
            let mut out = vx.clone();
            let rdat = vr.data();
            for chunk in out.data_mut().chunks_mut(cols) {
                for (o, r) in chunk.iter_mut().zip(rdat.iter()) {
                    *o *= r;
                }
            }
            out
        };
        self.push(value, Op::MulRow(x.0, row.0))
    }

    pub fn scale(&self, x: Var, s: f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let mut out = nodes[x.0].value.clone();
            out.scale_inplace(s);
            out
        };
        self.push(value, Op::Scale(x.0, s))
    }

    pub fn add_scalar(&self, x: Var, s: f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let mut out = nodes[x.0].value.clone();
            for o in out.data_mut().iter_mut() {
                *o += s;
            }
            out
        };
        self.push(value, Op::AddScalar(x.0))
    }

    // ---- linear algebra -----------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.matmul(&nodes[b.0].value)
        };
        self.push(value, Op::Matmul(a.0, b.0))
    }

    /// matmul(x, w) + row-broadcast bias.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    // ---- nonlinearities -----------------------------------------------------

    pub fn gelu(&self, x: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let mut out = nodes[x.0].value.clone();
            for o in out.data_mut().iter_mut() {
                let x = *o;
                let u = GELU_S2P * (x + GELU_C * x * x * x);
                *o = 0.5 * x * (1.0 + fast_tanh(u));
            }
            out
        };
        self.push(value, Op::Gelu(x.0))
    }

    pub fn exp(&self, x: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let mut out = nodes[x.0].value.clone();
            for o in out.data_mut().iter_mut() {
                *o = o.exp();
            }
            out
        };
        self.push(value, Op::Exp(x.0))
    }

    pub fn ln(&self, x: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let mut out = nodes[x.0].value.clone();
            for o in out.data_mut().iter_mut() {
                *o = o.ln();
            }
            out
        };
        self.push(value, Op::Ln(x.0))
    }

    /// Row-wise layer normalization without affine parameters.
    pub fn layer_norm(&self, x: Var, eps: f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let vx = &nodes[x.0].value;
            let cols = vx.cols();
            let mut out = vx.clone();
            for row in out.data_mut().chunks_mut(cols) {
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * inv;
                }
            }
            out
        };
        self.push(value, Op::LayerNorm { x: x.0, eps })
    }

    // ---- fused attention ----------------------------------------------------

    /// Multi-head softmax attention.
    ///
    /// `q` is [batch*tq, d], `k`/`v` are [batch*tk, d] with d split across
    /// `heads`. `bias`, when present, is [batch, tq, tk] added to the logits
    /// (large negative entries mask padded keys). The bias is a constant: no
    /// gradient flows into it.
    pub fn attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        tq: usize,
        tk: usize,
        bias: Option<Tensor>,
    ) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (vq, vk, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
            attention_forward(vq, vk, vv, batch, heads, tq, tk, bias.as_ref())
        };
        self.push(value, Op::Attention { q: q.0, k: k.0, v: v.0, batch, heads, tq, tk, bias })
    }

    // ---- temporal convolution ------------------------------------------------

    /// Per-channel depthwise temporal convolution, applied forward and
    /// time-reversed with a shared kernel, summed. `x` is [batch*t, c],
    /// `kernel` is [klen, c]; tap j contributes at offsets -j and +j (the
    /// center tap once), with zero padding at sequence edges.
    pub fn bidir_conv(&self, x: Var, kernel: Var, batch: usize, t: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (vx, vk) = (&nodes[x.0].value, &nodes[kernel.0].value);
            let c = vx.cols();
            assert_eq!(vx.rows(), batch * t, "bidir_conv rows");
            assert_eq!(vk.cols(), c, "bidir_conv channels");
            let klen = vk.rows();
            let xd = vx.data();
            let kd = vk.data();
            let mut out = Tensor::zeros(&[batch * t, c]);
            let od = out.data_mut();
            for b in 0..batch {
                let base = b * t;
                for ti in 0..t {
                    let orow = (base + ti) * c;
                    for j in 0..klen {
                        if ti >= j {
                            let xrow = (base + ti - j) * c;
                            let krow = j * c;
                            for ci in 0..c {
                                od[orow + ci] += kd[krow + ci] * xd[xrow + ci];
                            }
                        }
                        if j >= 1 && ti + j < t {
                            let xrow = (base + ti + j) * c;
                            let krow = j * c;
                            for ci in 0..c {
                                od[orow + ci] += kd[krow + ci] * xd[xrow + ci];
                            }
                        }
                    }
                }
            }
            out
        };
        self.push(value, Op::BidirConv { x: x.0, kernel: kernel.0, batch, t })
    }

    // ---- row rearrangement ----------------------------------------------------

    /// out[i] = x[idx[i]].
    pub fn gather_rows(&self, x: Var, idx: Arc<Vec<usize>>) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let vx = &nodes[x.0].value;
            let cols = vx.cols();
            let mut out = Tensor::zeros(&[idx.len(), cols]);
            let xd = vx.data();
            let od = out.data_mut();
            for (i, &r) in idx.iter().enumerate() {
                od[i * cols..(i + 1) * cols].copy_from_slice(&xd[r * cols..(r + 1) * cols]);
            }
            out
        };
        self.push(value, Op::GatherRows { x: x.0, idx })
    }

    /// out[i] = value_of(sources[i].0)[sources[i].1]; sources may reference
    /// several nodes (token tables, encoder outputs, padding rows).
    pub fn assemble_rows(&self, sources: Arc<Vec<(Var, usize)>>) -> Var {
        let raw: Arc<Vec<(usize, usize)>> =
            Arc::new(sources.iter().map(|&(v, r)| (v.0, r)).collect());
        let value = {
            let nodes = self.nodes.borrow();
            assert!(!raw.is_empty(), "assemble_rows needs at least one row");
            let cols = nodes[raw[0].0].value.cols();
            let mut out = Tensor::zeros(&[raw.len(), cols]);
            let od = out.data_mut();
            for (i, &(nid, r)) in raw.iter().enumerate() {
                let src = &nodes[nid].value;
                debug_assert_eq!(src.cols(), cols, "assemble_rows width");
                od[i * cols..(i + 1) * cols]
                    .copy_from_slice(&src.data()[r * cols..(r + 1) * cols]);
            }
            out
        };
        self.push(value, Op::AssembleRows { sources: raw })
    }

    // ---- norms, powers, reductions --------------------------------------------

    /// Euclidean norm of each row: [R,C] -> [R,1].
    pub fn row_norm(&self, x: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let vx = &nodes[x.0].value;
            let cols = vx.cols();
            let rows = vx.rows();
            let mut out = Tensor::zeros(&[rows, 1]);
            for (i, row) in vx.data().chunks(cols).enumerate() {
                out.data_mut()[i] = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            }
            out
        };
        self.push(value, Op::RowNorm(x.0))
    }

    /// Elementwise x^p on a nonnegative domain (used on row norms).
    pub fn pow_scalar(&self, x: Var, p: f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let mut out = nodes[x.0].value.clone();
            if (p - 1.0).abs() > 0.0 {
                for o in out.data_mut().iter_mut() {
                    *o = o.powf(p);
                }
            }
            out
        };
        self.push(value, Op::PowScalar { x: x.0, p })
    }

    pub fn sum(&self, x: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            Tensor::scalar(nodes[x.0].value.sum())
        };
        self.push(value, Op::Sum(x.0))
    }

    pub fn mean(&self, x: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            Tensor::scalar(nodes[x.0].value.mean())
        };
        self.push(value, Op::Mean(x.0))
    }

    // ---- backward -------------------------------------------------------------

    /// Backpropagate from a scalar loss. Returns gradients for leaf nodes;
    /// intermediate gradients are freed as soon as they have been consumed.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, &nodes[*a].value).add_inplace(&g);
                    acc(&mut grads, *b, &nodes[*b].value).add_inplace(&g);
                }
                Op::AddRow(x, r) => {
                    acc(&mut grads, *x, &nodes[*x].value).add_inplace(&g);
                    let cols = nodes[*r].value.len();
                    let gr = acc(&mut grads, *r, &nodes[*r].value);
                    for chunk in g.data().chunks(cols) {
                        for (o, v) in gr.data_mut().iter_mut().zip(chunk.iter()) {
                            *o += v;
                        }
                    }
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, &nodes[*a].value).add_inplace(&g);
                    acc(&mut grads, *b, &nodes[*b].value).axpy_inplace(-1.0, &g);
                }
                Op::Mul(a, b) => {
                    {
                        let vb = &nodes[*b].value;
                        let ga = acc(&mut grads, *a, &nodes[*a].value);
                        for ((o, gv), bv) in
                            ga.data_mut().iter_mut().zip(g.data().iter()).zip(vb.data().iter())
                        {
                            *o += gv * bv;
                        }
                    }
                    {
                        let va = &nodes[*a].value;
                        let gb = acc(&mut grads, *b, &nodes[*b].value);
                        for ((o, gv), av) in
                            gb.data_mut().iter_mut().zip(g.data().iter()).zip(va.data().iter())
                        {
                            *o += gv * av;
                        }
                    }
                }
                Op::MulRow(x, r) => {
                    let cols = nodes[*r].value.len();
                    {
                        let vr = &nodes[*r].value;
                        let gx = acc(&mut grads, *x, &nodes[*x].value);
                        for (chunk, gchunk) in
                            gx.data_mut().chunks_mut(cols).zip(g.data().chunks(cols))
                        {
                            for ((o, gv), rv) in
                                chunk.iter_mut().zip(gchunk.iter()).zip(vr.data().iter())
                            {
                                *o += gv * rv;
                            }
                        }
                    }
                    {
                        let vx = &nodes[*x].value;
                        let gr = acc(&mut grads, *r, &nodes[*r].value);
                        for (xchunk, gchunk) in vx.data().chunks(cols).zip(g.data().chunks(cols))
                        {
                            for ((o, gv), xv) in
                                gr.data_mut().iter_mut().zip(gchunk.iter()).zip(xchunk.iter())
                            {
                                *o += gv * xv;
                            }
                        }
                    }
                }
                Op::Scale(x, s) => {
                    acc(&mut grads, *x, &nodes[*x].value).axpy_inplace(*s, &g);
                }
                Op::AddScalar(x) => {
                    acc(&mut grads, *x, &nodes[*x].value).add_inplace(&g);
                }
                Op::Matmul(a, b) => {
                    let va = &nodes[*a].value;
                    let vb = &nodes[*b].value;
                    let (m, kk) = (va.rows(), va.cols());
                    let n = vb.cols();
                    // dA += g . B^T
                    {
                        let ga = acc(&mut grads, *a, va);
                        dgemm(
                            m, n, kk, 1.0,
                            g.data().as_ptr(), n as isize, 1,
                            vb.data().as_ptr(), 1, n as isize,
                            1.0,
                            ga.data_mut().as_mut_ptr(), kk as isize, 1,
                        );
                    }
                    // dB += A^T . g
                    {
                        let gb = acc(&mut grads, *b, vb);
                        dgemm(
                            kk, m, n, 1.0,
                            va.data().as_ptr(), 1, kk as isize,
                            g.data().as_ptr(), n as isize, 1,
                            1.0,
                            gb.data_mut().as_mut_ptr(), n as isize, 1,
                        );
                    }
                }
                Op::Gelu(x) => {
                    let vx = &nodes[*x].value;
                    let gx = acc(&mut grads, *x, vx);
                    for ((o, gv), &xv) in
                        gx.data_mut().iter_mut().zip(g.data().iter()).zip(vx.data().iter())
                    {
                        let u = GELU_S2P * (xv + GELU_C * xv * xv * xv);
                        let (t, dt) = fast_tanh_and_deriv(u);
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * xv * dt * GELU_S2P * (1.0 + 3.0 * GELU_C * xv * xv);
                        *o += gv * d;
                    }
                }
                Op::Exp(x) => {
                    let vy = &node.value;
                    let gx = acc(&mut grads, *x, &nodes[*x].value);
                    for ((o, gv), &yv) in
                        gx.data_mut().iter_mut().zip(g.data().iter()).zip(vy.data().iter())
                    {
                        *o += gv * yv;
                    }
                }
                Op::Ln(x) => {
                    let vx = &nodes[*x].value;
                    let gx = acc(&mut grads, *x, vx);
                    for ((o, gv), &xv) in
                        gx.data_mut().iter_mut().zip(g.data().iter()).zip(vx.data().iter())
                    {
                        *o += gv / xv;
                    }
                }
                Op::LayerNorm { x, eps } => {
                    let vx = &nodes[*x].value;
                    let cols = vx.cols();
                    let gx = acc(&mut grads, *x, vx);
                    for ((xrow, grow), orow) in vx
                        .data()
                        .chunks(cols)
                        .zip(g.data().chunks(cols))
                        .zip(gx.data_mut().chunks_mut(cols))
                    {
                        let mean = xrow.iter().sum::<f64>() / cols as f64;
                        let var =
                            xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gmean = grow.iter().sum::<f64>() / cols as f64;
                        let ghdot = xrow
                            .iter()
                            .zip(grow.iter())
                            .map(|(&xv, &gv)| gv * (xv - mean) * inv)
                            .sum::<f64>()
                            / cols as f64;
                        for ((o, &gv), &xv) in
                            orow.iter_mut().zip(grow.iter()).zip(xrow.iter())
                        {
                            let xh = (xv - mean) * inv;
                            *o += inv * (gv - gmean - xh * ghdot);
                        }
                    }
                }
                Op::Attention { q, k, v, batch, heads, tq, tk, bias } => {
                    let vq = &nodes[*q].value;
                    let vk = &nodes[*k].value;
                    let vv = &nodes[*v].value;
                    let (dq, dk, dv) = attention_backward(
                        vq, vk, vv, &g, *batch, *heads, *tq, *tk, bias.as_ref(),
                    );
                    acc(&mut grads, *q, vq).add_inplace(&dq);
                    acc(&mut grads, *k, vk).add_inplace(&dk);
                    acc(&mut grads, *v, vv).add_inplace(&dv);
                }
                Op::BidirConv { x, kernel, batch, t } => {
                    let vx = &nodes[*x].value;
                    let vk = &nodes[*kernel].value;
                    let c = vx.cols();
                    let klen = vk.rows();
                    let gd = g.data();
                    {
                        let gx = acc(&mut grads, *x, vx);
                        let gxd = gx.data_mut();
                        let kd = vk.data();
                        for b in 0..*batch {
                            let base = b * t;
                            for s in 0..*t {
                                let xrow = (base + s) * c;
                                for j in 0..klen {
                                    if s + j < *t {
                                        let grow = (base + s + j) * c;
                                        let krow = j * c;
                                        for ci in 0..c {
                                            gxd[xrow + ci] += kd[krow + ci] * gd[grow + ci];
                                        }
                                    }
                                    if j >= 1 && s >= j {
                                        let grow = (base + s - j) * c;
                                        let krow = j * c;
                                        for ci in 0..c {
                                            gxd[xrow + ci] += kd[krow + ci] * gd[grow + ci];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    {
                        let gk = acc(&mut grads, *kernel, vk);
                        let gkd = gk.data_mut();
                        let xd = vx.data();
                        for b in 0..*batch {
                            let base = b * t;
                            for ti in 0..*t {
                                let grow = (base + ti) * c;
                                for j in 0..klen {
                                    let krow = j * c;
                                    if ti >= j {
                                        let xrow = (base + ti - j) * c;
                                        for ci in 0..c {
                                            gkd[krow + ci] += gd[grow + ci] * xd[xrow + ci];
                                        }
                                    }
                                    if j >= 1 && ti + j < *t {
                                        let xrow = (base + ti + j) * c;
                                        for ci in 0..c {
                                            gkd[krow + ci] += gd[grow + ci] * xd[xrow + ci];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::GatherRows { x, idx } => {
                    let cols = nodes[*x].value.cols();
                    let gx = acc(&mut grads, *x, &nodes[*x].value);
                    let gxd = gx.data_mut();
                    for (i, &r) in idx.iter().enumerate() {
                        let src = &g.data()[i * cols..(i + 1) * cols];
                        for (o, v) in gxd[r * cols..(r + 1) * cols].iter_mut().zip(src.iter()) {
                            *o += v;
                        }
                    }
                }
                Op::AssembleRows { sources } => {
                    let cols = node.value.cols();
                    for (i, &(nid, r)) in sources.iter().enumerate() {
                        let gsrc = acc(&mut grads, nid, &nodes[nid].value);
                        let gd = gsrc.data_mut();
                        let src = &g.data()[i * cols..(i + 1) * cols];
                        for (o, v) in gd[r * cols..(r + 1) * cols].iter_mut().zip(src.iter()) {
                            *o += v;
                        }
                    }
                }
                Op::RowNorm(x) => {
                    let vx = &nodes[*x].value;
                    let vy = &node.value;
                    let cols = vx.cols();
                    let gx = acc(&mut grads, *x, vx);
                    for ((i, xrow), orow) in
                        vx.data().chunks(cols).enumerate().zip(gx.data_mut().chunks_mut(cols))
                    {
                        let norm = vy.data()[i];
                        if norm > 1e-300 {
                            let gv = g.data()[i];
                            for (o, &xv) in orow.iter_mut().zip(xrow.iter()) {
                                *o += gv * xv / norm;
                            }
                        }
                    }
                }
                Op::PowScalar { x, p } => {
                    let vx = &nodes[*x].value;
                    let gx = acc(&mut grads, *x, vx);
                    if (*p - 1.0).abs() == 0.0 {
                        gx.add_inplace(&g);
                    } else {
                        for ((o, gv), &xv) in
                            gx.data_mut().iter_mut().zip(g.data().iter()).zip(vx.data().iter())
                        {
                            if xv > 0.0 {
                                *o += gv * p * xv.powf(p - 1.0);
                            }
                        }
                    }
                }
                Op::Sum(x) => {
                    let gv = g.data()[0];
                    let gx = acc(&mut grads, *x, &nodes[*x].value);
                    for o in gx.data_mut().iter_mut() {
                        *o += gv;
                    }
                }
                Op::Mean(x) => {
                    let n = nodes[*x].value.len() as f64;
                    let gv = g.data()[0] / n;
                    let gx = acc(&mut grads, *x, &nodes[*x].value);
                    for o in gx.data_mut().iter_mut() {
                        *o += gv;
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn acc<'a>(grads: &'a mut [Option<Tensor>], id: usize, like: &Tensor) -> &'a mut Tensor {
    grads[id].get_or_insert_with(|| Tensor::zeros(like.shape()))
}

#[allow(clippy::too_many_arguments)]
fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    batch: usize,
    heads: usize,
    tq: usize,
    tk: usize,
    bias: Option<&Tensor>,
) -> Tensor {
    let d = q.cols();
    assert_eq!(d % heads, 0, "embed dim {} not divisible by heads {}", d, heads);
    assert_eq!(q.rows(), batch * tq, "attention q rows");
    assert_eq!(k.rows(), batch * tk, "attention k rows");
    assert_eq!(v.rows(), batch * tk, "attention v rows");
    if let Some(b) = bias {
        assert_eq!(b.len(), batch * tq * tk, "attention bias size");
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor::zeros(&[batch * tq, d]);
    let mut probs = vec![0.0f64; tq * tk];
    for b in 0..batch {
        for h in 0..heads {
            let qp = unsafe { q.data().as_ptr().add(b * tq * d + h * dh) };
            let kp = unsafe { k.data().as_ptr().add(b * tk * d + h * dh) };
            let vp = unsafe { v.data().as_ptr().add(b * tk * d + h * dh) };
            // scores = Q K^T * scale
            dgemm(
                tq, dh, tk, scale,
                qp, d as isize, 1,
                kp, 1, d as isize,
                0.0,
                probs.as_mut_ptr(), tk as isize, 1,
            );
            if let Some(bt) = bias {
                let bd = &bt.data()[b * tq * tk..(b + 1) * tq * tk];
                for (p, &bv) in probs.iter_mut().zip(bd.iter()) {
                    *p += bv;
                }
            }
            softmax_rows(&mut probs, tq, tk);
            // out = P V
            let op = unsafe { out.data_mut().as_mut_ptr().add(b * tq * d + h * dh) };
            dgemm(
                tq, tk, dh, 1.0,
                probs.as_ptr(), tk as isize, 1,
                vp, d as isize, 1,
                0.0,
                op, d as isize, 1,
            );
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    gout: &Tensor,
    batch: usize,
    heads: usize,
    tq: usize,
    tk: usize,
    bias: Option<&Tensor>,
) -> (Tensor, Tensor, Tensor) {
    let d = q.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Tensor::zeros(&[batch * tq, d]);
    let mut dk = Tensor::zeros(&[batch * tk, d]);
    let mut dv = Tensor::zeros(&[batch * tk, d]);
    let mut probs = vec![0.0f64; tq * tk];
    let mut dprobs = vec![0.0f64; tq * tk];
    for b in 0..batch {
        for h in 0..heads {
            let qp = unsafe { q.data().as_ptr().add(b * tq * d + h * dh) };
            let kp = unsafe { k.data().as_ptr().add(b * tk * d + h * dh) };
            let vp = unsafe { v.data().as_ptr().add(b * tk * d + h * dh) };
            let gp = unsafe { gout.data().as_ptr().add(b * tq * d + h * dh) };
            // Recompute probabilities.
            dgemm(
                tq, dh, tk, scale,
                qp, d as isize, 1,
                kp, 1, d as isize,
                0.0,
                probs.as_mut_ptr(), tk as isize, 1,
            );
            if let Some(bt) = bias {
                let bd = &bt.data()[b * tq * tk..(b + 1) * tq * tk];
                for (p, &bv) in probs.iter_mut().zip(bd.iter()) {
                    *p += bv;
                }
            }
            softmax_rows(&mut probs, tq, tk);
            // dV += P^T gO
            let dvp = unsafe { dv.data_mut().as_mut_ptr().add(b * tk * d + h * dh) };
            dgemm(
                tk, tq, dh, 1.0,
                probs.as_ptr(), 1, tk as isize,
                gp, d as isize, 1,
                1.0,
                dvp, d as isize, 1,
            );
            // dP = gO V^T
            dgemm(
                tq, dh, tk, 1.0,
                gp, d as isize, 1,
                vp, 1, d as isize,
                0.0,
                dprobs.as_mut_ptr(), tk as isize, 1,
            );
            // dS = P .* (dP - rowsum(dP .* P))
            for i in 0..tq {
                let row = &mut dprobs[i * tk..(i + 1) * tk];
                let prow = &probs[i * tk..(i + 1) * tk];
                let dot: f64 = row.iter().zip(prow.iter()).map(|(a, b)| a * b).sum();
                for (dp, &pv) in row.iter_mut().zip(prow.iter()) {
                    *dp = pv * (*dp - dot);
                }
            }
            // dQ += dS K * scale
            let dqp = unsafe { dq.data_mut().as_mut_ptr().add(b * tq * d + h * dh) };
            dgemm(
                tq, tk, dh, scale,
                dprobs.as_ptr(), tk as isize, 1,
                kp, d as isize, 1,
                1.0,
                dqp, d as isize, 1,
            );
            // dK += dS^T Q * scale
            let dkp = unsafe { dk.data_mut().as_mut_ptr().add(b * tk * d + h * dh) };
            dgemm(
                tk, tq, dh, scale,
                dprobs.as_ptr(), 1, tk as isize,
                qp, d as isize, 1,
                1.0,
                dkp, d as isize, 1,
            );
        }
    }
    (dq, dk, dv)
}

fn softmax_rows(scores: &mut [f64], rows: usize, cols: usize) {
    for i in 0..rows {
        let row = &mut scores[i * cols..(i + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}
