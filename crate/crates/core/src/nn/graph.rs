//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse creation order, which is a
//! valid reverse topological order because nodes can only reference earlier
//! nodes.

use std::collections::HashMap;

use super::attention::{self, AttnSaved, AttnWeights};
use super::conv::{self, ConvGeom};
use super::norm::{self, GroupNormSaved};
use super::{NnError, ParamId, ParamSet, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Square(Var),
    Exp(Var),
    Silu(Var),
    Clamp(Var, f32, f32),
    Sum(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f32>,
    },
    GroupNorm {
        x: Var,
        gain: Var,
        bias: Var,
        groups: usize,
        saved: GroupNormSaved,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    AddChannel {
        x: Var,
        v: Var,
    },
    Upsample2x(Var),
    Concat(Var, Var),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Attention {
        x: Var,
        w: [Var; 5],
        saved: AttnSaved,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Vec<f32>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    no_grad: bool,
}

fn add_into(dst: &mut Option<Vec<f32>>, src: &[f32]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

fn add_owned(dst: &mut Option<Vec<f32>>, src: Vec<f32>) {
    match dst {
        Some(d) => d.iter_mut().zip(&src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src),
    }
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f32) -> f32 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that records no gradient bookkeeping (inference only).
    pub fn inference() -> Self {
        Self {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && !self.no_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is wanted (e.g. for gradient checks).
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a trainable parameter. Repeated calls reuse one node.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(params.value(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        self.param_vars.insert(id, v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(NnError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn map(&mut self, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let t = &self.nodes[a.0].value;
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op, what: &str) -> Result<Var, NnError> {
        self.same_shape(a, b, what)?;
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f32::exp, Op::Exp(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.map(a, silu, Op::Silu(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Var {
        self.map(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().map(|&v| v as f64).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s as f32), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.numel().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f32)
    }

    /// Cross-correlation of `x: (N, Cin, H, W)` with `w: (Cout, Cin, K, K)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var, NnError> {
        let dims = self.value(x).dims4()?;
        let ws = self.shape(w).to_vec();
        let [cout, cin, k, k2] = ws[..] else {
            return Err(NnError::Shape(format!("conv kernel must be rank 4, got {ws:?}")));
        };
        if k != k2 || cin != dims.1 {
            return Err(NnError::Shape(format!(
                "conv kernel {ws:?} incompatible with input {:?}",
                self.shape(x)
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(NnError::Shape(format!("conv bias {:?} != [{cout}]", self.shape(b))));
            }
        }
        let geom = ConvGeom::new(dims, cout, k, stride, pad)
            .ok_or_else(|| NnError::Shape(format!("conv kernel {k} stride {stride} pad {pad} too large for {dims:?}")))?;
        let bias = b.map(|b| self.value(b).data());
        let (out, cols) = conv::forward(self.value(x).data(), self.value(w).data(), bias, &geom);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let out = Tensor::new(vec![geom.n, cout, geom.ho, geom.wo], out)?;
        let cols = if rg && !self.no_grad { cols } else { Vec::new() };
        Ok(self.push(out, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gain: Var, bias: Var, eps: f32) -> Result<Var, NnError> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(NnError::Groups { channels: c, groups });
        }
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(NnError::Shape(format!("group norm affine params must be [{c}]")));
        }
        let (y, saved) = norm::forward(
            self.value(x).data(),
            (n, c, h * w),
            groups,
            self.value(gain).data(),
            self.value(bias).data(),
            eps,
        );
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let out = Tensor::new(self.shape(x).to_vec(), y)?;
        Ok(self.push(out, Op::GroupNorm { x, gain, bias, groups, saved }, rg))
    }

    /// `y = x W^T + b` for `x: (N, D)`, `W: (O, D)`, `b: (O)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let ([n, d], [o, d2]) = (&xs[..], &ws[..]) else {
            return Err(NnError::Shape(format!("linear expects rank-2 input and weight, got {xs:?}, {ws:?}")));
        };
        let (n, d, o) = (*n, *d, *o);
        if d != *d2 || self.shape(b) != [o] {
            return Err(NnError::Shape(format!("linear shapes {xs:?} x {ws:?}")));
        }
        let mut y = vec![0.0f32; n * o];
        super::gemm::gemm(n, d, o, self.value(x).data(), super::gemm::Layout::N, self.value(w).data(), super::gemm::Layout::T, 0.0, &mut y);
        let bias = self.value(b).data();
        for row in y.chunks_exact_mut(o) {
            row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, o], y)?, Op::Linear { x, w, b }, rg))
    }

    /// Adds a per-(sample, channel) value `v: (N, C)` to every pixel of `x: (N, C, H, W)`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var, NnError> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.shape(v) != [n, c] {
            return Err(NnError::Shape(format!("channel add {:?} onto {:?}", self.shape(v), self.shape(x))));
        }
        let hw = h * w;
        let mut out = self.value(x).data().to_vec();
        let vals = self.value(v).data();
        for (i, chunk) in out.chunks_exact_mut(hw).enumerate() {
            chunk.iter_mut().for_each(|p| *p += vals[i]);
        }
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(Tensor::new(self.shape(x).to_vec(), out)?, Op::AddChannel { x, v }, rg))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var, NnError> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let src = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0f32; n * c * h2 * w2];
        for (plane, dst) in src.chunks_exact(h * w).zip(out.chunks_exact_mut(h2 * w2)) {
            for y in 0..h2 {
                for xx in 0..w2 {
                    dst[y * w2 + xx] = plane[(y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, c, h2, w2], out)?, Op::Upsample2x(x), rg))
    }

    /// Channel-wise concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (n, ca, h, w) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(NnError::Shape(format!("concat {:?} with {:?}", self.shape(a), self.shape(b))));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for s in 0..n {
            out.extend_from_slice(&self.value(a).data()[s * ca * hw..(s + 1) * ca * hw]);
            out.extend_from_slice(&self.value(b).data()[s * cb * hw..(s + 1) * cb * hw]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, ca + cb, h, w], out)?, Op::Concat(a, b), rg))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if start + len > c || len == 0 {
            return Err(NnError::Shape(format!("channel slice {start}..{} of {c}", start + len)));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * len * hw);
        let src = self.value(x).data();
        for s in 0..n {
            out.extend_from_slice(&src[(s * c + start) * hw..(s * c + start + len) * hw]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, len, h, w], out)?, Op::SliceChannels { x, start }, rg))
    }

    /// Residual single-head self-attention over spatial positions.
    /// `w` holds `[wq, bq, wk, wv, bv]` with weights `(C, C)` and biases `(C)`.
    pub fn self_attention(&mut self, x: Var, w: [Var; 5]) -> Result<Var, NnError> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        for (i, v) in w.iter().enumerate() {
            let expect: &[usize] = if matches!(i, 1 | 4) { &[c] } else { &[c, c] };
            if self.shape(*v) != expect {
                return Err(NnError::Shape(format!(
                    "attention projection {i} has shape {:?}, expected {expect:?}",
                    self.shape(*v)
                )));
            }
        }
        let weights = self.attn_weights(&w);
        let (out, saved) = attention::forward(self.value(x).data(), (n, c, h * wd), &weights);
        let rg = self.rg(x) || w.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::new(self.shape(x).to_vec(), out)?, Op::Attention { x, w, saved }, rg))
    }

    /// Softmax attention matrices computed by [`Graph::self_attention`] on the
    /// same inputs; shape `(N, HW, HW)`.
    pub fn attention_matrix(&self, x: Var, w: [Var; 5]) -> Result<Tensor, NnError> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let weights = self.attn_weights(&w);
        let p = attention::attention_weights(self.value(x).data(), (n, c, h * wd), &weights);
        Tensor::new(vec![n, h * wd, h * wd], p)
    }

    fn attn_weights(&self, w: &[Var; 5]) -> AttnWeights<'_> {
        AttnWeights {
            wq: self.value(w[0]).data(),
            bq: self.value(w[1]).data(),
            wk: self.value(w[2]).data(),
            wv: self.value(w[3]).data(),
            bv: self.value(w[4]).data(),
        }
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads, NnError> {
        if self.value(loss).numel() != 1 {
            return Err(NnError::Shape(format!("backward needs a scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        for g in grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFinite("gradient".into()));
            }
        }
        Ok(Grads { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.rg(*b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.rg(*b) {
                    add_owned(&mut grads[b.0], g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    add_owned(&mut grads[a.0], g.iter().zip(val(*b)).map(|(g, y)| g * y).collect());
                }
                if self.rg(*b) {
                    add_owned(&mut grads[b.0], g.iter().zip(val(*a)).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, s) => add_owned(&mut grads[a.0], g.iter().map(|v| v * s).collect()),
            Op::Square(a) => {
                add_owned(&mut grads[a.0], g.iter().zip(val(*a)).map(|(g, x)| 2.0 * g * x).collect())
            }
            Op::Exp(a) => add_owned(
                &mut grads[a.0],
                g.iter().zip(node.value.data()).map(|(g, y)| g * y).collect(),
            ),
            Op::Silu(a) => add_owned(
                &mut grads[a.0],
                g.iter().zip(val(*a)).map(|(g, &x)| g * silu_grad(x)).collect(),
            ),
            Op::Clamp(a, lo, hi) => add_owned(
                &mut grads[a.0],
                g.iter()
                    .zip(val(*a))
                    .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.numel();
                add_owned(&mut grads[a.0], vec![g[0]; n]);
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let cg = conv::backward(g, cols, val(*w), geom, self.rg(*x));
                if let Some(dx) = cg.dx {
                    add_owned(&mut grads[x.0], dx);
                }
                if self.rg(*w) {
                    add_owned(&mut grads[w.0], cg.dw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        add_owned(&mut grads[b.0], cg.db);
                    }
                }
            }
            Op::GroupNorm { x, gain, bias, groups, saved } => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4().expect("checked in forward");
                let gg = norm::backward(g, saved, (n, c, h * w), *groups, val(*gain));
                if self.rg(*x) {
                    add_owned(&mut grads[x.0], gg.dx);
                }
                if self.rg(*gain) {
                    add_owned(&mut grads[gain.0], gg.dgain);
                }
                if self.rg(*bias) {
                    add_owned(&mut grads[bias.0], gg.dbias);
                }
            }
            Op::Linear { x, w, b } => {
                use super::gemm::{gemm, Layout};
                let xs = self.shape(*x);
                let (n, d) = (xs[0], xs[1]);
                let o = self.shape(*w)[0];
                if self.rg(*x) {
                    let mut dx = vec![0.0f32; n * d];
                    gemm(n, o, d, g, Layout::N, val(*w), Layout::N, 0.0, &mut dx);
                    add_owned(&mut grads[x.0], dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0f32; o * d];
                    gemm(o, n, d, g, Layout::T, val(*x), Layout::N, 0.0, &mut dw);
                    add_owned(&mut grads[w.0], dw);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0f32; o];
                    for row in g.chunks_exact(o) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    add_owned(&mut grads[b.0], db);
                }
            }
            Op::AddChannel { x, v } => {
                if self.rg(*x) {
                    add_into(&mut grads[x.0], g);
                }
                if self.rg(*v) {
                    let nc = self.nodes[v.0].value.numel();
                    let hw = g.len() / nc;
                    add_owned(&mut grads[v.0], g.chunks_exact(hw).map(|c| c.iter().sum()).collect());
                }
            }
            Op::Upsample2x(x) => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4().expect("checked in forward");
                let mut dx = vec![0.0f32; n * c * h * w];
                let w2 = 2 * w;
                for (dst, src) in dx.chunks_exact_mut(h * w).zip(g.chunks_exact(4 * h * w)) {
                    for y in 0..2 * h {
                        for xx in 0..w2 {
                            dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
                        }
                    }
                }
                add_owned(&mut grads[x.0], dx);
            }
            Op::Concat(a, b) => {
                let (n, ca, h, w) = self.nodes[a.0].value.dims4().expect("checked in forward");
                let cb = self.nodes[b.0].value.dims4().expect("checked in forward").1;
                let hw = h * w;
                let per = (ca + cb) * hw;
                if self.rg(*a) {
                    let mut da = Vec::with_capacity(n * ca * hw);
                    for s in 0..n {
                        da.extend_from_slice(&g[s * per..s * per + ca * hw]);
                    }
                    add_owned(&mut grads[a.0], da);
                }
                if self.rg(*b) {
                    let mut db = Vec::with_capacity(n * cb * hw);
                    for s in 0..n {
                        db.extend_from_slice(&g[s * per + ca * hw..(s + 1) * per]);
                    }
                    add_owned(&mut grads[b.0], db);
                }
            }
            Op::SliceChannels { x, start } => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4().expect("checked in forward");
                let len = node.value.shape()[1];
                let hw = h * w;
                let mut dx = vec![0.0f32; n * c * hw];
                for s in 0..n {
                    dx[(s * c + start) * hw..(s * c + start + len) * hw]
                        .copy_from_slice(&g[s * len * hw..(s + 1) * len * hw]);
                }
                add_owned(&mut grads[x.0], dx);
            }
            Op::Attention { x, w, saved } => {
                let (n, c, h, wd) = self.nodes[x.0].value.dims4().expect("checked in forward");
                let weights = self.attn_weights(w);
                let ag = attention::backward(g, val(*x), (n, c, h * wd), &weights, saved);
                if self.rg(*x) {
                    add_owned(&mut grads[x.0], ag.dx);
                }
                for (v, dp) in w.iter().zip(ag.dparams) {
                    if self.rg(*v) {
                        add_owned(&mut grads[v.0], dp);
                    }
                }
            }
        }
    }

    /// Adds the gradients of every parameter leaf into the parameter set's
    /// gradient buffers.
    pub fn accumulate_param_grads(&self, grads: &Grads, params: &mut ParamSet) {
        for (&id, &v) in &self.param_vars {
            if let Some(g) = grads.get(v) {
                params
                    .grad_mut(id)
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += b);
            }
        }
    }
}
