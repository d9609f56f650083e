//! Reverse-mode differentiation over a linear tape.
//!
//! Every op materializes its output immediately and appends a node; node
//! indices are therefore a topological order and `backward` simply walks
//! them in reverse. Any op whose output contains NaN or an infinity fails
//! at the point of creation.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::shift;
use crate::tensor::Tensor;
use crate::wkv::{self, WkvInputs};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Silu,
    SquaredRelu,
    Tanh,
    Sigmoid,
    Exp,
    /// `exp(-exp(x))` with `x` clamped to the decay range first.
    DecayFactor,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    MulBroadcast(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        groups: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Lerp { x: Var, shifted: Var, eta: Var },
    QuadShift { x: Var, batch: usize, h: usize, w: usize },
    BiShift { x: Var, batch: usize, mask: Option<Vec<bool>> },
    RowFill { x: Var, keep: Vec<bool> },
    Wkv { r: Var, k: Var, v: Var, w_tilde: Var, u: Var, heads: usize },
    MeanPool { x: Var, valid: Vec<bool>, counts: Vec<usize> },
    L2Normalize { x: Var, norms: Vec<f64> },
    ClipLoss { img: Var, txt: Var, theta: Var, d_img: Vec<f64>, d_txt: Vec<f64>, d_theta: f64 },
    Sum(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Reshape(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBroadcast(a, b)
            | Op::MulBroadcast(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::AddScalar(a) | Op::Unary(a, _) | Op::Sum(a) | Op::Reshape(a) => {
                vec![*a]
            }
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Lerp { x, shifted, eta } => vec![*x, *shifted, *eta],
            Op::QuadShift { x, .. }
            | Op::BiShift { x, .. }
            | Op::RowFill { x, .. }
            | Op::MeanPool { x, .. }
            | Op::L2Normalize { x, .. } => vec![*x],
            Op::Wkv { r, k, v, w_tilde, u, .. } => vec![*r, *k, *v, *w_tilde, *u],
            Op::ClipLoss { img, txt, theta, .. } => vec![*img, *txt, *theta],
            Op::Embedding { table, .. } => vec![*table],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for a single reverse pass.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Trainable input; gradients accumulate into it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
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

    /// Gradient as a tensor shaped like the node; zeros if none reached it.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone())
                .expect("gradient shape tracks value shape"),
            None => Tensor::zeros(node.value.shape().to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn suffix_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::mismatch(op, sa, sb));
        }
        Ok(())
    }

    // ---- ops -----------------------------------------------------------

    /// `[.., k] · [k, n] -> [.., n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || *sa.last().unwrap() != sb[0] {
            return Err(Error::mismatch("matmul", &sa, &sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).len() / k;
        let mut out = vec![0.0; m * n];
        math::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, k, n }, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.suffix_shape("add_broadcast", a, b)?;
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_exact_mut(bv.len()) {
            chunk.iter_mut().zip(bv).for_each(|(o, &y)| *o += y);
        }
        self.push(out, Op::AddBroadcast(a, b), "add_broadcast")
    }

    /// `a ⊙ b` where `b`'s shape is a trailing suffix of `a`'s.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.suffix_shape("mul_broadcast", a, b)?;
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_exact_mut(bv.len()) {
            chunk.iter_mut().zip(bv).for_each(|(o, &y)| *o *= y);
        }
        self.push(out, Op::MulBroadcast(a, b), "mul_broadcast")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a), "add_scalar")
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Result<Var> {
        let f: fn(f64) -> f64 = match kind {
            Unary::Silu => math::silu,
            Unary::SquaredRelu => math::squared_relu,
            Unary::Tanh => math::tanh,
            Unary::Sigmoid => math::sigmoid,
            Unary::Exp => math::exp,
            Unary::DecayFactor => wkv::decay_factor,
        };
        let out = self.value(a).map(f);
        let name = match kind {
            Unary::Silu => "silu",
            Unary::SquaredRelu => "squared_relu",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Exp => "exp",
            Unary::DecayFactor => "decay_factor",
        };
        self.push(out, Op::Unary(a, kind), name)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Silu)
    }

    pub fn squared_relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::SquaredRelu)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.group_norm(x, gain, bias, 1, eps)
    }

    /// Layer norm applied independently to `groups` equal slices of the
    /// trailing axis, followed by a per-channel affine map.
    pub fn group_norm(&mut self, x: Var, gain: Var, bias: Var, groups: usize, eps: f64) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.value(x).rank() == 0 || self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::mismatch("layer_norm", self.shape(x), self.shape(gain)));
        }
        if groups == 0 || !c.is_multiple_of(groups) {
            return Err(Error::invalid("layer_norm groups must divide the channel count"));
        }
        if eps.is_nan() || eps < 0.0 {
            return Err(Error::invalid("layer_norm eps must be non-negative"));
        }
        let d = c / groups;
        let xv = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = Vec::with_capacity(xv.len() / d);
        for ((seg, o), xh) in xv
            .data()
            .chunks_exact(d)
            .zip(out.chunks_exact_mut(d))
            .zip(xhat.chunks_exact_mut(d))
        {
            let mean = seg.iter().sum::<f64>() / d as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / math::sqrt(var + eps);
            rstd.push(r);
            xh.iter_mut().zip(seg).for_each(|(h, v)| *h = (v - mean) * r);
            let start = ((rstd.len() - 1) * d) % c;
            for j in 0..d {
                o[j] = xh[j] * g[start + j] + b[start + j];
            }
        }
        let shape = xv.shape().to_vec();
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            groups,
            xhat,
            rstd,
        };
        self.push(Tensor::new(shape, out)?, op, "layer_norm")
    }

    /// `x + (1 - eta) ⊙ shifted`; `eta` is either per-channel `[C]` or
    /// shaped like `x`.
    pub fn lerp(&mut self, x: Var, shifted: Var, eta: Var) -> Result<Var> {
        self.same_shape("lerp", x, shifted)?;
        if self.shape(eta) != self.shape(x) {
            self.suffix_shape("lerp", x, eta)?;
        }
        let out = shift::lerp(self.value(x), self.value(shifted), self.value(eta))?;
        self.push(out, Op::Lerp { x, shifted, eta }, "lerp")
    }

    /// Quad-directional shift of a `[B, h·w, C]` token grid.
    pub fn quad_shift(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let out = shift::quad_shift(self.value(x), h, w)?;
        let batch = self.shape(x)[0];
        self.push(out, Op::QuadShift { x, batch, h, w }, "quad_shift")
    }

    /// Bidirectional shift of a `[B, T, C]` sequence; `pad` marks padding.
    pub fn bi_shift(&mut self, x: Var, pad: Option<&[bool]>) -> Result<Var> {
        let out = shift::bi_shift(self.value(x), pad)?;
        let batch = self.shape(x)[0];
        let mask = pad.map(|p| p.to_vec());
        self.push(out, Op::BiShift { x, batch, mask }, "bi_shift")
    }

    /// Replaces every trailing-axis row `i` with `fill` where `!keep[i]`.
    pub fn row_fill(&mut self, x: Var, keep: &[bool], fill: f64) -> Result<Var> {
        let c = self.value(x).last_dim();
        let rows = self.value(x).len() / c;
        if keep.len() != rows {
            return Err(Error::mismatch("row_fill", self.shape(x), &[keep.len()]));
        }
        let mut out = self.value(x).clone();
        for (row, &k) in out.data_mut().chunks_exact_mut(c).zip(keep) {
            if !k {
                row.iter_mut().for_each(|v| *v = fill);
            }
        }
        let op = Op::RowFill {
            x,
            keep: keep.to_vec(),
        };
        self.push(out, op, "row_fill")
    }

    /// Bidirectional WKV over `[B, T, C]` operands split into `heads` heads;
    /// `u` is `[heads, C/heads]`.
    pub fn wkv(&mut self, r: Var, k: Var, v: Var, w_tilde: Var, u: Var, heads: usize) -> Result<Var> {
        self.same_shape("wkv", r, k)?;
        self.same_shape("wkv", r, v)?;
        self.same_shape("wkv", r, w_tilde)?;
        let inputs = self.wkv_inputs(r, k, v, w_tilde, u, heads)?;
        let out = wkv::biwkv_scan(&inputs)?;
        let out = wkv::heads_to_tokens(&out)?;
        self.push(
            out,
            Op::Wkv {
                r,
                k,
                v,
                w_tilde,
                u,
                heads,
            },
            "wkv",
        )
    }

    fn wkv_inputs(&self, r: Var, k: Var, v: Var, w_tilde: Var, u: Var, heads: usize) -> Result<WkvInputs> {
        let s = self.shape(r);
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "wkv expects [B, T, C] with C divisible by heads",
            });
        }
        let d = s[2] / heads;
        if self.shape(u) != [heads, d] {
            return Err(Error::mismatch("wkv", self.shape(u), &[heads, d]));
        }
        WkvInputs::new(
            wkv::tokens_to_heads(self.value(r), heads)?,
            wkv::tokens_to_heads(self.value(k), heads)?,
            wkv::tokens_to_heads(self.value(v), heads)?,
            wkv::tokens_to_heads(self.value(w_tilde), heads)?,
            self.value(u).clone(),
        )
    }

    /// Mean over the tokens of `[B, T, C]` with `valid[b*T + t]` set.
    pub fn mean_pool(&mut self, x: Var, valid: Option<&[bool]>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::InvalidShape {
                shape: s,
                reason: "mean_pool expects [B, T, C]",
            });
        }
        let (b, t, c) = (s[0], s[1], s[2]);
        let valid = match valid {
            Some(v) if v.len() == b * t => v.to_vec(),
            Some(v) => return Err(Error::mismatch("mean_pool", &s, &[v.len()])),
            None => vec![true; b * t],
        };
        let xv = self.value(x).data();
        let mut out = vec![0.0; b * c];
        let mut counts = vec![0usize; b];
        for bi in 0..b {
            let o = &mut out[bi * c..(bi + 1) * c];
            for ti in 0..t {
                if valid[bi * t + ti] {
                    counts[bi] += 1;
                    let row = &xv[(bi * t + ti) * c..(bi * t + ti + 1) * c];
                    o.iter_mut().zip(row).for_each(|(a, &r)| *a += r);
                }
            }
            if counts[bi] == 0 {
                return Err(Error::invalid("mean_pool: sample has no valid tokens"));
            }
            let inv = 1.0 / counts[bi] as f64;
            o.iter_mut().for_each(|a| *a *= inv);
        }
        self.push(Tensor::new([b, c], out)?, Op::MeanPool { x, valid, counts }, "mean_pool")
    }

    /// Scales each trailing-axis row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.len() / c);
        for row in out.data_mut().chunks_exact_mut(c) {
            let n = math::sqrt(math::dot(row, row));
            if n == 0.0 || !n.is_finite() {
                return Err(Error::NonFinite("l2_normalize"));
            }
            norms.push(n);
            row.iter_mut().for_each(|v| *v /= n);
        }
        self.push(out, Op::L2Normalize { x, norms }, "l2_normalize")
    }

    /// Symmetric InfoNCE in sum form over `[N, D]` embeddings with the
    /// scalar log inverse temperature `theta`.
    pub fn clip_loss(&mut self, img: Var, txt: Var, theta: Var) -> Result<Var> {
        self.same_shape("clip_loss", img, txt)?;
        if self.value(theta).len() != 1 {
            return Err(Error::mismatch("clip_loss", self.shape(theta), &[]));
        }
        let g = crate::contrastive::clip_loss_with_grads(
            self.value(img),
            self.value(txt),
            self.value(theta).data()[0],
        )?;
        let op = Op::ClipLoss {
            img,
            txt,
            theta,
            d_img: g.d_image.into_data(),
            d_txt: g.d_text.into_data(),
            d_theta: g.d_log_inv_tau,
        };
        self.push(Tensor::scalar(g.loss), op, "clip_loss")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Row lookup into `table: [V, C]` for `ids` shaped `shape`; id 0 is
    /// padding and yields a zero row.
    pub fn embedding(&mut self, table: Var, ids: &[usize], shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::InvalidShape {
                shape: ts,
                reason: "embedding table must be [V, C]",
            });
        }
        if shape.iter().product::<usize>() != ids.len() {
            return Err(Error::mismatch("embedding", shape, &[ids.len()]));
        }
        let (vocab, c) = (ts[0], ts[1]);
        let tv = self.value(table).data();
        let mut out = vec![0.0; ids.len() * c];
        for (o, &id) in out.chunks_exact_mut(c).zip(ids) {
            if id >= vocab {
                return Err(Error::OutOfRange {
                    what: "token id",
                    index: id,
                    size: vocab,
                });
            }
            if id != 0 {
                o.copy_from_slice(&tv[id * c..(id + 1) * c]);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.push(c);
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        self.push(Tensor::new(out_shape, out)?, op, "embedding")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        self.push(out, Op::Reshape(a), "reshape")
    }

    // ---- reverse pass --------------------------------------------------

    /// Seeds `d loss / d loss = 1` and propagates to every node that
    /// requires a gradient. Leaf gradients accumulate across calls;
    /// intermediate gradients are recomputed from scratch.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidShape {
                shape: self.shape(loss).to_vec(),
                reason: "backward needs a scalar output",
            });
        }
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contribs = self.vjp(i, &g)?;
            self.nodes[i].grad = Some(g);
            for (v, c) in contribs {
                if !math::all_finite(&c) {
                    return Err(Error::NonFinite("backward"));
                }
                self.accumulate(v, c);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
            None => node.grad = Some(contrib),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `i` for each input needing one.
    fn vjp(&self, i: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, k, n } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let m = av.len() / k;
                if self.wants(*a) {
                    let mut da = vec![0.0; av.len()];
                    math::matmul_nt_acc(g, bv, &mut da, m, *k, *n);
                    out.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; bv.len()];
                    math::matmul_tn_acc(av, g, &mut db, m, *k, *n);
                    out.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|x| -x).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    out.push((*a, g.iter().zip(bv).map(|(x, y)| x * y).collect()));
                }
                if self.wants(*b) {
                    out.push((*b, g.iter().zip(av).map(|(x, y)| x * y).collect()));
                }
            }
            Op::AddBroadcast(a, b) => {
                out.push((*a, g.to_vec()));
                if self.wants(*b) {
                    let nb = self.value(*b).len();
                    let mut db = vec![0.0; nb];
                    for chunk in g.chunks_exact(nb) {
                        db.iter_mut().zip(chunk).for_each(|(d, x)| *d += x);
                    }
                    out.push((*b, db));
                }
            }
            Op::MulBroadcast(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let nb = bv.len();
                if self.wants(*a) {
                    let mut da = g.to_vec();
                    for chunk in da.chunks_exact_mut(nb) {
                        chunk.iter_mut().zip(bv).for_each(|(d, y)| *d *= y);
                    }
                    out.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; nb];
                    for (gc, ac) in g.chunks_exact(nb).zip(av.chunks_exact(nb)) {
                        for ((d, x), y) in db.iter_mut().zip(gc).zip(ac) {
                            *d += x * y;
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.iter().map(|x| x * s).collect())),
            Op::AddScalar(a) | Op::Reshape(a) => out.push((*a, g.to_vec())),
            Op::Unary(a, kind) => {
                let xv = self.value(*a).data();
                let yv = node.value.data();
                let d: Vec<f64> = g
                    .iter()
                    .zip(xv.iter().zip(yv))
                    .map(|(gi, (&x, &y))| {
                        gi * match kind {
                            Unary::Silu => math::silu_grad(x),
                            Unary::SquaredRelu => 2.0 * x.max(0.0),
                            Unary::Tanh => 1.0 - y * y,
                            Unary::Sigmoid => y * (1.0 - y),
                            Unary::Exp => y,
                            Unary::DecayFactor => wkv::decay_factor_grad(x, y),
                        }
                    })
                    .collect();
                out.push((*a, d));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                groups,
                xhat,
                rstd,
            } => {
                let c = self.value(*x).last_dim();
                let d = c / groups;
                let gv = self.value(*gain).data();
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                let mut dx = vec![0.0; g.len()];
                let mut dxhat = vec![0.0; d];
                for (s, ((gs, xh), dxs)) in g
                    .chunks_exact(d)
                    .zip(xhat.chunks_exact(d))
                    .zip(dx.chunks_exact_mut(d))
                    .enumerate()
                {
                    let start = (s * d) % c;
                    for j in 0..d {
                        dgain[start + j] += gs[j] * xh[j];
                        dbias[start + j] += gs[j];
                        dxhat[j] = gs[j] * gv[start + j];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dx = math::dot(&dxhat, xh) / d as f64;
                    let r = rstd[s];
                    for j in 0..d {
                        dxs[j] = r * (dxhat[j] - mean_d - xh[j] * mean_dx);
                    }
                }
                out.push((*x, dx));
                out.push((*gain, dgain));
                out.push((*bias, dbias));
            }
            Op::Lerp { x, shifted, eta } => {
                let sv = self.value(*shifted).data();
                let ev = self.value(*eta).data();
                let ne = ev.len();
                out.push((*x, g.to_vec()));
                if self.wants(*shifted) {
                    let d = g
                        .iter()
                        .enumerate()
                        .map(|(j, gi)| gi * (1.0 - ev[j % ne]))
                        .collect();
                    out.push((*shifted, d));
                }
                if self.wants(*eta) {
                    let mut d = vec![0.0; ne];
                    for (j, (gi, s)) in g.iter().zip(sv).enumerate() {
                        d[j % ne] -= gi * s;
                    }
                    out.push((*eta, d));
                }
            }
            Op::QuadShift { x, batch, h, w } => {
                let c = self.value(*x).last_dim();
                out.push((*x, shift::quad_shift_adjoint(g, *batch, *h, *w, c)));
            }
            Op::BiShift { x, batch, mask } => {
                let c = self.value(*x).last_dim();
                let t = self.shape(*x)[1];
                out.push((*x, shift::bi_shift_adjoint(g, *batch, t, c, mask.as_deref())));
            }
            Op::RowFill { x, keep } => {
                let c = self.value(*x).last_dim();
                let mut d = g.to_vec();
                for (row, &k) in d.chunks_exact_mut(c).zip(keep) {
                    if !k {
                        row.iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                out.push((*x, d));
            }
            Op::Wkv {
                r,
                k,
                v,
                w_tilde,
                u,
                heads,
            } => {
                let inputs = self.wkv_inputs(*r, *k, *v, *w_tilde, *u, *heads)?;
                let grad_out = wkv::tokens_to_heads(&Tensor::new(node.value.shape().to_vec(), g.to_vec())?, *heads)?;
                let grads = wkv::biwkv_backward(&inputs, &grad_out)?;
                out.push((*r, wkv::heads_to_tokens(&grads.r)?.into_data()));
                out.push((*k, wkv::heads_to_tokens(&grads.k)?.into_data()));
                out.push((*v, wkv::heads_to_tokens(&grads.v)?.into_data()));
                out.push((*w_tilde, wkv::heads_to_tokens(&grads.w_tilde)?.into_data()));
                out.push((*u, grads.u.into_data()));
            }
            Op::MeanPool { x, valid, counts } => {
                let s = self.shape(*x);
                let (b, t, c) = (s[0], s[1], s[2]);
                let mut d = vec![0.0; b * t * c];
                for bi in 0..b {
                    let inv = 1.0 / counts[bi] as f64;
                    let gr = &g[bi * c..(bi + 1) * c];
                    for ti in 0..t {
                        if valid[bi * t + ti] {
                            let row = &mut d[(bi * t + ti) * c..(bi * t + ti + 1) * c];
                            row.iter_mut().zip(gr).for_each(|(a, &x)| *a = x * inv);
                        }
                    }
                }
                out.push((*x, d));
            }
            Op::L2Normalize { x, norms } => {
                let c = self.value(*x).last_dim();
                let y = node.value.data();
                let mut d = vec![0.0; g.len()];
                for (((dr, gr), yr), &n) in d
                    .chunks_exact_mut(c)
                    .zip(g.chunks_exact(c))
                    .zip(y.chunks_exact(c))
                    .zip(norms)
                {
                    let yg = math::dot(yr, gr);
                    for j in 0..c {
                        dr[j] = (gr[j] - yr[j] * yg) / n;
                    }
                }
                out.push((*x, d));
            }
            Op::ClipLoss {
                img,
                txt,
                theta,
                d_img,
                d_txt,
                d_theta,
            } => {
                let s = g[0];
                out.push((*img, d_img.iter().map(|x| x * s).collect()));
                out.push((*txt, d_txt.iter().map(|x| x * s).collect()));
                out.push((*theta, vec![d_theta * s]));
            }
            Op::Sum(a) => out.push((*a, vec![g[0]; self.value(*a).len()])),
            Op::Embedding { table, ids } => {
                let c = self.value(*table).last_dim();
                let mut d = vec![0.0; self.value(*table).len()];
                for (gr, &id) in g.chunks_exact(c).zip(ids) {
                    if id != 0 {
                        d[id * c..(id + 1) * c]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(a, &x)| *a += x);
                    }
                }
                out.push((*table, d));
            }
        }
        out.retain(|(v, _)| self.wants(*v));
        Ok(out)
    }
}
