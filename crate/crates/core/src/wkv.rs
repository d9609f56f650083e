//! Bidirectional WKV aggregation.
//!
//! For every head and token `t` (all operands `[B, H, T, d]`):
//!
//! ```text
//! o_t = r_t · ( diag(u) k_tᵀ v_t
//!             + Σ_{i<t} diag(ε_{t,i}) k_iᵀ v_i
//!             + Σ_{i>t} diag(ε_{t,i}) k_iᵀ v_i )
//! ε_{t,i} = ∏_{j strictly between i and t} w_j      (empty product = 1)
//! w_j     = exp(-exp(w̃_j))
//! ```
//!
//! Three equivalent evaluations are provided: a quadratic direct sum used
//! as the reference, the linear-time two-pass scan, and single-token
//! recurrent stepping. The scan and the stepping share one per-token
//! kernel, so their results agree bit for bit.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// `w̃` is clamped to this range before exponentiation.
pub const DECAY_LOG_MIN: f64 = -40.0;
pub const DECAY_LOG_MAX: f64 = 40.0;

/// `exp(-exp(clamp(w̃)))`. Strictly inside (0, 1) wherever f64 can
/// represent it as such (roughly `-36 < w̃ < 6.5`); saturates to exactly
/// 1 at the lower clamp, which is what padding relies on.
#[inline]
pub fn decay_factor(w_tilde: f64) -> f64 {
    math::exp(-math::exp(w_tilde.clamp(DECAY_LOG_MIN, DECAY_LOG_MAX)))
}

/// d/dw̃ of [`decay_factor`] given its output `w`.
#[inline]
pub fn decay_factor_grad(w_tilde: f64, w: f64) -> f64 {
    if !(DECAY_LOG_MIN..=DECAY_LOG_MAX).contains(&w_tilde) {
        0.0
    } else {
        -math::exp(w_tilde) * w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WkvInputs {
    /// `[B, H, T, d]`
    pub r: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub w_tilde: Tensor,
    /// `[H, d]`
    pub u: Tensor,
}

impl WkvInputs {
    pub fn new(r: Tensor, k: Tensor, v: Tensor, w_tilde: Tensor, u: Tensor) -> Result<Self> {
        if r.rank() != 4 {
            return Err(Error::InvalidShape {
                shape: r.shape().to_vec(),
                reason: "wkv operands must be [B, H, T, d]",
            });
        }
        for other in [&k, &v, &w_tilde] {
            if other.shape() != r.shape() {
                return Err(Error::mismatch("wkv", r.shape(), other.shape()));
            }
        }
        let s = r.shape();
        if u.shape() != [s[1], s[3]] {
            return Err(Error::mismatch("wkv boost", u.shape(), &[s[1], s[3]]));
        }
        Ok(Self { r, k, v, w_tilde, u })
    }

    /// `(B, H, T, d)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.r.shape();
        (s[0], s[1], s[2], s[3])
    }

    fn decay(&self) -> Vec<f64> {
        self.w_tilde.data().iter().map(|&x| decay_factor(x)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WkvGrads {
    pub r: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub w_tilde: Tensor,
    pub u: Tensor,
}

/// One directional accumulator per (batch, head): `[B, H, d, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WkvState {
    pub a: Tensor,
}

impl WkvState {
    pub fn zeros(batch: usize, heads: usize, d: usize) -> Self {
        Self {
            a: Tensor::zeros([batch, heads, d, d]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Past-to-future sweep; also carries the diagonal boost term.
    Forward,
    /// Future-to-past sweep.
    Backward,
}

/// Per-token kernel: adds `r · (S + [diag(u) kᵀ v])` to `out`, then
/// advances `S ← diag(w) S + kᵀ v`.
#[inline]
fn step_in_place(
    state: &mut [f64],
    r: &[f64],
    k: &[f64],
    v: &[f64],
    w: &[f64],
    u: Option<&[f64]>,
    out: &mut [f64],
) {
    let d = r.len();
    if let Some(u) = u {
        let ruk: f64 = (0..d).map(|e| r[e] * u[e] * k[e]).sum();
        for (o, &vc) in out.iter_mut().zip(v) {
            *o += ruk * vc;
        }
    }
    for e in 0..d {
        let row = &mut state[e * d..(e + 1) * d];
        let (re, we, ke) = (r[e], w[e], k[e]);
        for ((s, o), &vc) in row.iter_mut().zip(out.iter_mut()).zip(v) {
            *o += re * *s;
            *s = we * *s + ke * vc;
        }
    }
}

fn check_output(out: Vec<f64>, shape: &[usize], what: &'static str) -> Result<Tensor> {
    if !math::all_finite(&out) {
        return Err(Error::NonFinite(what));
    }
    Tensor::new(shape.to_vec(), out)
}

/// Quadratic reference evaluation, `O(T²·d²)` per head.
pub fn biwkv_naive(inp: &WkvInputs) -> Result<Tensor> {
    let (b, h, t, d) = inp.dims();
    let w = inp.decay();
    let (r, k, v, u) = (inp.r.data(), inp.k.data(), inp.v.data(), inp.u.data());
    let mut out = vec![0.0; b * h * t * d];
    let mut acc = vec![0.0; d * d];
    let mut eps = vec![0.0; d];
    for bh in 0..b * h {
        let head = bh % h;
        let base = bh * t * d;
        fn seg(x: &[f64], base: usize, d: usize, i: usize) -> &[f64] {
            &x[base + i * d..base + (i + 1) * d]
        }
        let tok = |x, i| seg(x, base, d, i);
        let uh = &u[head * d..(head + 1) * d];
        for ti in 0..t {
            let (kt, vt) = (tok(k, ti), tok(v, ti));
            for e in 0..d {
                for c in 0..d {
                    acc[e * d + c] = uh[e] * kt[e] * vt[c];
                }
            }
            // past: walk i = t-1, t-2, ...; ε picks up w_i after each term
            eps.iter_mut().for_each(|x| *x = 1.0);
            for i in (0..ti).rev() {
                let (ki, vi) = (tok(k, i), tok(v, i));
                for e in 0..d {
                    for c in 0..d {
                        acc[e * d + c] += eps[e] * ki[e] * vi[c];
                    }
                }
                eps.iter_mut().zip(tok(&w, i)).for_each(|(x, wi)| *x *= wi);
            }
            eps.iter_mut().for_each(|x| *x = 1.0);
            for i in ti + 1..t {
                let (ki, vi) = (tok(k, i), tok(v, i));
                for e in 0..d {
                    for c in 0..d {
                        acc[e * d + c] += eps[e] * ki[e] * vi[c];
                    }
                }
                eps.iter_mut().zip(tok(&w, i)).for_each(|(x, wi)| *x *= wi);
            }
            let rt = tok(r, ti);
            let o = &mut out[base + ti * d..base + (ti + 1) * d];
            for e in 0..d {
                for c in 0..d {
                    o[c] += rt[e] * acc[e * d + c];
                }
            }
        }
    }
    check_output(out, inp.r.shape(), "biwkv_naive")
}

/// Linear-time evaluation: a past-to-future sweep followed by a
/// future-to-past sweep, `O(T·d²)` per head.
pub fn biwkv_scan(inp: &WkvInputs) -> Result<Tensor> {
    let (b, h, t, d) = inp.dims();
    let w = inp.decay();
    let (r, k, v, u) = (inp.r.data(), inp.k.data(), inp.v.data(), inp.u.data());
    let mut out = vec![0.0; b * h * t * d];
    let mut state = vec![0.0; d * d];
    for bh in 0..b * h {
        let head = bh % h;
        let base = bh * t * d;
        let uh = &u[head * d..(head + 1) * d];
        let span = |i: usize| base + i * d..base + (i + 1) * d;
        state.iter_mut().for_each(|s| *s = 0.0);
        for ti in 0..t {
            let sp = span(ti);
            step_in_place(&mut state, &r[sp.clone()], &k[sp.clone()], &v[sp.clone()], &w[sp.clone()], Some(uh), &mut out[sp]);
        }
        state.iter_mut().for_each(|s| *s = 0.0);
        for ti in (0..t).rev() {
            let sp = span(ti);
            step_in_place(&mut state, &r[sp.clone()], &k[sp.clone()], &v[sp.clone()], &w[sp.clone()], None, &mut out[sp]);
        }
    }
    check_output(out, inp.r.shape(), "biwkv_scan")
}

/// One token of one directional recurrence for every (batch, head).
///
/// `r_t`, `k_t`, `v_t` and the decay factor `w_t` are `[B, H, d]`; `u` is
/// `[H, d]`. The forward direction includes the boost term, so summing a
/// forward sweep and a backward sweep reproduces [`biwkv_scan`].
pub fn wkv_recurrent_step(
    state: &WkvState,
    r_t: &Tensor,
    k_t: &Tensor,
    v_t: &Tensor,
    w_t: &Tensor,
    u: &Tensor,
    direction: Direction,
) -> Result<(Tensor, WkvState)> {
    let s = state.a.shape();
    if s.len() != 4 || s[2] != s[3] {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "state must be [B, H, d, d]",
        });
    }
    let (b, h, d) = (s[0], s[1], s[2]);
    for x in [r_t, k_t, v_t, w_t] {
        if x.shape() != [b, h, d] {
            return Err(Error::mismatch("wkv step", x.shape(), &[b, h, d]));
        }
    }
    if u.shape() != [h, d] {
        return Err(Error::mismatch("wkv step boost", u.shape(), &[h, d]));
    }
    let mut next = state.a.clone();
    let mut out = vec![0.0; b * h * d];
    for bh in 0..b * h {
        let sp = bh * d..(bh + 1) * d;
        let uh = &u.data()[(bh % h) * d..(bh % h + 1) * d];
        let boost = matches!(direction, Direction::Forward).then_some(uh);
        step_in_place(
            &mut next.data_mut()[bh * d * d..(bh + 1) * d * d],
            &r_t.data()[sp.clone()],
            &k_t.data()[sp.clone()],
            &v_t.data()[sp.clone()],
            &w_t.data()[sp.clone()],
            boost,
            &mut out[sp],
        );
    }
    Ok((Tensor::new([b, h, d], out)?, WkvState { a: next }))
}

/// Evaluates the kernel purely through [`wkv_recurrent_step`].
pub fn biwkv_recurrent(inp: &WkvInputs) -> Result<Tensor> {
    let (b, h, t, d) = inp.dims();
    let w = Tensor::new(inp.r.shape().to_vec(), inp.decay())?;
    let token = |x: &Tensor, ti: usize| -> Tensor {
        let mut data = Vec::with_capacity(b * h * d);
        for bh in 0..b * h {
            let o = (bh * t + ti) * d;
            data.extend_from_slice(&x.data()[o..o + d]);
        }
        Tensor::new([b, h, d], data).expect("token slice shape")
    };
    let mut out = vec![0.0; b * h * t * d];
    let mut scatter = |ti: usize, contrib: &Tensor| {
        for bh in 0..b * h {
            let o = (bh * t + ti) * d;
            out[o..o + d]
                .iter_mut()
                .zip(&contrib.data()[bh * d..(bh + 1) * d])
                .for_each(|(a, c)| *a += c);
        }
    };
    for (direction, order) in [
        (Direction::Forward, (0..t).collect::<Vec<_>>()),
        (Direction::Backward, (0..t).rev().collect()),
    ] {
        let mut state = WkvState::zeros(b, h, d);
        for ti in order {
            let (contrib, next) = wkv_recurrent_step(
                &state,
                &token(&inp.r, ti),
                &token(&inp.k, ti),
                &token(&inp.v, ti),
                &token(&w, ti),
                &inp.u,
                direction,
            )?;
            scatter(ti, &contrib);
            state = next;
        }
    }
    check_output(out, inp.r.shape(), "biwkv_recurrent")
}

/// Exact reverse-mode gradients of [`biwkv_scan`]. The directional states
/// of one (batch, head) are recomputed and held only while that slice is
/// being differentiated.
pub fn biwkv_backward(inp: &WkvInputs, grad_out: &Tensor) -> Result<WkvGrads> {
    if grad_out.shape() != inp.r.shape() {
        return Err(Error::mismatch("biwkv_backward", grad_out.shape(), inp.r.shape()));
    }
    let (b, h, t, d) = inp.dims();
    let w = inp.decay();
    let (r, k, v, u, wt) = (
        inp.r.data(),
        inp.k.data(),
        inp.v.data(),
        inp.u.data(),
        inp.w_tilde.data(),
    );
    let g = grad_out.data();
    let n = b * h * t * d;
    let (mut dr, mut dk, mut dv, mut dw) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut du = vec![0.0; h * d];
    let dd = d * d;
    // fwd[ti] is the past-state seen by token ti, bwd[ti] the future-state
    let mut fwd = vec![0.0; t * dd];
    let mut bwd = vec![0.0; t * dd];
    let mut adj = vec![0.0; dd];

    for bh in 0..b * h {
        let head = bh % h;
        let base = bh * t * d;
        let sp = |i: usize| base + i * d..base + (i + 1) * d;
        let uh = &u[head * d..(head + 1) * d];

        for ti in 1..t {
            let (prev, cur) = fwd.split_at_mut(ti * dd);
            let prev = &prev[(ti - 1) * dd..];
            let (kp, vp, wp) = (&k[sp(ti - 1)], &v[sp(ti - 1)], &w[sp(ti - 1)]);
            for e in 0..d {
                for c in 0..d {
                    cur[e * d + c] = wp[e] * prev[e * d + c] + kp[e] * vp[c];
                }
            }
        }
        bwd[(t - 1) * dd..].iter_mut().for_each(|x| *x = 0.0);
        for ti in (0..t - 1).rev() {
            let (cur, next) = bwd.split_at_mut((ti + 1) * dd);
            let cur = &mut cur[ti * dd..];
            let (kn, vn, wn) = (&k[sp(ti + 1)], &v[sp(ti + 1)], &w[sp(ti + 1)]);
            for e in 0..d {
                for c in 0..d {
                    cur[e * d + c] = wn[e] * next[e * d + c] + kn[e] * vn[c];
                }
            }
        }

        // direct terms
        for ti in 0..t {
            let s = sp(ti);
            let (rt, kt, vt, gt) = (&r[s.clone()], &k[s.clone()], &v[s.clone()], &g[s.clone()]);
            let vg = math::dot(vt, gt);
            let ruk: f64 = (0..d).map(|e| rt[e] * uh[e] * kt[e]).sum();
            let (a, bb) = (&fwd[ti * dd..(ti + 1) * dd], &bwd[ti * dd..(ti + 1) * dd]);
            for e in 0..d {
                let mut acc = uh[e] * kt[e] * vg;
                for c in 0..d {
                    acc += (a[e * d + c] + bb[e * d + c]) * gt[c];
                }
                dr[s.start + e] = acc;
                du[head * d + e] += rt[e] * kt[e] * vg;
                dk[s.start + e] += rt[e] * uh[e] * vg;
            }
            for c in 0..d {
                dv[s.start + c] += gt[c] * ruk;
            }
        }

        // adjoint of the past-state recurrence, swept future-to-past
        adj.iter_mut().for_each(|x| *x = 0.0);
        for ti in (0..t).rev() {
            let s = sp(ti);
            let (rt, kt, vt, gt, wt_) = (&r[s.clone()], &k[s.clone()], &v[s.clone()], &g[s.clone()], &w[s.clone()]);
            let a = &fwd[ti * dd..(ti + 1) * dd];
            for e in 0..d {
                let row = &adj[e * d..(e + 1) * d];
                dk[s.start + e] += math::dot(row, vt);
                dw[s.start + e] += math::dot(row, &a[e * d..(e + 1) * d]);
                for c in 0..d {
                    dv[s.start + c] += kt[e] * row[c];
                }
            }
            for e in 0..d {
                for c in 0..d {
                    adj[e * d + c] = rt[e] * gt[c] + wt_[e] * adj[e * d + c];
                }
            }
        }

        // adjoint of the future-state recurrence, swept past-to-future
        adj.iter_mut().for_each(|x| *x = 0.0);
        for ti in 0..t {
            let s = sp(ti);
            let (rt, kt, vt, gt, wt_) = (&r[s.clone()], &k[s.clone()], &v[s.clone()], &g[s.clone()], &w[s.clone()]);
            let bb = &bwd[ti * dd..(ti + 1) * dd];
            for e in 0..d {
                let row = &adj[e * d..(e + 1) * d];
                dk[s.start + e] += math::dot(row, vt);
                dw[s.start + e] += math::dot(row, &bb[e * d..(e + 1) * d]);
                for c in 0..d {
                    dv[s.start + c] += kt[e] * row[c];
                }
            }
            for e in 0..d {
                for c in 0..d {
                    adj[e * d + c] = rt[e] * gt[c] + wt_[e] * adj[e * d + c];
                }
            }
        }
    }

    let dwt: Vec<f64> = dw
        .iter()
        .zip(wt.iter().zip(&w))
        .map(|(g, (&x, &y))| g * decay_factor_grad(x, y))
        .collect();
    let shape = inp.r.shape();
    Ok(WkvGrads {
        r: check_output(dr, shape, "biwkv_backward")?,
        k: check_output(dk, shape, "biwkv_backward")?,
        v: check_output(dv, shape, "biwkv_backward")?,
        w_tilde: check_output(dwt, shape, "biwkv_backward")?,
        u: check_output(du, inp.u.shape(), "biwkv_backward")?,
    })
}

/// `[B, T, H·d] -> [B, H, T, d]`
pub fn tokens_to_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, t, c) = crate::shift::dims3(x)?;
    if heads == 0 || c % heads != 0 {
        return Err(Error::invalid("heads must divide the channel count"));
    }
    let d = c / heads;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        for ti in 0..t {
            for hi in 0..heads {
                let s = (bi * t + ti) * c + hi * d;
                let o = ((bi * heads + hi) * t + ti) * d;
                out[o..o + d].copy_from_slice(&src[s..s + d]);
            }
        }
    }
    Tensor::new([b, heads, t, d], out)
}

/// `[B, H, T, d] -> [B, T, H·d]`
pub fn heads_to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, h, t, d) = match *x.shape() {
        [b, h, t, d] => (b, h, t, d),
        _ => {
            return Err(Error::InvalidShape {
                shape: x.shape().to_vec(),
                reason: "expected [B, H, T, d]",
            })
        }
    };
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        for hi in 0..h {
            for ti in 0..t {
                let s = ((bi * h + hi) * t + ti) * d;
                let o = (bi * t + ti) * h * d + hi * d;
                out[o..o + d].copy_from_slice(&src[s..s + d]);
            }
        }
    }
    Tensor::new([b, t, h * d], out)
}
