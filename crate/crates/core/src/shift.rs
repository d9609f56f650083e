//! Token shifts and the data-dependent decay path.
//!
//! Images shift each channel quartile in from one of the four grid
//! neighbours (up, down, left, right); text shifts the first channel half
//! in from the previous token and the second half from the next one.
//! Missing neighbours and padding contribute zeros.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum Layout {
    Image { h_tokens: usize, w_tokens: usize },
    /// `pad[b*T + t]` is true for trailing padding positions.
    Text { pad: Vec<bool> },
}

/// A batch of token sequences `[B, T, C]` plus their spatial layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub tokens: Tensor,
    pub layout: Layout,
}

impl TokenGrid {
    pub fn image(tokens: Tensor, h_tokens: usize, w_tokens: usize) -> Result<Self> {
        let (_, t, c) = dims3(&tokens)?;
        if t != h_tokens * w_tokens {
            return Err(Error::InvalidShape {
                shape: tokens.shape().to_vec(),
                reason: "image token count must equal h_tokens * w_tokens",
            });
        }
        if c % 4 != 0 {
            return Err(Error::InvalidShape {
                shape: tokens.shape().to_vec(),
                reason: "image channels must be divisible by 4",
            });
        }
        Ok(Self {
            tokens,
            layout: Layout::Image { h_tokens, w_tokens },
        })
    }

    pub fn text(tokens: Tensor, pad: Vec<bool>) -> Result<Self> {
        let (b, t, c) = dims3(&tokens)?;
        if c % 2 != 0 {
            return Err(Error::InvalidShape {
                shape: tokens.shape().to_vec(),
                reason: "text channels must be divisible by 2",
            });
        }
        check_trailing_pad(&pad, b, t)?;
        Ok(Self {
            tokens,
            layout: Layout::Text { pad },
        })
    }

    pub fn quad_shift(&self) -> Result<Tensor> {
        match self.layout {
            Layout::Image { h_tokens, w_tokens } => quad_shift(&self.tokens, h_tokens, w_tokens),
            Layout::Text { .. } => Err(Error::WrongLayout("quad_shift")),
        }
    }

    pub fn bi_shift(&self) -> Result<Tensor> {
        match &self.layout {
            Layout::Text { pad } => bi_shift(&self.tokens, Some(pad)),
            Layout::Image { .. } => Err(Error::WrongLayout("bi_shift")),
        }
    }

    /// The modality-appropriate shift.
    pub fn shifted(&self) -> Result<Tensor> {
        match self.layout {
            Layout::Image { .. } => self.quad_shift(),
            Layout::Text { .. } => self.bi_shift(),
        }
    }

    pub fn pad_mask(&self) -> Option<&[bool]> {
        match &self.layout {
            Layout::Text { pad } => Some(pad),
            Layout::Image { .. } => None,
        }
    }
}

/// Checks that padding, per sample, is a (possibly empty) suffix.
pub fn check_trailing_pad(pad: &[bool], batch: usize, t: usize) -> Result<()> {
    if pad.len() != batch * t {
        return Err(Error::mismatch("pad mask", &[batch, t], &[pad.len()]));
    }
    for row in pad.chunks_exact(t) {
        if row.windows(2).any(|w| w[0] && !w[1]) {
            return Err(Error::invalid("padding must be trailing"));
        }
    }
    Ok(())
}

pub(crate) fn dims3(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [b, t, c] => Ok((b, t, c)),
        _ => Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "expected [B, T, C]",
        }),
    }
}

/// Source cell for channel quartile `q` of cell `(y, x)`, if in range.
#[inline]
fn quad_source(q: usize, y: usize, x: usize, h: usize, w: usize) -> Option<usize> {
    let (sy, sx) = match q {
        0 => (y.checked_sub(1)?, x),
        1 => (y + 1, x),
        2 => (y, x.checked_sub(1)?),
        _ => (y, x + 1),
    };
    (sy < h && sx < w).then_some(sy * w + sx)
}

pub fn quad_shift(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, t, c) = dims3(x)?;
    if t != h * w || c % 4 != 0 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "quad_shift needs T == h*w and C % 4 == 0",
        });
    }
    let q = c / 4;
    let xv = x.data();
    let mut out = vec![0.0; xv.len()];
    for bi in 0..b {
        let base = bi * t * c;
        for y in 0..h {
            for xx in 0..w {
                let dst = base + (y * w + xx) * c;
                for part in 0..4 {
                    if let Some(src) = quad_source(part, y, xx, h, w) {
                        let s = base + src * c + part * q;
                        out[dst + part * q..dst + (part + 1) * q].copy_from_slice(&xv[s..s + q]);
                    }
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn quad_shift_adjoint(g: &[f64], b: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let t = h * w;
    let q = c / 4;
    let mut d = vec![0.0; g.len()];
    for bi in 0..b {
        let base = bi * t * c;
        for y in 0..h {
            for xx in 0..w {
                let dst = base + (y * w + xx) * c;
                for part in 0..4 {
                    if let Some(src) = quad_source(part, y, xx, h, w) {
                        let s = base + src * c + part * q;
                        for j in 0..q {
                            d[s + j] += g[dst + part * q + j];
                        }
                    }
                }
            }
        }
    }
    d
}

#[inline]
fn is_pad(pad: Option<&[bool]>, i: usize) -> bool {
    pad.is_some_and(|p| p[i])
}

pub fn bi_shift(x: &Tensor, pad: Option<&[bool]>) -> Result<Tensor> {
    let (b, t, c) = dims3(x)?;
    if c % 2 != 0 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "bi_shift needs C % 2 == 0",
        });
    }
    if let Some(p) = pad {
        check_trailing_pad(p, b, t)?;
    }
    let half = c / 2;
    let xv = x.data();
    let mut out = vec![0.0; xv.len()];
    for bi in 0..b {
        for ti in 0..t {
            let pos = bi * t + ti;
            if is_pad(pad, pos) {
                continue;
            }
            let dst = pos * c;
            if ti > 0 && !is_pad(pad, pos - 1) {
                let s = (pos - 1) * c;
                out[dst..dst + half].copy_from_slice(&xv[s..s + half]);
            }
            if ti + 1 < t && !is_pad(pad, pos + 1) {
                let s = (pos + 1) * c + half;
                out[dst + half..dst + c].copy_from_slice(&xv[s..s + half]);
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn bi_shift_adjoint(g: &[f64], b: usize, t: usize, c: usize, pad: Option<&[bool]>) -> Vec<f64> {
    let half = c / 2;
    let mut d = vec![0.0; g.len()];
    for bi in 0..b {
        for ti in 0..t {
            let pos = bi * t + ti;
            if is_pad(pad, pos) {
                continue;
            }
            let dst = pos * c;
            if ti > 0 && !is_pad(pad, pos - 1) {
                let s = (pos - 1) * c;
                for j in 0..half {
                    d[s + j] += g[dst + j];
                }
            }
            if ti + 1 < t && !is_pad(pad, pos + 1) {
                let s = (pos + 1) * c + half;
                for j in 0..half {
                    d[s + j] += g[dst + half + j];
                }
            }
        }
    }
    d
}

/// `x + (1 - eta) ⊙ shifted`. This is an additive mix, not a convex blend:
/// `eta = 1` drops the shifted term and `eta = 0` adds it in full.
pub fn lerp(x: &Tensor, shifted: &Tensor, eta: &Tensor) -> Result<Tensor> {
    if x.shape() != shifted.shape() {
        return Err(Error::mismatch("lerp", x.shape(), shifted.shape()));
    }
    let ne = eta.len();
    let full = eta.shape() == x.shape();
    if !full && (eta.rank() != 1 || ne != x.last_dim()) {
        return Err(Error::mismatch("lerp", x.shape(), eta.shape()));
    }
    let ev = eta.data();
    let data = x
        .data()
        .iter()
        .zip(shifted.data())
        .enumerate()
        .map(|(j, (&a, &s))| a + (1.0 - ev[j % ne]) * s)
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Which projection a mixing vector feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LerpTarget {
    G,
    R,
    K,
    V,
    W,
}

/// Per-channel mixing vectors, one per target.
#[derive(Debug, Clone, PartialEq)]
pub struct LerpParams<P> {
    pub entries: Vec<(LerpTarget, P)>,
}

impl<P> LerpParams<P> {
    pub fn get(&self, target: LerpTarget) -> Result<&P> {
        self.entries
            .iter()
            .find(|(t, _)| *t == target)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::invalid("missing lerp target"))
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> LerpParams<Q> {
        LerpParams {
            entries: self.entries.iter().map(|(t, p)| (*t, f(p))).collect(),
        }
    }
}

/// Low-rank offset generator `phi(x) = lambda + tanh(x · m_in) · m_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayParams<P> {
    pub lambda: P,
    /// `[C, r]`
    pub m_in: P,
    /// `[r, C]`
    pub m_out: P,
}

impl<P> DecayParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> DecayParams<Q> {
        DecayParams {
            lambda: f(&self.lambda),
            m_in: f(&self.m_in),
            m_out: f(&self.m_out),
        }
    }
}

impl DecayParams<Tensor> {
    pub fn new(lambda: Tensor, m_in: Tensor, m_out: Tensor) -> Result<Self> {
        let c = lambda.len();
        let r = match *m_in.shape() {
            [cc, r] if cc == c => r,
            _ => return Err(Error::mismatch("decay params", lambda.shape(), m_in.shape())),
        };
        if m_out.shape() != [r, c] {
            return Err(Error::mismatch("decay params", m_in.shape(), m_out.shape()));
        }
        if r > c {
            return Err(Error::invalid("decay rank must not exceed the channel count"));
        }
        if !(lambda.is_finite() && m_in.is_finite() && m_out.is_finite()) {
            return Err(Error::NonFinite("decay params"));
        }
        Ok(Self { lambda, m_in, m_out })
    }

    pub fn rank(&self) -> usize {
        self.m_in.shape()[1]
    }
}

/// `phi` recorded on a tape; `x` is `[.., C]`.
pub fn phi_on(tape: &mut Tape, x: Var, p: &DecayParams<Var>) -> Result<Var> {
    let h = tape.matmul(x, p.m_in)?;
    let h = tape.tanh(h)?;
    let o = tape.matmul(h, p.m_out)?;
    tape.add_broadcast(o, p.lambda)
}

/// Decay path recorded on a tape. `outer` is applied to the mixed input and
/// `inner` produces the data-dependent mixing tensor; they are the same
/// parameter set unless the model is configured otherwise.
/// Returns `(w_tilde, w)`.
pub fn decay_path_on(
    tape: &mut Tape,
    x: Var,
    shifted: Var,
    eta_w: Var,
    inner: &DecayParams<Var>,
    outer: &DecayParams<Var>,
) -> Result<(Var, Var)> {
    let w_tilde = decay_log_on(tape, x, shifted, eta_w, inner, outer)?;
    let w = tape.unary(w_tilde, crate::autodiff::Unary::DecayFactor)?;
    Ok((w_tilde, w))
}

/// Same as [`decay_path_on`] but stops at `w_tilde`, which is what the
/// kernel consumes.
pub fn decay_log_on(
    tape: &mut Tape,
    x: Var,
    shifted: Var,
    eta_w: Var,
    inner: &DecayParams<Var>,
    outer: &DecayParams<Var>,
) -> Result<Var> {
    let mixed = tape.lerp(x, shifted, eta_w)?;
    let dyn_eta = phi_on(tape, mixed, inner)?;
    let w_hat = tape.lerp(x, shifted, dyn_eta)?;
    phi_on(tape, w_hat, outer)
}

pub fn phi(x: &Tensor, p: &DecayParams<Tensor>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pv = p.map(|t| tape.constant(t.clone()));
    let out = phi_on(&mut tape, xv, &pv)?;
    Ok(tape.value(out).clone())
}

/// `(w_tilde, w)` for a single shared parameter set.
pub fn decay_path(
    x: &Tensor,
    shifted: &Tensor,
    eta_w: &Tensor,
    p: &DecayParams<Tensor>,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let sv = tape.constant(shifted.clone());
    let ev = tape.constant(eta_w.clone());
    let pv = p.map(|t| tape.constant(t.clone()));
    let (wt, w) = decay_path_on(&mut tape, xv, sv, ev, &pv, &pv)?;
    Ok((tape.value(wt).clone(), tape.value(w).clone()))
}
