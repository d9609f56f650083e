//! Image and text towers built from spatial-mixing and channel-mixing
//! blocks, plus the dual-tower model with a learnable temperature.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::contrastive::Temperature;
use crate::error::{Error, Result};
use crate::shift::{self, DecayParams, LerpParams, LerpTarget};
use crate::tensor::Tensor;
use crate::wkv::DECAY_LOG_MIN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
}

fn default_ln_eps() -> f64 {
    1e-5
}

/// Hyperparameters of one tower.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub modality: Modality,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden_rate: f64,
    /// Image only.
    #[serde(default)]
    pub patch_size: usize,
    /// Image only; square inputs of this side length.
    #[serde(default)]
    pub image_size: usize,
    /// Text only.
    #[serde(default)]
    pub vocab_size: usize,
    /// Text only.
    #[serde(default)]
    pub context_len: usize,
    pub shared_dim: usize,
    pub decay_rank: usize,
    /// Learned absolute position table.
    #[serde(default)]
    pub abs_pos: bool,
    /// Separate parameters for the inner decay offset.
    #[serde(default)]
    pub separate_decay: bool,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

impl EncoderConfig {
    /// Full-size image tower: 224px input, 32px patches, 12 layers of width 640.
    pub fn full_image() -> Self {
        Self {
            modality: Modality::Image,
            embed_dim: 640,
            layers: 12,
            heads: 8,
            hidden_rate: 5.0,
            patch_size: 32,
            image_size: 224,
            vocab_size: 0,
            context_len: 0,
            shared_dim: 640,
            decay_rank: 32,
            abs_pos: false,
            separate_decay: false,
            ln_eps: default_ln_eps(),
        }
    }

    /// Full-size text tower: 6 layers of width 640, context 77.
    pub fn full_text() -> Self {
        Self {
            modality: Modality::Text,
            embed_dim: 640,
            layers: 6,
            heads: 10,
            hidden_rate: 3.5,
            patch_size: 0,
            image_size: 0,
            vocab_size: 49408,
            context_len: 77,
            shared_dim: 640,
            decay_rank: 32,
            abs_pos: false,
            separate_decay: false,
            ln_eps: default_ln_eps(),
        }
    }

    pub fn desk_image() -> Self {
        Self {
            embed_dim: 64,
            layers: 2,
            heads: 4,
            hidden_rate: 4.0,
            patch_size: 4,
            image_size: 32,
            shared_dim: 64,
            ..Self::full_image()
        }
    }

    pub fn desk_text() -> Self {
        Self {
            embed_dim: 64,
            layers: 2,
            heads: 2,
            hidden_rate: 3.5,
            vocab_size: crate::data::BYTE_VOCAB,
            context_len: 32,
            shared_dim: 64,
            ..Self::full_text()
        }
    }

    pub fn hidden_dim(&self) -> usize {
        libm::round(self.hidden_rate * self.embed_dim as f64) as usize
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Tokens per sample: patches for images, context length for text.
    pub fn tokens(&self) -> usize {
        match self.modality {
            Modality::Image => {
                let g = self.image_size / self.patch_size.max(1);
                g * g
            }
            Modality::Text => self.context_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("encoder config: {m}")));
        let c = self.embed_dim;
        if c == 0 || self.layers == 0 || self.heads == 0 || self.shared_dim == 0 {
            return bad("embed_dim, layers, heads and shared_dim must be positive");
        }
        if !c.is_multiple_of(self.heads) {
            return bad("embed_dim must be divisible by heads");
        }
        if !c.is_multiple_of(4) {
            return bad("embed_dim must be divisible by 4");
        }
        if !(self.hidden_rate > 0.0) || self.hidden_dim() == 0 {
            return bad("hidden_rate must give at least one hidden channel");
        }
        if self.decay_rank == 0 || self.decay_rank > c {
            return bad("decay_rank must be in 1..=embed_dim");
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive");
        }
        match self.modality {
            Modality::Image => {
                if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
                    return bad("image_size must be a positive multiple of patch_size");
                }
            }
            Modality::Text => {
                if self.vocab_size < 4 || self.context_len < 2 {
                    return bad("text towers need vocab_size >= 4 and context_len >= 2");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image: EncoderConfig,
    pub text: EncoderConfig,
    #[serde(default = "default_tau")]
    pub tau_init: f64,
}

fn default_tau() -> f64 {
    crate::contrastive::TAU_INIT
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image: EncoderConfig::desk_image(),
            text: EncoderConfig::desk_text(),
            tau_init: default_tau(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        self.text.validate()?;
        if self.image.modality != Modality::Image || self.text.modality != Modality::Text {
            return Err(Error::invalid("model config: tower modalities are swapped"));
        }
        if self.image.shared_dim != self.text.shared_dim {
            return Err(Error::invalid("model config: towers must share shared_dim"));
        }
        if !(self.tau_init > 0.0) {
            return Err(Error::invalid("model config: tau_init must be positive"));
        }
        Ok(())
    }
}

// ---- parameter storage ---------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Named tensors plus a weight-decay exemption flag per entry.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    decay_exempt: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay_exempt: bool) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        self.names.push(name);
        self.values.push(value);
        self.decay_exempt.push(decay_exempt);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn decay_exempt(&self) -> &[bool] {
        &self.decay_exempt
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a trainable tape leaf; the returned
    /// vector is indexed by `ParamId`.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    pub fn bind_constants(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|t| tape.constant(t.clone())).collect()
    }
}

// ---- tower layout --------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMixParams {
    pub eta: LerpParams<ParamId>,
    /// Applied to the data-dependent mix to produce `w_tilde`.
    pub decay: DecayParams<ParamId>,
    /// Produces the dynamic mixing vector; shares `decay` when absent.
    pub decay_inner: Option<DecayParams<ParamId>>,
    pub proj_g: ParamId,
    pub proj_r: ParamId,
    pub proj_k: ParamId,
    pub proj_v: ParamId,
    pub proj_out: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    /// `[H, C/H]`
    pub u: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMixParams {
    pub eta: LerpParams<ParamId>,
    pub proj_r: ParamId,
    /// `[C, C_h]`
    pub proj_k: ParamId,
    /// `[C_h, C]`
    pub proj_v: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub spatial: SpatialMixParams,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub channel: ChannelMixParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TowerParams {
    /// `[3p², C]` patch projection or `[vocab, C]` token table.
    pub embed: ParamId,
    pub pos: Option<ParamId>,
    pub blocks: Vec<BlockParams>,
    pub final_gain: ParamId,
    pub final_bias: ParamId,
    /// `[C, D_e]`
    pub proj_shared: ParamId,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn add(&mut self, name: String, t: Tensor, exempt: bool) -> Result<ParamId> {
        self.store.add(name, t, exempt)
    }

    fn randn(&mut self, name: String, shape: [usize; 2], std: f64) -> Result<ParamId> {
        let t = Tensor::randn(shape, std, self.rng);
        self.add(name, t, false)
    }

    fn norm(&mut self, prefix: &str, c: usize) -> Result<(ParamId, ParamId)> {
        let g = self.add(format!("{prefix}.gain"), Tensor::ones([c]), true)?;
        let b = self.add(format!("{prefix}.bias"), Tensor::zeros([c]), true)?;
        Ok((g, b))
    }

    fn lerp(&mut self, prefix: &str, targets: &[(LerpTarget, &str)], c: usize) -> Result<LerpParams<ParamId>> {
        let mut entries = Vec::new();
        for &(t, n) in targets {
            entries.push((t, self.add(format!("{prefix}.eta_{n}"), Tensor::full([c], 0.5), false)?));
        }
        Ok(LerpParams { entries })
    }

    fn decay(&mut self, prefix: &str, c: usize, r: usize) -> Result<DecayParams<ParamId>> {
        // per-channel base decays from slow (w near 1) to fast
        let lambda = Tensor::from_fn([c], |i| {
            let f = if c > 1 { i as f64 / (c - 1) as f64 } else { 0.0 };
            -5.0 + 4.5 * f
        });
        Ok(DecayParams {
            lambda: self.add(format!("{prefix}.lambda"), lambda, false)?,
            m_in: self.randn(format!("{prefix}.m_in"), [c, r], 0.1)?,
            m_out: self.add(format!("{prefix}.m_out"), Tensor::zeros([r, c]), false)?,
        })
    }
}

fn build_tower(cfg: &EncoderConfig, prefix: &str, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<TowerParams> {
    cfg.validate()?;
    let c = cfg.embed_dim;
    let ch = cfg.hidden_dim();
    let r = cfg.decay_rank;
    let proj_std = 1.0 / libm::sqrt(c as f64);
    let out_std = proj_std / libm::sqrt(2.0 * cfg.layers as f64);
    let mut b = Builder { store, rng };

    let embed = match cfg.modality {
        Modality::Image => {
            let fan = 3 * cfg.patch_size * cfg.patch_size;
            b.randn(format!("{prefix}.embed"), [fan, c], 1.0 / libm::sqrt(fan as f64))?
        }
        Modality::Text => b.randn(format!("{prefix}.embed"), [cfg.vocab_size, c], 1.0)?,
    };
    let pos = if cfg.abs_pos {
        Some(b.randn(format!("{prefix}.pos"), [cfg.tokens(), c], 0.02)?)
    } else {
        None
    };

    let mut blocks = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let p = format!("{prefix}.blocks.{l}");
        let (ln1_gain, ln1_bias) = b.norm(&format!("{p}.ln1"), c)?;
        let sp = format!("{p}.spatial");
        let eta = b.lerp(
            &sp,
            &[
                (LerpTarget::G, "g"),
                (LerpTarget::R, "r"),
                (LerpTarget::K, "k"),
                (LerpTarget::V, "v"),
                (LerpTarget::W, "w"),
            ],
            c,
        )?;
        let decay = b.decay(&format!("{sp}.decay"), c, r)?;
        let decay_inner = if cfg.separate_decay {
            Some(b.decay(&format!("{sp}.decay_inner"), c, r)?)
        } else {
            None
        };
        let proj_g = b.randn(format!("{sp}.proj_g"), [c, c], proj_std)?;
        let proj_r = b.randn(format!("{sp}.proj_r"), [c, c], proj_std)?;
        let proj_k = b.randn(format!("{sp}.proj_k"), [c, c], proj_std)?;
        let proj_v = b.randn(format!("{sp}.proj_v"), [c, c], proj_std)?;
        let proj_out = b.randn(format!("{sp}.proj_out"), [c, c], out_std)?;
        let (ln_gain, ln_bias) = b.norm(&format!("{sp}.head_ln"), c)?;
        let u = b.add(format!("{sp}.u"), Tensor::full([cfg.heads, c / cfg.heads], 0.5), false)?;
        let spatial = SpatialMixParams {
            eta,
            decay,
            decay_inner,
            proj_g,
            proj_r,
            proj_k,
            proj_v,
            proj_out,
            ln_gain,
            ln_bias,
            u,
        };

        let (ln2_gain, ln2_bias) = b.norm(&format!("{p}.ln2"), c)?;
        let cp = format!("{p}.channel");
        let eta = b.lerp(&cp, &[(LerpTarget::R, "r"), (LerpTarget::K, "k")], c)?;
        let channel = ChannelMixParams {
            eta,
            proj_r: b.randn(format!("{cp}.proj_r"), [c, c], proj_std)?,
            proj_k: b.randn(format!("{cp}.proj_k"), [c, ch], proj_std)?,
            proj_v: b.randn(format!("{cp}.proj_v"), [ch, c], out_std * libm::sqrt(c as f64 / ch as f64))?,
        };
        blocks.push(BlockParams {
            ln1_gain,
            ln1_bias,
            spatial,
            ln2_gain,
            ln2_bias,
            channel,
        });
    }
    let (final_gain, final_bias) = b.norm(&format!("{prefix}.final_ln"), c)?;
    let proj_shared = b.randn(format!("{prefix}.proj_shared"), [c, cfg.shared_dim], proj_std)?;
    Ok(TowerParams {
        embed,
        pos,
        blocks,
        final_gain,
        final_bias,
        proj_shared,
    })
}

impl TowerParams {
    /// A standalone tower in its own store.
    pub fn init(cfg: &EncoderConfig, prefix: &str, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = build_tower(cfg, prefix, &mut store, &mut rng)?;
        Ok((t, store))
    }
}

// ---- forward -------------------------------------------------------------

/// Spatial context threaded through the blocks.
#[derive(Debug, Clone, PartialEq)]
pub enum MixContext {
    Image { h_tokens: usize, w_tokens: usize },
    Text { pad: Vec<bool> },
}

impl MixContext {
    fn keep(&self) -> Option<Vec<bool>> {
        match self {
            MixContext::Text { pad } => Some(pad.iter().map(|p| !p).collect()),
            MixContext::Image { .. } => None,
        }
    }
}

fn shift_on(tape: &mut Tape, x: Var, ctx: &MixContext) -> Result<Var> {
    match ctx {
        MixContext::Image { h_tokens, w_tokens } => tape.quad_shift(x, *h_tokens, *w_tokens),
        MixContext::Text { pad } => tape.bi_shift(x, Some(pad)),
    }
}

/// Splits `[B, Hpix, Wpix, 3]` into raster-ordered `p×p` patches, each
/// flattened rows, then columns, then channels: `[B, T, 3p²]`.
pub fn patchify(image: &Tensor, p: usize) -> Result<(Tensor, usize, usize)> {
    let (b, hp, wp) = match *image.shape() {
        [b, h, w, 3] => (b, h, w),
        _ => {
            return Err(Error::InvalidShape {
                shape: image.shape().to_vec(),
                reason: "images must be [B, H, W, 3]",
            })
        }
    };
    if p == 0 || hp % p != 0 || wp % p != 0 {
        return Err(Error::InvalidShape {
            shape: image.shape().to_vec(),
            reason: "image sides must be multiples of the patch size",
        });
    }
    let (gh, gw) = (hp / p, wp / p);
    let x = image.data();
    let mut out = Vec::with_capacity(image.len());
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for y in py * p..(py + 1) * p {
                    let start = ((bi * hp + y) * wp + px * p) * 3;
                    out.extend_from_slice(&x[start..start + 3 * p]);
                }
            }
        }
    }
    Ok((Tensor::new([b, gh * gw, 3 * p * p], out)?, gh, gw))
}

/// Patch tokens `[B, T, C]` and the grid size.
pub fn patch_embed(tape: &mut Tape, image: &Tensor, p: usize, proj: Var) -> Result<(Var, MixContext)> {
    let (patches, h_tokens, w_tokens) = patchify(image, p)?;
    let pv = tape.constant(patches);
    let x = tape.matmul(pv, proj)?;
    Ok((x, MixContext::Image { h_tokens, w_tokens }))
}

/// Token rows `[B, T, C]` for `ids` laid out `[B, T]`; id 0 is padding.
pub fn text_embed(tape: &mut Tape, ids: &[usize], batch: usize, table: Var) -> Result<(Var, MixContext)> {
    if batch == 0 || !ids.len().is_multiple_of(batch) || ids.is_empty() {
        return Err(Error::invalid("token ids must form a non-empty [B, T] block"));
    }
    let t = ids.len() / batch;
    let pad: Vec<bool> = ids.iter().map(|&i| i == crate::data::PAD).collect();
    shift::check_trailing_pad(&pad, batch, t)?;
    let x = tape.embedding(table, ids, &[batch, t])?;
    Ok((x, MixContext::Text { pad }))
}

fn decay_vars(p: &DecayParams<ParamId>, vars: &[Var]) -> DecayParams<Var> {
    p.map(|id| vars[id.0])
}

/// Token shift, four projections, data-dependent decay, bidirectional WKV,
/// per-head norm and the SiLU gate, then the output projection.
pub fn spatial_mixing(
    tape: &mut Tape,
    x: Var,
    p: &SpatialMixParams,
    vars: &[Var],
    ctx: &MixContext,
    heads: usize,
    eps: f64,
) -> Result<Var> {
    let v = |id: ParamId| vars[id.0];
    let xs = shift_on(tape, x, ctx)?;
    let proj = |tape: &mut Tape, t: LerpTarget, w: ParamId| -> Result<Var> {
        let m = tape.lerp(x, xs, v(*p.eta.get(t)?))?;
        tape.matmul(m, v(w))
    };
    let g = proj(tape, LerpTarget::G, p.proj_g)?;
    let r = proj(tape, LerpTarget::R, p.proj_r)?;
    let mut k = proj(tape, LerpTarget::K, p.proj_k)?;
    let mut val = proj(tape, LerpTarget::V, p.proj_v)?;
    let outer = decay_vars(&p.decay, vars);
    let inner = p.decay_inner.as_ref().map(|d| decay_vars(d, vars)).unwrap_or_else(|| outer.clone());
    let mut w_tilde = shift::decay_log_on(tape, x, xs, v(*p.eta.get(LerpTarget::W)?), &inner, &outer)?;
    if let Some(keep) = ctx.keep() {
        k = tape.row_fill(k, &keep, 0.0)?;
        val = tape.row_fill(val, &keep, 0.0)?;
        // w = 1 exactly: pads neither add to nor attenuate the state
        w_tilde = tape.row_fill(w_tilde, &keep, DECAY_LOG_MIN)?;
    }
    let o = tape.wkv(r, k, val, w_tilde, v(p.u), heads)?;
    let o = tape.group_norm(o, v(p.ln_gain), v(p.ln_bias), heads, eps)?;
    let gate = tape.silu(g)?;
    let o = tape.mul(gate, o)?;
    tape.matmul(o, v(p.proj_out))
}

/// `silu(R) ⊙ (squared_relu(K) · proj_v)` over shifted-and-mixed inputs.
pub fn channel_mixing(tape: &mut Tape, x: Var, p: &ChannelMixParams, vars: &[Var], ctx: &MixContext) -> Result<Var> {
    let v = |id: ParamId| vars[id.0];
    let xs = shift_on(tape, x, ctx)?;
    let mr = tape.lerp(x, xs, v(*p.eta.get(LerpTarget::R)?))?;
    let mk = tape.lerp(x, xs, v(*p.eta.get(LerpTarget::K)?))?;
    let r = tape.matmul(mr, v(p.proj_r))?;
    let k = tape.matmul(mk, v(p.proj_k))?;
    let k = tape.squared_relu(k)?;
    let kv = tape.matmul(k, v(p.proj_v))?;
    let gate = tape.silu(r)?;
    tape.mul(gate, kv)
}

pub enum TowerInput<'a> {
    /// `[B, Hpix, Wpix, 3]`
    Image(&'a Tensor),
    /// Token ids laid out `[batch, T]`.
    Text { ids: &'a [usize], batch: usize },
}

/// Embed, pre-norm residual blocks, final norm, masked mean pool, shared
/// projection and L2 normalization. Returns `[B, D_e]`.
pub fn encoder_forward(
    tape: &mut Tape,
    tower: &TowerParams,
    cfg: &EncoderConfig,
    vars: &[Var],
    input: TowerInput<'_>,
) -> Result<Var> {
    let v = |id: ParamId| vars[id.0];
    let (mut x, ctx) = match (cfg.modality, input) {
        (Modality::Image, TowerInput::Image(img)) => patch_embed(tape, img, cfg.patch_size, v(tower.embed))?,
        (Modality::Text, TowerInput::Text { ids, batch }) => {
            if ids.len() / batch.max(1) > cfg.context_len {
                return Err(Error::invalid("text longer than the tower's context"));
            }
            text_embed(tape, ids, batch, v(tower.embed))?
        }
        _ => return Err(Error::WrongLayout("encoder input does not match tower modality")),
    };
    if let Some(pos) = tower.pos {
        x = tape.add_broadcast(x, v(pos))?;
    }
    for blk in &tower.blocks {
        let h = tape.layer_norm(x, v(blk.ln1_gain), v(blk.ln1_bias), cfg.ln_eps)?;
        let h = spatial_mixing(tape, h, &blk.spatial, vars, &ctx, cfg.heads, cfg.ln_eps)?;
        x = tape.add(x, h)?;
        let h = tape.layer_norm(x, v(blk.ln2_gain), v(blk.ln2_bias), cfg.ln_eps)?;
        let h = channel_mixing(tape, h, &blk.channel, vars, &ctx)?;
        x = tape.add(x, h)?;
    }
    let x = tape.layer_norm(x, v(tower.final_gain), v(tower.final_bias), cfg.ln_eps)?;
    let valid = ctx.keep();
    let pooled = tape.mean_pool(x, valid.as_deref())?;
    let e = tape.matmul(pooled, v(tower.proj_shared))?;
    tape.l2_normalize(e)
}

// ---- counting ------------------------------------------------------------

/// Learnable scalars in one tower, matching what [`TowerParams::init`]
/// allocates.
pub fn param_count(cfg: &EncoderConfig) -> usize {
    let c = cfg.embed_dim;
    let ch = cfg.hidden_dim();
    let r = cfg.decay_rank;
    let decay_sets = if cfg.separate_decay { 2 } else { 1 };
    let spatial = 5 * c * c + 5 * c + decay_sets * (c + 2 * c * r) + 2 * c + c;
    let channel = c * c + 2 * c * ch + 2 * c;
    let block = 2 * c + spatial + 2 * c + channel;
    let embed = match cfg.modality {
        Modality::Image => 3 * cfg.patch_size * cfg.patch_size * c,
        Modality::Text => cfg.vocab_size * c,
    };
    let pos = if cfg.abs_pos { cfg.tokens() * c } else { 0 };
    embed + pos + cfg.layers * block + 2 * c + c * cfg.shared_dim
}

pub fn matmul_flops(m: usize, k: usize, n: usize) -> f64 {
    2.0 * (m * k * n) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsEstimate {
    pub matmul: f64,
    pub scan: f64,
    pub total: f64,
}

/// Forward FLOPs for one sample of `tokens` tokens: twice the
/// multiply-accumulates of every projection plus the two WKV sweeps.
/// Elementwise work is ignored.
pub fn flops_estimate(cfg: &EncoderConfig, tokens: usize) -> FlopsEstimate {
    let (c, ch, r, h, d) = (cfg.embed_dim, cfg.hidden_dim(), cfg.decay_rank, cfg.heads, cfg.head_dim());
    let t = tokens;
    let embed = match cfg.modality {
        Modality::Image => matmul_flops(t, 3 * cfg.patch_size * cfg.patch_size, c),
        Modality::Text => 0.0,
    };
    let decay_mm = 2.0 * (matmul_flops(t, c, r) + matmul_flops(t, r, c));
    let block = 5.0 * matmul_flops(t, c, c) + decay_mm + matmul_flops(t, c, c) + 2.0 * matmul_flops(t, c, ch);
    let matmul = embed + cfg.layers as f64 * block + matmul_flops(1, c, cfg.shared_dim);
    // per direction, token and head: outer product, decayed accumulate, readout
    let scan = cfg.layers as f64 * 2.0 * 2.0 * 3.0 * (t * h * d * d) as f64;
    FlopsEstimate {
        matmul,
        scan,
        total: matmul + scan,
    }
}

// ---- dual-tower model ----------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ClipModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub image: TowerParams,
    pub text: TowerParams,
    pub log_inv_tau: ParamId,
}

impl ClipModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = build_tower(&config.image, "image", &mut store, &mut rng)?;
        let text = build_tower(&config.text, "text", &mut store, &mut rng)?;
        let theta = Temperature::from_tau(config.tau_init).log_inv_tau;
        let log_inv_tau = store.add("log_inv_tau", Tensor::scalar(theta), true)?;
        Ok(Self {
            config,
            store,
            image,
            text,
            log_inv_tau,
        })
    }

    /// Rebuilds the layout for `config` and fills it from named tensors.
    /// Every expected name must be present with the expected shape, and no
    /// extra names are allowed.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if named.len() != model.store.len() {
            return Err(Error::invalid(format!(
                "expected {} tensors, found {}",
                model.store.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            let id = model
                .store
                .id_of(&name)
                .ok_or_else(|| Error::invalid(format!("unexpected tensor {name}")))?;
            let slot = model.store.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(Error::mismatch("checkpoint tensor", slot.shape(), t.shape()));
            }
            *slot = t;
        }
        Ok(model)
    }

    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.store.names().iter().map(String::as_str).zip(self.store.values())
    }

    pub fn temperature(&self) -> Temperature {
        Temperature {
            log_inv_tau: self.store.get(self.log_inv_tau).data()[0],
        }
    }

    pub fn encode_images(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.store.bind_constants(&mut tape);
        let e = encoder_forward(&mut tape, &self.image, &self.config.image, &vars, TowerInput::Image(images))?;
        Ok(tape.value(e).clone())
    }

    pub fn encode_texts(&self, ids: &[usize], batch: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.store.bind_constants(&mut tape);
        let e = encoder_forward(&mut tape, &self.text, &self.config.text, &vars, TowerInput::Text { ids, batch })?;
        Ok(tape.value(e).clone())
    }

    /// Mean-form loss (sum form divided by `2N`) and its gradient for every
    /// parameter, indexed like the store.
    pub fn loss_and_grads(&self, images: &Tensor, ids: &[usize], batch: usize) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape);
        let ie = encoder_forward(&mut tape, &self.image, &self.config.image, &vars, TowerInput::Image(images))?;
        let te = encoder_forward(&mut tape, &self.text, &self.config.text, &vars, TowerInput::Text { ids, batch })?;
        let n = tape.shape(ie)[0];
        let loss = tape.clip_loss(ie, te, vars[self.log_inv_tau.0])?;
        let loss = tape.scale(loss, 1.0 / (2.0 * n as f64))?;
        tape.backward(loss)?;
        let value = tape.value(loss).data()[0];
        Ok((value, vars.iter().map(|&v| tape.grad_tensor(v)).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckConfig};
    use crate::math;
    use crate::wkv::{biwkv_naive, heads_to_tokens, tokens_to_heads, WkvInputs};
    use alloc::vec;
    use crate::suite::{micro_config as micro, scramble};
    use proptest::prelude::*;

    fn forward(tower: &TowerParams, cfg: &EncoderConfig, store: &ParamStore, input: TowerInput<'_>) -> Tensor {
        let mut tape = Tape::new();
        let vars = store.bind_constants(&mut tape);
        let e = encoder_forward(&mut tape, tower, cfg, &vars, input).unwrap();
        tape.value(e).clone()
    }

    #[test]
    fn patchify_examples() {
        let (t, h, w) = patchify(&Tensor::zeros([1, 224, 224, 3]), 32).unwrap();
        assert_eq!((t.shape()[1], h, w), (49, 7, 7));

        let mut tape = Tape::new();
        let img = Tensor::full([1, 32, 32, 3], 0.5);
        let proj = tape.constant(Tensor::full([3 * 32 * 32, 4], 1.0 / 3072.0));
        let (x, _) = patch_embed(&mut tape, &img, 32, proj).unwrap();
        assert_eq!(tape.shape(x), &[1, 1, 4]);
        assert!(tape.value(x).data().iter().all(|&v| (v - 0.5).abs() < 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let img = Tensor::randn([1, 64, 64, 3], 1.0, &mut rng);
        let (t, _, w) = patchify(&img, 32).unwrap();
        // token (0, 1) is rows 0..32, cols 32..64
        let mut expect = Vec::new();
        for y in 0..32 {
            for x in 32..64 {
                for ch in 0..3 {
                    expect.push(img.data()[(y * 64 + x) * 3 + ch]);
                }
            }
        }
        let tok = 1;
        assert_eq!(w, 2);
        assert_eq!(&t.data()[tok * 3072..(tok + 1) * 3072], &expect[..]);
        assert!(patchify(&Tensor::zeros([1, 30, 32, 3]), 32).is_err());
    }

    #[test]
    fn text_embed_pads_and_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let table = Tensor::randn([10, 4], 1.0, &mut rng);
        let ids = [1, 5, 2, 0, 1, 7, 0, 0];
        let mut tape = Tape::new();
        let tv = tape.constant(table.clone());
        let (x, ctx) = text_embed(&mut tape, &ids, 2, tv).unwrap();
        assert_eq!(ctx, MixContext::Text { pad: ids.iter().map(|&i| i == 0).collect() });
        let batched = tape.value(x).clone();
        for (b, chunk) in ids.chunks(4).enumerate() {
            let (xs, _) = text_embed(&mut tape, chunk, 1, tv).unwrap();
            assert_eq!(tape.value(xs).data(), &batched.data()[b * 16..(b + 1) * 16]);
        }
        assert!(batched.data()[3 * 4..4 * 4].iter().all(|&v| v == 0.0));
        let (x1, _) = text_embed(&mut tape, &[5], 1, tv).unwrap();
        assert_eq!(tape.shape(x1), &[1, 1, 4]);
        assert!(text_embed(&mut tape, &[1, 11], 1, tv).is_err());
        // pads in the middle are rejected
        assert!(text_embed(&mut tape, &[1, 0, 3], 1, tv).is_err());
    }

    /// Spatial mixing rebuilt from the pure helpers and explicit loops, with
    /// the quadratic kernel and a hand-written per-head norm.
    fn spatial_oracle(x: &Tensor, pad: &[bool], store: &ParamStore, p: &SpatialMixParams, heads: usize, eps: f64) -> Tensor {
        let get = |id: ParamId| store.get(id).clone();
        let (b, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let xs = shift::bi_shift(x, Some(pad)).unwrap();
        let mm = |a: &Tensor, w: &Tensor| {
            let n = w.shape()[1];
            let k = w.shape()[0];
            let rows = a.len() / k;
            let mut out = vec![0.0; rows * n];
            for i in 0..rows {
                for j in 0..n {
                    out[i * n + j] = (0..k).map(|q| a.data()[i * k + q] * w.data()[q * n + j]).sum();
                }
            }
            let mut s = a.shape().to_vec();
            *s.last_mut().unwrap() = n;
            Tensor::new(s, out).unwrap()
        };
        let pr = |tgt, w| mm(&shift::lerp(x, &xs, &get(*p.eta.get(tgt).unwrap())).unwrap(), &get(w));
        let g = pr(LerpTarget::G, p.proj_g);
        let r = pr(LerpTarget::R, p.proj_r);
        let mut k = pr(LerpTarget::K, p.proj_k);
        let mut v = pr(LerpTarget::V, p.proj_v);
        let decay = p.decay.map(|&id| get(id));
        let (mut wt, _) = shift::decay_path(x, &xs, &get(*p.eta.get(LerpTarget::W).unwrap()), &decay).unwrap();
        for (i, &is_pad) in pad.iter().enumerate() {
            if is_pad {
                for ch in 0..c {
                    k.data_mut()[i * c + ch] = 0.0;
                    v.data_mut()[i * c + ch] = 0.0;
                    wt.data_mut()[i * c + ch] = -40.0;
                }
            }
        }
        let inp = WkvInputs::new(
            tokens_to_heads(&r, heads).unwrap(),
            tokens_to_heads(&k, heads).unwrap(),
            tokens_to_heads(&v, heads).unwrap(),
            tokens_to_heads(&wt, heads).unwrap(),
            get(p.u),
        )
        .unwrap();
        let o = heads_to_tokens(&biwkv_naive(&inp).unwrap()).unwrap();
        let (gain, bias) = (get(p.ln_gain), get(p.ln_bias));
        let d = c / heads;
        let mut y = vec![0.0; b * t * c];
        for row in 0..b * t {
            for h in 0..heads {
                let seg = &o.data()[row * c + h * d..row * c + (h + 1) * d];
                let mean = seg.iter().sum::<f64>() / d as f64;
                let var = seg.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / d as f64;
                for j in 0..d {
                    let ch = h * d + j;
                    let ln = (seg[j] - mean) / libm::sqrt(var + eps) * gain.data()[ch] + bias.data()[ch];
                    y[row * c + ch] = math::silu(g.data()[row * c + ch]) * ln;
                }
            }
        }
        mm(&Tensor::new([b, t, c], y).unwrap(), &get(p.proj_out))
    }

    #[test]
    fn spatial_mixing_matches_recomposition() {
        let cfg = micro(Modality::Text);
        let (tower, mut store) = TowerParams::init(&cfg, "t", 1).unwrap();
        scramble(&mut store, 2, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for (t, npad) in [(5usize, 0usize), (5, 2), (1, 0)] {
            let x = Tensor::randn([2, t, 8], 1.0, &mut rng);
            let pad: Vec<bool> = (0..2 * t).map(|i| i % t >= t - npad && i >= t).collect();
            let mut tape = Tape::new();
            let vars = store.bind_constants(&mut tape);
            let xv = tape.constant(x.clone());
            let ctx = MixContext::Text { pad: pad.clone() };
            let y = spatial_mixing(&mut tape, xv, &tower.blocks[0].spatial, &vars, &ctx, 2, cfg.ln_eps).unwrap();
            let oracle = spatial_oracle(&x, &pad, &store, &tower.blocks[0].spatial, 2, cfg.ln_eps);
            let diff = tape.value(y).max_abs_diff(&oracle).unwrap();
            assert!(diff < 1e-10, "T={t} pads={npad}: {diff}");
        }
    }

    #[test]
    fn spatial_mixing_of_zero_is_zero() {
        let cfg = micro(Modality::Image);
        let (tower, store) = TowerParams::init(&cfg, "i", 3).unwrap();
        let mut tape = Tape::new();
        let vars = store.bind_constants(&mut tape);
        let x = tape.constant(Tensor::zeros([1, 4, 8]));
        let ctx = MixContext::Image { h_tokens: 2, w_tokens: 2 };
        let y = spatial_mixing(&mut tape, x, &tower.blocks[0].spatial, &vars, &ctx, 2, cfg.ln_eps).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mixing_examples() {
        let cfg = EncoderConfig {
            embed_dim: 8,
            hidden_rate: 3.5,
            ..micro(Modality::Text)
        };
        let (tower, mut store) = TowerParams::init(&cfg, "t", 4).unwrap();
        scramble(&mut store, 5, 0.3);
        let cm = tower.blocks[0].channel.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let x = Tensor::randn([1, 3, 8], 1.0, &mut rng);
        let ctx = MixContext::Text { pad: vec![false; 3] };
        let run = |store: &ParamStore| {
            let mut tape = Tape::new();
            let vars = store.bind_constants(&mut tape);
            let xv = tape.constant(x.clone());
            let y = channel_mixing(&mut tape, xv, &cm, &vars, &ctx).unwrap();
            tape.value(y).clone()
        };

        // loop oracle
        let get = |id: ParamId| store.get(id).clone();
        let xs = shift::bi_shift(&x, None).unwrap();
        let ch = cfg.hidden_dim();
        assert_eq!(ch, 28);
        let mr = shift::lerp(&x, &xs, &get(*cm.eta.get(LerpTarget::R).unwrap())).unwrap();
        let mk = shift::lerp(&x, &xs, &get(*cm.eta.get(LerpTarget::K).unwrap())).unwrap();
        let (wr, wk, wv) = (get(cm.proj_r), get(cm.proj_k), get(cm.proj_v));
        let y = run(&store);
        for tok in 0..3 {
            let mut hidden = vec![0.0; ch];
            for (j, h) in hidden.iter_mut().enumerate() {
                let s: f64 = (0..8).map(|q| mk.data()[tok * 8 + q] * wk.data()[q * ch + j]).sum();
                *h = math::squared_relu(s);
            }
            for o in 0..8 {
                let r: f64 = (0..8).map(|q| mr.data()[tok * 8 + q] * wr.data()[q * 8 + o]).sum();
                let kv: f64 = (0..ch).map(|j| hidden[j] * wv.data()[j * 8 + o]).sum();
                assert!((y.data()[tok * 8 + o] - math::silu(r) * kv).abs() < 1e-12);
            }
        }

        let mut zk = store.clone();
        zk.get_mut(cm.proj_k).data_mut().iter_mut().for_each(|v| *v = 0.0);
        assert!(run(&zk).data().iter().all(|&v| v == 0.0));

        // R pushed far negative: silu saturates to ~0
        let mut neg = store.clone();
        neg.get_mut(cm.proj_r).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let x_ones = Tensor::ones([1, 3, 8]);
        let eta_r = *cm.eta.get(LerpTarget::R).unwrap();
        neg.get_mut(eta_r).data_mut().iter_mut().for_each(|v| *v = 1.0);
        for q in 0..8 {
            neg.get_mut(cm.proj_r).data_mut()[q * 8 + q] = -100.0;
        }
        let mut tape = Tape::new();
        let vars = neg.bind_constants(&mut tape);
        let xv = tape.constant(x_ones);
        let y = channel_mixing(&mut tape, xv, &cm, &vars, &ctx).unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-30));
    }

    #[test]
    fn embeddings_are_unit_norm_and_batch_independent() {
        let cfg = micro(Modality::Image);
        let (tower, mut store) = TowerParams::init(&cfg, "i", 6).unwrap();
        scramble(&mut store, 7, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let imgs = Tensor::randn([3, 4, 4, 3], 1.0, &mut rng);
        let all = forward(&tower, &cfg, &store, TowerInput::Image(&imgs));
        for row in all.data().chunks(8) {
            assert!((math::dot(row, row) - 1.0).abs() < 1e-12);
        }
        for (i, img) in imgs.unstack().into_iter().enumerate() {
            let one = img.reshape([1, 4, 4, 3]).unwrap();
            let alone = forward(&tower, &cfg, &store, TowerInput::Image(&one));
            for (a, b) in alone.data().iter().zip(all.row(i)) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
        assert_eq!(all, forward(&tower, &cfg, &store, TowerInput::Image(&imgs)));
    }

    #[test]
    fn text_embedding_ignores_appended_pads() {
        let cfg = micro(Modality::Text);
        let (tower, mut store) = TowerParams::init(&cfg, "t", 8).unwrap();
        scramble(&mut store, 9, 0.3);
        let short = [1, 5, 7, 2];
        let long = [1, 5, 7, 2, 0, 0];
        let a = forward(&tower, &cfg, &store, TowerInput::Text { ids: &short, batch: 1 });
        let b = forward(&tower, &cfg, &store, TowerInput::Text { ids: &long, batch: 1 });
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-10);
    }

    #[test]
    fn zeroed_output_projections_leave_the_residual_path() {
        let cfg = EncoderConfig {
            layers: 2,
            ..micro(Modality::Image)
        };
        let (tower, mut store) = TowerParams::init(&cfg, "i", 10).unwrap();
        scramble(&mut store, 11, 0.2);
        for blk in &tower.blocks {
            store.get_mut(blk.spatial.proj_out).data_mut().fill(0.0);
            store.get_mut(blk.channel.proj_v).data_mut().fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let imgs = Tensor::randn([2, 4, 4, 3], 1.0, &mut rng);
        let full = forward(&tower, &cfg, &store, TowerInput::Image(&imgs));

        let mut tape = Tape::new();
        let vars = store.bind_constants(&mut tape);
        let v = |id: ParamId| vars[id.0];
        let (x, _) = patch_embed(&mut tape, &imgs, 2, v(tower.embed)).unwrap();
        let x = tape.layer_norm(x, v(tower.final_gain), v(tower.final_bias), cfg.ln_eps).unwrap();
        let x = tape.mean_pool(x, None).unwrap();
        let x = tape.matmul(x, v(tower.proj_shared)).unwrap();
        let x = tape.l2_normalize(x).unwrap();
        assert!(full.max_abs_diff(tape.value(x)).unwrap() < 1e-12);
    }

    #[test]
    fn image_token_count_law() {
        for (side, p) in [(32usize, 8usize), (24, 4), (16, 16), (12, 3)] {
            let (t, h, w) = patchify(&Tensor::zeros([1, side, side, 3]), p).unwrap();
            assert_eq!(t.shape()[1], (side / p) * (side / p));
            assert_eq!(h * w, t.shape()[1]);
        }
    }

    fn end_to_end_check(cfg: EncoderConfig, input_seed: u64) {
        let (tower, mut store) = TowerParams::init(&cfg, "m", 12).unwrap();
        scramble(&mut store, 13, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(input_seed);
        let imgs = Tensor::randn([2, 4, 4, 3], 1.0, &mut rng);
        let readout = Tensor::randn([2, 8], 1.0, &mut rng);
        let ids = [1usize, 4, 9, 2, 0, 0, 1, 3, 2, 0, 0, 0];
        let r = grad_check(
            |tape, vars| {
                let input = match cfg.modality {
                    Modality::Image => TowerInput::Image(&imgs),
                    Modality::Text => TowerInput::Text { ids: &ids, batch: 2 },
                };
                let e = encoder_forward(tape, &tower, &cfg, vars, input)?;
                let w = tape.constant(readout.clone());
                tape.mul(e, w)
            },
            store.values(),
            &GradCheckConfig::with_rel_tol(1e-4),
        )
        .unwrap();
        assert!(r.passed, "{:?}: {r:?}", cfg.modality);
    }

    #[test]
    fn image_tower_gradcheck() {
        end_to_end_check(micro(Modality::Image), 47);
    }

    #[test]
    fn text_tower_gradcheck() {
        end_to_end_check(micro(Modality::Text), 48);
    }

    #[test]
    fn full_size_param_counts() {
        let img = param_count(&EncoderConfig::full_image()) as f64;
        let txt = param_count(&EncoderConfig::full_text()) as f64;
        assert!((img / 84.21e6 - 1.0).abs() <= 0.10, "{img}");
        assert!((txt / 65.35e6 - 1.0).abs() <= 0.10, "{txt}");
    }

    #[test]
    fn micro_param_count_by_hand() {
        let cfg = EncoderConfig {
            embed_dim: 4,
            layers: 1,
            heads: 1,
            hidden_rate: 1.0,
            decay_rank: 1,
            patch_size: 2,
            image_size: 4,
            shared_dim: 4,
            ..EncoderConfig::full_image()
        };
        // embed 3*2*2*4 = 48
        // spatial: five 4x4 = 80, five eta = 20, lambda 4, m_in 4, m_out 4,
        //          head norm 8, u 4 -> 124
        // channel: 4x4 + 4x4 + 4x4 = 48, two eta = 8 -> 56
        // block norms 16; final norm 8; shared projection 16
        assert_eq!(param_count(&cfg), 48 + 124 + 56 + 16 + 8 + 16);
        assert_eq!(param_count(&cfg), 268);
        assert_eq!(TowerParams::init(&cfg, "x", 0).unwrap().1.scalar_count(), 268);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn param_count_matches_allocation(
            c4 in 1usize..5, layers in 1usize..3, rate in 0.5f64..4.0, r in 1usize..4,
            text in any::<bool>(), abs_pos in any::<bool>(), sep in any::<bool>(),
        ) {
            let c = 4 * c4;
            let base = if text { micro(Modality::Text) } else { micro(Modality::Image) };
            let cfg = EncoderConfig {
                embed_dim: c, layers, hidden_rate: rate, decay_rank: r.min(c), heads: 2,
                abs_pos, separate_decay: sep, ..base
            };
            prop_assume!(cfg.validate().is_ok());
            let (_, store) = TowerParams::init(&cfg, "p", 0).unwrap();
            prop_assert_eq!(store.scalar_count(), param_count(&cfg));
        }
    }

    #[test]
    fn flops_examples() {
        assert_eq!(matmul_flops(3, 5, 7), 210.0);
        let cfg = EncoderConfig::full_image();
        let a = flops_estimate(&cfg, 49);
        let b = flops_estimate(&cfg, 98);
        assert_eq!(b.scan, 2.0 * a.scan);
        // informational: same order of magnitude as the reported 7.91G
        assert!(a.total > 1e9 && a.total < 1e11, "{}", a.total);
    }

    #[test]
    fn clip_model_loss_and_grads() {
        let config = ModelConfig {
            image: micro(Modality::Image),
            text: micro(Modality::Text),
            tau_init: 0.07,
        };
        let model = ClipModel::new(config.clone(), 14).unwrap();
        assert!((model.temperature().tau() - 0.07).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let imgs = Tensor::randn([3, 4, 4, 3], 1.0, &mut rng);
        let ids = [1, 4, 2, 0, 0, 0, 1, 5, 6, 2, 0, 0, 1, 9, 2, 0, 0, 0];
        let (loss, grads) = model.loss_and_grads(&imgs, &ids, 3).unwrap();
        assert!(loss > 0.0);
        assert_eq!(grads.len(), model.store.len());
        assert!(grads[model.log_inv_tau.0].data()[0] != 0.0);

        let named = model.named_tensors().map(|(n, t)| (String::from(n), t.clone())).collect();
        let again = ClipModel::from_named(config.clone(), named).unwrap();
        assert_eq!(again, model);
        assert!(ClipModel::from_named(config, vec![]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::desk_image().validate().is_ok());
        assert!(EncoderConfig::desk_text().validate().is_ok());
        assert!(ModelConfig::default().validate().is_ok());
        let bad = EncoderConfig {
            heads: 3,
            ..EncoderConfig::desk_image()
        };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig {
            image_size: 30,
            ..EncoderConfig::desk_image()
        };
        assert!(bad.validate().is_err());
    }
}
