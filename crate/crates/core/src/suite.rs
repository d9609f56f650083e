//! The standard finite-difference suite: every differentiable op, the
//! WKV kernel against its quadratic form, both mixing blocks and both
//! towers on micro configs.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Unary, Var};
use crate::error::Result;
use crate::gradcheck::{compare_gradients, grad_check, numeric_gradients, GradCheckConfig, GradReport};
use crate::model::{
    channel_mixing, encoder_forward, spatial_mixing, EncoderConfig, MixContext, Modality, ParamStore, TowerInput,
    TowerParams,
};
use crate::shift::{self, DecayParams};
use crate::tensor::Tensor;
use crate::wkv::{self, WkvInputs};

/// Tolerance for single ops and blocks.
pub const OP_REL_TOL: f64 = 1e-5;
/// Tolerance for whole towers.
pub const ENCODER_REL_TOL: f64 = 1e-4;

/// Micro tower used by the block and end-to-end checks.
pub fn micro_config(modality: Modality) -> EncoderConfig {
    let base = match modality {
        Modality::Image => EncoderConfig {
            patch_size: 2,
            image_size: 4,
            ..EncoderConfig::full_image()
        },
        Modality::Text => EncoderConfig {
            vocab_size: 12,
            context_len: 6,
            ..EncoderConfig::full_text()
        },
    };
    EncoderConfig {
        embed_dim: 8,
        layers: 1,
        heads: 2,
        hidden_rate: 1.5,
        shared_dim: 8,
        decay_rank: 2,
        ..base
    }
}

/// Adds uniform noise to every parameter so no path sits at its
/// zero-initialized value.
pub fn scramble(store: &mut ParamStore, seed: u64, amount: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in store.values_mut() {
        for x in t.data_mut() {
            *x += amount * rng.random_range(-1.0..1.0);
        }
    }
}

fn named(mut r: GradReport, name: &str) -> GradReport {
    r.name = String::from(name);
    r
}

/// `sum(op(inputs) ⊙ weights)` with fixed random weights, so ops whose plain
/// sum is constant (norms) still get a meaningful check.
fn weighted<F>(name: &str, inputs: &[Tensor], rel_tol: f64, seed: u64, op: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut probe = Tape::new();
    let pv: Vec<Var> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
    let y = op(&mut probe, &pv)?;
    let out_shape = probe.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = Tensor::randn(out_shape, 1.0, &mut rng);
    let r = grad_check(
        |tape, vars| {
            let y = op(tape, vars)?;
            let wv = tape.constant(w.clone());
            tape.mul(y, wv)
        },
        inputs,
        &GradCheckConfig::with_rel_tol(rel_tol),
    )?;
    Ok(named(r, name))
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

fn op_checks(rng: &mut ChaCha8Rng) -> Result<Vec<GradReport>> {
    let tol = OP_REL_TOL;
    let mut out = Vec::new();
    let x = randn(&[5, 7], rng);
    let w = randn(&[7, 3], rng);
    out.push(weighted("matmul", &[x, w], tol, 1, |t, v| t.matmul(v[0], v[1]))?);

    let x = randn(&[4, 8], rng);
    let (g, b) = (randn(&[8], rng), randn(&[8], rng));
    out.push(weighted("layer_norm", &[x.clone(), g.clone(), b.clone()], tol, 2, |t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-5)
    })?);
    out.push(weighted("group_norm", &[x, g, b], tol, 3, |t, v| t.group_norm(v[0], v[1], v[2], 2, 1e-5))?);

    let v16 = randn(&[16], rng);
    for (name, kind) in [
        ("silu", Unary::Silu),
        ("squared_relu", Unary::SquaredRelu),
        ("tanh", Unary::Tanh),
        ("sigmoid", Unary::Sigmoid),
        ("exp", Unary::Exp),
        ("decay_factor", Unary::DecayFactor),
    ] {
        out.push(weighted(name, core::slice::from_ref(&v16), tol, 4, |t, v| t.unary(v[0], kind))?);
    }

    let (a, bb) = (randn(&[3, 4], rng), randn(&[3, 4], rng));
    out.push(weighted("add", &[a.clone(), bb.clone()], tol, 5, |t, v| t.add(v[0], v[1]))?);
    out.push(weighted("sub", &[a.clone(), bb.clone()], tol, 5, |t, v| t.sub(v[0], v[1]))?);
    out.push(weighted("mul", &[a.clone(), bb], tol, 5, |t, v| t.mul(v[0], v[1]))?);
    let row = randn(&[4], rng);
    out.push(weighted("add_broadcast", &[a.clone(), row.clone()], tol, 6, |t, v| t.add_broadcast(v[0], v[1]))?);
    out.push(weighted("mul_broadcast", &[a.clone(), row], tol, 6, |t, v| t.mul_broadcast(v[0], v[1]))?);
    out.push(weighted("scale", core::slice::from_ref(&a), tol, 7, |t, v| t.scale(v[0], -1.7))?);
    out.push(weighted("add_scalar", core::slice::from_ref(&a), tol, 7, |t, v| t.add_scalar(v[0], 0.3))?);
    out.push(weighted("reshape", &[a], tol, 7, |t, v| t.reshape(v[0], &[2, 6]))?);

    let grid = randn(&[2, 6, 8], rng);
    out.push(weighted("quad_shift", core::slice::from_ref(&grid), tol, 8, |t, v| t.quad_shift(v[0], 2, 3))?);
    let pad: Vec<bool> = (0..12).map(|i| i >= 10).collect();
    out.push(weighted("bi_shift", core::slice::from_ref(&grid), tol, 9, |t, v| t.bi_shift(v[0], Some(&pad)))?);
    let (xs, eta) = (randn(&[2, 6, 8], rng), randn(&[8], rng));
    out.push(weighted("lerp", &[grid.clone(), xs.clone(), eta.clone()], tol, 10, |t, v| {
        t.lerp(v[0], v[1], v[2])
    })?);
    let keep: Vec<bool> = (0..12).map(|i| i % 5 != 0).collect();
    out.push(weighted("row_fill", core::slice::from_ref(&grid), tol, 11, |t, v| t.row_fill(v[0], &keep, -2.0))?);

    let dp = [randn(&[8], rng), randn(&[8, 4], rng).map(|x| 0.3 * x), randn(&[4, 8], rng).map(|x| 0.3 * x)];
    let mut inputs = vec![grid.clone()];
    inputs.extend(dp.iter().cloned());
    out.push(weighted("phi", &inputs, tol, 12, |t, v| {
        let p = DecayParams {
            lambda: v[1],
            m_in: v[2],
            m_out: v[3],
        };
        shift::phi_on(t, v[0], &p)
    })?);
    let mut inputs = vec![grid.map(|x| 0.5 * x), xs.map(|x| 0.5 * x), eta];
    inputs.extend(dp.iter().cloned());
    out.push(weighted("decay_path", &inputs, tol, 13, |t, v| {
        let p = DecayParams {
            lambda: v[3],
            m_in: v[4],
            m_out: v[5],
        };
        Ok(shift::decay_path_on(t, v[0], v[1], v[2], &p, &p)?.1)
    })?);

    let (r, k, vv, wt) = (randn(&[2, 5, 8], rng), randn(&[2, 5, 8], rng), randn(&[2, 5, 8], rng), randn(&[2, 5, 8], rng));
    let u = randn(&[2, 4], rng);
    out.push(weighted("wkv", &[r, k, vv, wt, u], tol, 14, |t, v| t.wkv(v[0], v[1], v[2], v[3], v[4], 2))?);

    let x = randn(&[2, 4, 6], rng);
    let valid: Vec<bool> = (0..8).map(|i| i != 3 && i != 7).collect();
    out.push(weighted("mean_pool", &[x], tol, 15, |t, v| t.mean_pool(v[0], Some(&valid)))?);
    let x = randn(&[3, 5], rng);
    out.push(weighted("l2_normalize", &[x], tol, 16, |t, v| t.l2_normalize(v[0]))?);
    let table = randn(&[10, 4], rng);
    let ids = [1usize, 0, 5, 9, 9, 2];
    out.push(weighted("embedding", &[table], tol, 17, |t, v| t.embedding(v[0], &ids, &[2, 3]))?);
    let x = randn(&[4, 6], rng);
    out.push(weighted("sum", core::slice::from_ref(&x), tol, 18, |t, v| t.sum(v[0]))?);
    out.push(weighted("mean", &[x], tol, 18, |t, v| t.mean(v[0]))?);
    Ok(out)
}

/// Analytic kernel gradients against central differences of the quadratic
/// reference.
fn wkv_kernel_check(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = [1usize, 2, 4, 2];
    let inp = WkvInputs::new(
        randn(&s, &mut rng),
        randn(&s, &mut rng),
        randn(&s, &mut rng),
        randn(&s, &mut rng),
        randn(&[2, 2], &mut rng),
    )?;
    let g_out = randn(&s, &mut rng);
    let grads = wkv::biwkv_backward(&inp, &g_out)?;
    let analytic = [grads.r, grads.k, grads.v, grads.w_tilde, grads.u];
    let numeric = numeric_gradients(
        |p| {
            let i = WkvInputs::new(p[0].clone(), p[1].clone(), p[2].clone(), p[3].clone(), p[4].clone())?;
            let o = wkv::biwkv_naive(&i)?;
            Ok(o.data().iter().zip(g_out.data()).map(|(a, b)| a * b).sum())
        },
        &[inp.r.clone(), inp.k.clone(), inp.v.clone(), inp.w_tilde.clone(), inp.u.clone()],
        1e-5,
    )?;
    Ok(named(
        compare_gradients(&analytic, &numeric, &GradCheckConfig::with_rel_tol(OP_REL_TOL)),
        "biwkv_backward_vs_naive",
    ))
}

fn clip_loss_check(rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let (a, b) = (randn(&[4, 8], rng), randn(&[4, 8], rng));
    let r = grad_check(
        |t, v| {
            let a = t.l2_normalize(v[0])?;
            let b = t.l2_normalize(v[1])?;
            t.clip_loss(a, b, v[2])
        },
        &[a, b, Tensor::scalar(libm::log(1.0 / 0.07))],
        &GradCheckConfig::with_rel_tol(OP_REL_TOL),
    )?;
    Ok(named(r, "clip_loss"))
}

fn block_checks() -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    for (modality, label) in [(Modality::Image, "image"), (Modality::Text, "text")] {
        let cfg = micro_config(modality);
        let (tower, mut store) = TowerParams::init(&cfg, "m", 21)?;
        scramble(&mut store, 22, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (x, ctx) = match modality {
            Modality::Image => (randn(&[2, 4, 8], &mut rng), MixContext::Image { h_tokens: 2, w_tokens: 2 }),
            Modality::Text => (
                randn(&[2, 4, 8], &mut rng),
                MixContext::Text {
                    pad: vec![false, false, false, false, false, false, true, true],
                },
            ),
        };
        let mut inputs = vec![x];
        inputs.extend(store.values().iter().cloned());
        let blk = &tower.blocks[0];
        let name = if label == "image" { "spatial_mixing_image" } else { "spatial_mixing_text" };
        out.push(weighted(name, &inputs, OP_REL_TOL, 24, |t, v| {
            spatial_mixing(t, v[0], &blk.spatial, &v[1..], &ctx, cfg.heads, cfg.ln_eps)
        })?);
        let name = if label == "image" { "channel_mixing_image" } else { "channel_mixing_text" };
        out.push(weighted(name, &inputs, OP_REL_TOL, 25, |t, v| {
            channel_mixing(t, v[0], &blk.channel, &v[1..], &ctx)
        })?);
    }
    Ok(out)
}

fn encoder_checks() -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let imgs = randn(&[2, 4, 4, 3], &mut rng);
    let ids = [1usize, 4, 9, 2, 0, 0, 1, 3, 2, 0, 0, 0];
    for modality in [Modality::Image, Modality::Text] {
        let cfg = micro_config(modality);
        let (tower, mut store) = TowerParams::init(&cfg, "m", 32)?;
        scramble(&mut store, 33, 0.2);
        let name = match modality {
            Modality::Image => "encoder_image",
            Modality::Text => "encoder_text",
        };
        out.push(weighted(name, store.values(), ENCODER_REL_TOL, 34, |t, v| {
            let input = match modality {
                Modality::Image => TowerInput::Image(&imgs),
                Modality::Text => TowerInput::Text { ids: &ids, batch: 2 },
            };
            encoder_forward(t, &tower, &cfg, v, input)
        })?);
    }
    Ok(out)
}

/// Runs every check. Each report carries its own name and tolerance.
pub fn standard_suite(seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = op_checks(&mut rng)?;
    out.push(wkv_kernel_check(seed)?);
    out.push(clip_loss_check(&mut rng)?);
    out.extend(block_checks()?);
    out.extend(encoder_checks()?);
    Ok(out)
}
