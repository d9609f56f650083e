//! AdamW, the one-cycle schedule and global gradient clipping.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub pct_start: f64,
    pub seed: u64,
    pub div_factor: f64,
    pub final_div: f64,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-3,
            betas: [0.9, 0.98],
            eps: 1e-6,
            weight_decay: 0.2,
            batch_size: 64,
            epochs: 30,
            pct_start: 0.1,
            seed: 7,
            div_factor: 25.0,
            final_div: 1e4,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("train config: {m}")));
        if !(self.pct_start > 0.0 && self.pct_start < 1.0) {
            return bad("pct_start must be in (0, 1)");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.lr_max >= 0.0 && self.lr_max.is_finite()) {
            return bad("lr_max must be finite and non-negative");
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad("betas must be in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be positive and weight_decay non-negative");
        }
        if !(self.div_factor > 0.0 && self.final_div > 0.0) {
            return bad("div factors must be positive");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }
}

/// Step index where warmup ends and the peak rate is used.
pub fn warmup_steps(total_steps: usize, cfg: &TrainConfig) -> usize {
    let s1 = libm::round(cfg.pct_start * total_steps as f64) as usize;
    s1.min(total_steps.saturating_sub(1))
}

/// Linear warmup from `lr_max/div_factor` to `lr_max` over `[0, s1)`, then
/// cosine annealing down to `lr_max/(div_factor*final_div)` at the last step.
pub fn onecycle_lr(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::OutOfRange {
            what: "schedule step",
            index: step,
            size: total_steps,
        });
    }
    let start = cfg.lr_max / cfg.div_factor;
    let end = start / cfg.final_div;
    let s1 = warmup_steps(total_steps, cfg);
    if step < s1 {
        return Ok(start + (cfg.lr_max - start) * step as f64 / s1 as f64);
    }
    let span = total_steps - 1 - s1;
    if step == s1 || span == 0 {
        return Ok(cfg.lr_max);
    }
    let p = (step - s1) as f64 / span as f64;
    let cos = 0.5 * (1.0 + libm::cos(core::f64::consts::PI * p));
    Ok(end + (cfg.lr_max - end) * cos)
}

/// First and second moments for each parameter tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected AdamW update with decoupled weight decay
/// `p -= lr * (m̂ / (sqrt(v̂) + eps) + wd * p)`. Parameters flagged in
/// `decay_exempt` skip the decay term.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    decay_exempt: &[bool],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || decay_exempt.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::invalid("adamw: parameter, gradient and state counts differ"));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::mismatch("adamw", p.shape(), g.shape()));
        }
    }
    state.t += 1;
    let [b1, b2] = cfg.betas;
    let c1 = 1.0 - libm::pow(b1, state.t as f64);
    let c2 = 1.0 - libm::pow(b2, state.t as f64);
    for i in 0..params.len() {
        let wd = if decay_exempt[i] { 0.0 } else { cfg.weight_decay };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (p, &g)) in params[i].data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *p -= lr * (mh / (math::sqrt(vh) + cfg.eps) + wd * *p);
        }
        if !params[i].is_finite() {
            return Err(Error::NonFinite("adamw_step"));
        }
    }
    Ok(())
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    math::sqrt(grads.iter().map(|g| math::dot(g.data(), g.data())).sum())
}

/// Rescales all gradients so their joint norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_grad_no_decay_is_a_no_op() {
        let mut p = vec![Tensor::from_fn([3, 2], |i| i as f64 - 2.5)];
        let before = p.clone();
        let g = vec![Tensor::zeros([3, 2])];
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut st = AdamState::new(&p);
        for _ in 0..3 {
            adamw_step(&mut p, &g, &[false], &mut st, 0.1, &cfg).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn single_step_hand_value() {
        let mut p = vec![Tensor::scalar(1.0)];
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut st = AdamState::new(&p);
        adamw_step(&mut p, &[Tensor::scalar(1.0)], &[false], &mut st, 0.1, &cfg).unwrap();
        let expect = 1.0 - 0.1 / (1.0 + 1e-6);
        assert!((p[0].data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn descends_a_quadratic() {
        // f(p) = Σ (p - c)²
        let c = [3.0, -1.0, 0.5];
        let f = |p: &Tensor| p.data().iter().zip(c).map(|(x, c)| (x - c) * (x - c)).sum::<f64>();
        let mut p = vec![Tensor::zeros([3])];
        let mut st = AdamState::new(&p);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut last = f(&p[0]);
        for _ in 0..10 {
            let g = Tensor::new([3], p[0].data().iter().zip(c).map(|(x, c)| 2.0 * (x - c)).collect()).unwrap();
            adamw_step(&mut p, &[g], &[false], &mut st, 0.1, &cfg).unwrap();
            let now = f(&p[0]);
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn decay_alone_is_geometric_and_respects_exemptions() {
        let mut p = vec![Tensor::full([2], 2.0), Tensor::full([2], 2.0)];
        let g = vec![Tensor::zeros([2]), Tensor::zeros([2])];
        let cfg = TrainConfig::default();
        let mut st = AdamState::new(&p);
        let lr = 1e-3;
        for k in 1..=5 {
            adamw_step(&mut p, &g, &[false, true], &mut st, lr, &cfg).unwrap();
            let expect = 2.0 * libm::pow(1.0 - lr * cfg.weight_decay, k as f64);
            assert!((p[0].data()[0] - expect).abs() < 1e-14);
            assert_eq!(p[1].data()[0], 2.0);
        }
    }

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        assert!((onecycle_lr(0, 1000, &cfg).unwrap() - 4e-5).abs() < 1e-18);
        let s1 = warmup_steps(1000, &cfg);
        assert_eq!(s1, 100);
        assert_eq!(onecycle_lr(s1, 1000, &cfg).unwrap(), cfg.lr_max);
        assert!(onecycle_lr(1000, 1000, &cfg).is_err());
    }

    #[test]
    fn schedule_sweep_is_unimodal() {
        let cfg = TrainConfig::default();
        let total = 1000;
        let lrs: Vec<f64> = (0..total).map(|s| onecycle_lr(s, total, &cfg).unwrap()).collect();
        let s1 = warmup_steps(total, &cfg);
        for s in 1..total {
            if s <= s1 {
                assert!(lrs[s] > lrs[s - 1], "step {s}");
            } else {
                assert!(lrs[s] < lrs[s - 1], "step {s}");
            }
        }
        assert!(lrs[total - 1] < lrs[0]);
        assert!((lrs[total - 1] - cfg.lr_max / 25.0 / 1e4).abs() < 1e-20);
        let peaks = lrs.iter().filter(|&&l| l == cfg.lr_max).count();
        assert_eq!(peaks, 1);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { pct_start: 0.0, ..TrainConfig::default() },
            TrainConfig { pct_start: 1.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 1, ..TrainConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    proptest! {
        #[test]
        fn clipped_norm_is_bounded(xs in proptest::collection::vec(-100.0f64..100.0, 1..40), max in 0.01f64..5.0) {
            let n = xs.len();
            let mut g = vec![Tensor::new([n], xs.clone()).unwrap(), Tensor::new([n], xs).unwrap()];
            let before = global_norm(&g);
            let reported = clip_grad_norm(&mut g, max);
            prop_assert_eq!(reported, before);
            prop_assert!(global_norm(&g) <= max + 1e-9);
            if before <= max {
                prop_assert_eq!(global_norm(&g), before);
            }
        }

        #[test]
        fn schedule_peak_is_lr_max(total in 2usize..3000) {
            let cfg = TrainConfig::default();
            let max = (0..total).map(|s| onecycle_lr(s, total, &cfg).unwrap()).fold(0.0, f64::max);
            prop_assert_eq!(max, cfg.lr_max);
        }
    }
}
