//! Central finite-difference verification of tape gradients.

use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    pub rel_tol: f64,
    /// Coordinates whose gradient magnitude is below this are judged on
    /// absolute error alone.
    pub abs_tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-6,
            abs_tol: 1e-8,
        }
    }
}

impl GradCheckConfig {
    pub fn with_rel_tol(rel_tol: f64) -> Self {
        Self {
            rel_tol,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub coordinates: usize,
    pub rel_tol: f64,
    pub passed: bool,
}

/// Gradients of `sum(f(inputs))` from the tape compared with central
/// differences of the same function.
pub fn grad_check<F>(f: F, inputs: &[Tensor], cfg: &GradCheckConfig) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let total = tape.sum(out)?;
    tape.backward(total)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_tensor(v)).collect();

    let numeric = numeric_gradients(
        |xs| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
            let out = f(&mut tape, &vars)?;
            Ok(tape.value(out).data().iter().sum())
        },
        inputs,
        cfg.step,
    )?;
    Ok(compare_gradients(&analytic, &numeric, cfg))
}

/// `(f(x + h·e_i) - f(x - h·e_i)) / 2h` for every coordinate of every input.
pub fn numeric_gradients<F>(f: F, inputs: &[Tensor], step: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let mut xs = inputs.to_vec();
    let mut grads = Vec::with_capacity(xs.len());
    for i in 0..xs.len() {
        let mut g = Tensor::zeros(xs[i].shape().to_vec());
        for j in 0..xs[i].len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + step;
            let plus = f(&xs)?;
            xs[i].data_mut()[j] = orig - step;
            let minus = f(&xs)?;
            xs[i].data_mut()[j] = orig;
            let d = (plus - minus) / (2.0 * step);
            if !d.is_finite() {
                return Err(Error::NonFinite("numeric_gradients"));
            }
            g.data_mut()[j] = d;
        }
        grads.push(g);
    }
    Ok(grads)
}

pub fn compare_gradients(analytic: &[Tensor], numeric: &[Tensor], cfg: &GradCheckConfig) -> GradReport {
    let mut max_abs: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    let mut coordinates = 0;
    let mut passed = analytic.len() == numeric.len();
    for (a, n) in analytic.iter().zip(numeric) {
        if a.shape() != n.shape() {
            passed = false;
            continue;
        }
        for (&x, &y) in a.data().iter().zip(n.data()) {
            coordinates += 1;
            let abs = (x - y).abs();
            let scale = x.abs().max(y.abs());
            max_abs = max_abs.max(abs);
            if abs <= cfg.abs_tol {
                continue;
            }
            let rel = abs / scale;
            max_rel = max_rel.max(rel);
            if !(rel <= cfg.rel_tol) {
                passed = false;
            }
        }
    }
    GradReport {
        name: String::new(),
        max_abs_err: max_abs,
        max_rel_err: max_rel,
        coordinates,
        rel_tol: cfg.rel_tol,
        passed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_fn([3, 2], |i| i as f64 * 0.3 - 1.0);
        let r = grad_check(|_, v| Ok(v[0]), &[x], &GradCheckConfig::default()).unwrap();
        assert!(r.passed);
        assert!(r.max_abs_err < 1e-9);
    }

    #[test]
    fn matmul_sum_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::randn([4, 6], 1.0, &mut rng);
        let w = Tensor::randn([6, 3], 1.0, &mut rng);
        let r = grad_check(|t, v| t.matmul(v[0], v[1]), &[x, w], &GradCheckConfig::default()).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn corrupted_gradient_fails() {
        let x = Tensor::from_fn([4], |i| i as f64);
        let numeric = vec![Tensor::ones([4])];
        let mut bad = Tensor::ones([4]);
        bad.data_mut()[2] += 0.1;
        let r = compare_gradients(&[bad], &numeric, &GradCheckConfig::default());
        assert!(!r.passed);
        assert!(compare_gradients(&[Tensor::ones([4])], &numeric, &GradCheckConfig::default()).passed);
        let _ = x;
    }

    #[test]
    fn elementwise_ops_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = Tensor::randn([16], 1.0, &mut rng);
        let wts = Tensor::randn([16], 1.0, &mut rng);
        let cfg = GradCheckConfig::with_rel_tol(1e-6);
        type UnaryFn = fn(&mut Tape, Var) -> Result<Var>;
        let ops: [(&str, UnaryFn); 5] = [
            ("silu", |t, v| t.silu(v)),
            ("squared_relu", |t, v| t.squared_relu(v)),
            ("tanh", |t, v| t.tanh(v)),
            ("sigmoid", |t, v| t.sigmoid(v)),
            ("exp", |t, v| t.exp(v)),
        ];
        for (name, op) in ops {
            let w = wts.clone();
            let r = grad_check(
                move |t, v| {
                    let y = op(t, v[0])?;
                    let w = t.constant(w.clone());
                    t.mul(y, w)
                },
                &[x.clone()],
                &cfg,
            )
            .unwrap();
            assert!(r.passed, "{name}: {r:?}");
        }
    }

    #[test]
    fn layer_norm_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = Tensor::randn([4, 8], 1.0, &mut rng);
        let g = Tensor::randn([8], 1.0, &mut rng);
        let b = Tensor::randn([8], 1.0, &mut rng);
        let wts = Tensor::randn([4, 8], 1.0, &mut rng);
        for groups in [1, 2, 4] {
            let w = wts.clone();
            let r = grad_check(
                move |t, v| {
                    let y = t.group_norm(v[0], v[1], v[2], groups, 1e-5)?;
                    let w = t.constant(w.clone());
                    t.mul(y, w)
                },
                &[x.clone(), g.clone(), b.clone()],
                &GradCheckConfig::with_rel_tol(1e-6),
            )
            .unwrap();
            assert!(r.passed, "groups={groups}: {r:?}");
        }
    }

    #[test]
    fn backward_is_linear() {
        // backward(a·f + b·g) == a·backward(f) + b·backward(g)
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let x = Tensor::randn([3, 4], 1.0, &mut rng);
        let w = Tensor::randn([4, 2], 1.0, &mut rng);
        let (a, b) = (1.7, -0.4);
        let grad_of = |ca: f64, cb: f64| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let wv = t.leaf(w.clone());
            let f = t.matmul(xv, wv).unwrap();
            let f = t.tanh(f).unwrap();
            let f = t.sum(f).unwrap();
            let g = t.silu(xv).unwrap();
            let g = t.sum(g).unwrap();
            let fa = t.scale(f, ca).unwrap();
            let gb = t.scale(g, cb).unwrap();
            let total = t.add(fa, gb).unwrap();
            t.backward(total).unwrap();
            (t.grad_tensor(xv), t.grad_tensor(wv))
        };
        let (cx, cw) = grad_of(a, b);
        let (fx, fw) = grad_of(1.0, 0.0);
        let (gx, gw) = grad_of(0.0, 1.0);
        let lx = fx.zip_map(&gx, |p, q| a * p + b * q).unwrap();
        let lw = fw.zip_map(&gw, |p, q| a * p + b * q).unwrap();
        assert!(cx.max_abs_diff(&lx).unwrap() < 1e-12);
        assert!(cw.max_abs_diff(&lw).unwrap() < 1e-12);
    }
}
