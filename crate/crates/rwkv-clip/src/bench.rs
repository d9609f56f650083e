//! Wall-clock scaling of the linear scan against the quadratic reference.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use rwkv_clip_core::wkv::{biwkv_naive, biwkv_scan, WkvInputs};
use rwkv_clip_core::Tensor;

use crate::error::Result;

pub const CSV_HEADER: &str = "kernel,T,d,H,median_ns";
/// Doubling ratio above which growth is no longer linear, and at or above
/// which the reference counts as quadratic.
pub const RATIO_LIMIT: f64 = 3.0;
/// Naive ratios are only judged from this length up.
pub const NAIVE_JUDGED_FROM: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub d: usize,
    pub heads: usize,
    pub scan_reps: usize,
    pub naive_reps: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![512, 1024, 2048, 4096],
            d: 8,
            heads: 1,
            scan_reps: 21,
            naive_reps: 3,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Scan,
    Naive,
}

impl Kernel {
    pub fn name(self) -> &'static str {
        match self {
            Kernel::Scan => "scan",
            Kernel::Naive => "naive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub kernel: Kernel,
    pub t: usize,
    pub d: usize,
    pub heads: usize,
    pub median_ns: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    /// time(2T)/time(T) for consecutive lengths, keyed by the larger T.
    pub scan_ratios: Vec<(usize, f64)>,
    pub naive_ratios: Vec<(usize, f64)>,
    pub scan_linear: bool,
    pub naive_superlinear: bool,
}

impl Verdict {
    pub fn passed(&self) -> bool {
        self.scan_linear && self.naive_superlinear
    }
}

fn inputs(t: usize, cfg: &BenchConfig) -> Result<WkvInputs> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ t as u64);
    let s = [1, cfg.heads, t, cfg.d];
    Ok(WkvInputs::new(
        Tensor::randn(s, 1.0, &mut rng),
        Tensor::randn(s, 1.0, &mut rng),
        Tensor::randn(s, 1.0, &mut rng),
        Tensor::randn(s, 1.0, &mut rng),
        Tensor::randn([cfg.heads, cfg.d], 1.0, &mut rng),
    )?)
}

fn median_ns(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<u128> {
    f()?; // warm-up
    let mut xs = Vec::with_capacity(reps);
    for _ in 0..reps.max(1) {
        let t0 = Instant::now();
        f()?;
        xs.push(t0.elapsed().as_nanos());
    }
    xs.sort_unstable();
    Ok(xs[xs.len() / 2])
}

pub fn run(cfg: &BenchConfig) -> Result<Vec<Timing>> {
    let mut out = Vec::new();
    for kernel in [Kernel::Scan, Kernel::Naive] {
        for &t in &cfg.lengths {
            let inp = inputs(t, cfg)?;
            let reps = match kernel {
                Kernel::Scan => cfg.scan_reps,
                Kernel::Naive => cfg.naive_reps,
            };
            let median_ns = median_ns(reps, || {
                let y = match kernel {
                    Kernel::Scan => biwkv_scan(&inp)?,
                    Kernel::Naive => biwkv_naive(&inp)?,
                };
                std::hint::black_box(y);
                Ok(())
            })?;
            out.push(Timing {
                kernel,
                t,
                d: cfg.d,
                heads: cfg.heads,
                median_ns,
            });
        }
    }
    Ok(out)
}

pub fn to_csv(rows: &[Timing]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.kernel.name(), r.t, r.d, r.heads, r.median_ns));
    }
    s
}

fn ratios(rows: &[Timing], kernel: Kernel) -> Vec<(usize, f64)> {
    let mut pts: Vec<(usize, f64)> = rows
        .iter()
        .filter(|r| r.kernel == kernel)
        .map(|r| (r.t, r.median_ns as f64))
        .collect();
    pts.sort_by_key(|p| p.0);
    pts.windows(2)
        .filter(|w| w[1].0 == 2 * w[0].0)
        .map(|w| (w[1].0, w[1].1 / w[0].1.max(1.0)))
        .collect()
}

pub fn verdict(rows: &[Timing]) -> Verdict {
    let scan_ratios = ratios(rows, Kernel::Scan);
    let naive_ratios = ratios(rows, Kernel::Naive);
    let judged: Vec<_> = naive_ratios.iter().filter(|(t, _)| *t >= NAIVE_JUDGED_FROM).collect();
    Verdict {
        scan_linear: !scan_ratios.is_empty() && scan_ratios.iter().all(|&(_, r)| r <= RATIO_LIMIT),
        naive_superlinear: !judged.is_empty() && judged.iter().all(|&&(_, r)| r >= RATIO_LIMIT),
        scan_ratios,
        naive_ratios,
    }
}
