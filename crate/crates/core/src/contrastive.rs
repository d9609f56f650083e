//! Symmetric InfoNCE, similarity matrices and retrieval metrics.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 100.0;

/// Image and text embeddings for one batch, rows L2-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEmbeddings {
    pub image: Tensor,
    pub text: Tensor,
}

impl BatchEmbeddings {
    pub fn new(image: Tensor, text: Tensor) -> Result<Self> {
        if image.rank() != 2 || image.shape() != text.shape() {
            return Err(Error::mismatch("batch embeddings", image.shape(), text.shape()));
        }
        for t in [&image, &text] {
            let d = t.last_dim();
            for row in t.data().chunks_exact(d) {
                let n = math::sqrt(math::dot(row, row));
                if (n - 1.0).abs() > 1e-6 {
                    return Err(Error::invalid(format!("embedding row norm {n} is not 1")));
                }
            }
        }
        Ok(Self { image, text })
    }

    pub fn len(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Learnable temperature kept as `log(1/τ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature {
    pub log_inv_tau: f64,
}

impl Default for Temperature {
    fn default() -> Self {
        Self::from_tau(TAU_INIT)
    }
}

impl Temperature {
    pub fn from_tau(tau: f64) -> Self {
        Self {
            log_inv_tau: -math::log(tau),
        }
    }

    /// Effective τ after clamping to `[TAU_MIN, TAU_MAX]`.
    pub fn tau(&self) -> f64 {
        1.0 / logit_scale(self.log_inv_tau).0
    }
}

/// `(1/τ, clamped)` for a raw log inverse temperature.
pub fn logit_scale(log_inv_tau: f64) -> (f64, bool) {
    let (lo, hi) = (-math::log(TAU_MAX), -math::log(TAU_MIN));
    if log_inv_tau < lo {
        (1.0 / TAU_MAX, true)
    } else if log_inv_tau > hi {
        (1.0 / TAU_MIN, true)
    } else {
        (math::exp(log_inv_tau), false)
    }
}

pub fn clamp_log_inv_tau(x: f64) -> f64 {
    x.clamp(-math::log(TAU_MAX), -math::log(TAU_MIN))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipLossGrads {
    pub loss: f64,
    pub d_image: Tensor,
    pub d_text: Tensor,
    pub d_log_inv_tau: f64,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + math::log(xs.map(|x| math::exp(x - m)).sum())
}

/// Sum-form loss
/// `-Σ_i [log softmax_row_i(S/τ)_ii + log softmax_col_i(S/τ)_ii]`,
/// `S = image · textᵀ`, with gradients for both embedding sets and `log(1/τ)`.
pub fn clip_loss_with_grads(image: &Tensor, text: &Tensor, log_inv_tau: f64) -> Result<ClipLossGrads> {
    if image.rank() != 2 || image.shape() != text.shape() {
        return Err(Error::mismatch("clip_loss", image.shape(), text.shape()));
    }
    let (n, d) = (image.shape()[0], image.shape()[1]);
    if n < 2 {
        return Err(Error::invalid("clip_loss needs at least two pairs"));
    }
    let (scale, clamped) = logit_scale(log_inv_tau);
    let sim = similarity_raw(image, text);
    let z: Vec<f64> = sim.iter().map(|s| s * scale).collect();

    let mut loss = 0.0;
    let mut dz = vec![0.0; n * n];
    for i in 0..n {
        let row = &z[i * n..(i + 1) * n];
        let lse = log_sum_exp(row.iter().copied());
        loss += lse - row[i];
        for j in 0..n {
            dz[i * n + j] += math::exp(row[j] - lse);
        }
        dz[i * n + i] -= 1.0;
    }
    for i in 0..n {
        let col = (0..n).map(|j| z[j * n + i]);
        let lse = log_sum_exp(col);
        loss += lse - z[i * n + i];
        for j in 0..n {
            dz[j * n + i] += math::exp(z[j * n + i] - lse);
        }
        dz[i * n + i] -= 1.0;
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("clip_loss"));
    }

    let ds: Vec<f64> = dz.iter().map(|x| x * scale).collect();
    let mut d_image = vec![0.0; n * d];
    math::matmul_acc(&ds, text.data(), &mut d_image, n, n, d);
    let mut d_text = vec![0.0; n * d];
    math::matmul_tn_acc(&ds, image.data(), &mut d_text, n, n, d);
    let d_log_inv_tau = if clamped {
        0.0
    } else {
        dz.iter().zip(&z).map(|(a, b)| a * b).sum()
    };
    Ok(ClipLossGrads {
        loss,
        d_image: Tensor::new([n, d], d_image)?,
        d_text: Tensor::new([n, d], d_text)?,
        d_log_inv_tau,
    })
}

/// Sum-form symmetric InfoNCE.
pub fn clip_loss(e: &BatchEmbeddings, tau: &Temperature) -> Result<f64> {
    Ok(clip_loss_with_grads(&e.image, &e.text, tau.log_inv_tau)?.loss)
}

/// `clip_loss / 2N`, the batch-size-independent form fed to the optimizer.
pub fn clip_loss_mean(e: &BatchEmbeddings, tau: &Temperature) -> Result<f64> {
    Ok(clip_loss(e, tau)? / (2.0 * e.len() as f64))
}

fn similarity_raw(image: &Tensor, text: &Tensor) -> Vec<f64> {
    let (n, d) = (image.shape()[0], image.shape()[1]);
    let m = text.shape()[0];
    let mut s = vec![0.0; n * m];
    math::matmul_nt_acc(image.data(), text.data(), &mut s, n, m, d);
    s
}

/// `S[i][j] = image_i · text_j`.
pub fn similarity_matrix(e: &BatchEmbeddings) -> Tensor {
    let n = e.len();
    Tensor::new([n, n], similarity_raw(&e.image, &e.text)).expect("square similarity")
}

/// Cross similarity of two row sets that may differ in count.
pub fn cross_similarity(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(Error::mismatch("cross_similarity", a.shape(), b.shape()));
    }
    Tensor::new([a.shape()[0], b.shape()[0]], similarity_raw(a, b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrievalDirection {
    /// Rows are image queries ranked over text candidates.
    ImageToText,
    /// Columns are text queries ranked over image candidates.
    TextToImage,
}

/// Fraction of queries whose own pair ranks in the top `k`.
pub fn recall_at_k(s: &Tensor, k: usize, direction: RetrievalDirection) -> Result<f64> {
    let n = square_dim(s)?;
    let ids: Vec<usize> = (0..n).collect();
    recall_at_k_grouped(s, k, direction, &ids)
}

/// Like [`recall_at_k`] but any candidate sharing the query's group id
/// counts as a match (e.g. several records with identical captions).
/// Candidates are ranked by descending score, ties to the lower index.
pub fn recall_at_k_grouped(
    s: &Tensor,
    k: usize,
    direction: RetrievalDirection,
    groups: &[usize],
) -> Result<f64> {
    let n = square_dim(s)?;
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k must be in 1..={n}, got {k}")));
    }
    if groups.len() != n {
        return Err(Error::mismatch("recall groups", s.shape(), &[groups.len()]));
    }
    let score = |q: usize, c: usize| match direction {
        RetrievalDirection::ImageToText => s.data()[q * n + c],
        RetrievalDirection::TextToImage => s.data()[c * n + q],
    };
    let mut order: Vec<usize> = Vec::with_capacity(n);
    let mut hits = 0usize;
    for q in 0..n {
        order.clear();
        order.extend(0..n);
        order.sort_by(|&a, &b| score(q, b).total_cmp(&score(q, a)).then(a.cmp(&b)));
        if order[..k].iter().any(|&c| groups[c] == groups[q]) {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

fn square_dim(s: &Tensor) -> Result<usize> {
    match *s.shape() {
        [a, b] if a == b => Ok(a),
        _ => Err(Error::InvalidShape {
            shape: s.shape().to_vec(),
            reason: "similarity matrix must be square",
        }),
    }
}

/// Substitutes `{label}` into a prompt template.
pub fn fill_template(template: &str, label: &str) -> String {
    template.replace("{label}", label)
}

/// One normalized prototype per label: every template is filled, encoded,
/// averaged and re-normalized. `encode` maps prompts to `[n, D]` rows.
pub fn class_prototypes<F>(labels: &[String], templates: &[String], mut encode: F) -> Result<Tensor>
where
    F: FnMut(&[String]) -> Result<Tensor>,
{
    if templates.is_empty() {
        return Err(Error::invalid("at least one prompt template is required"));
    }
    if labels.is_empty() {
        return Err(Error::invalid("at least one label is required"));
    }
    let mut protos = Vec::new();
    let mut dim = 0;
    for label in labels {
        let prompts: Vec<String> = templates.iter().map(|t| fill_template(t, label)).collect();
        let emb = encode(&prompts)?;
        if emb.rank() != 2 || emb.shape()[0] != prompts.len() {
            return Err(Error::mismatch("prompt embeddings", emb.shape(), &[prompts.len()]));
        }
        dim = emb.shape()[1];
        let mut mean = vec![0.0; dim];
        for row in emb.data().chunks_exact(dim) {
            mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
        }
        let norm = math::sqrt(math::dot(&mean, &mean));
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::NonFinite("class prototype"));
        }
        protos.extend(mean.iter().map(|m| m / norm));
    }
    Tensor::new([labels.len(), dim], protos)
}

/// Index of the most similar prototype for each image (ties to the lower
/// index).
pub fn nearest_prototype(image_emb: &Tensor, prototypes: &Tensor) -> Result<Vec<usize>> {
    let s = cross_similarity(image_emb, prototypes)?;
    let c = prototypes.shape()[0];
    Ok(s
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

pub fn zeroshot_classify<F>(
    image_emb: &Tensor,
    templates: &[String],
    labels: &[String],
    encode: F,
) -> Result<Vec<usize>>
where
    F: FnMut(&[String]) -> Result<Tensor>,
{
    let protos = class_prototypes(labels, templates, encode)?;
    nearest_prototype(image_emb, &protos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{compare_gradients, numeric_gradients, GradCheckConfig};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn normalized(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let mut t = Tensor::randn([n, d], 1.0, rng);
        for row in t.data_mut().chunks_exact_mut(d) {
            let norm = math::sqrt(math::dot(row, row));
            row.iter_mut().for_each(|x| *x /= norm);
        }
        t
    }

    /// Independent evaluation: explicit softmax denominators per row and
    /// per column, no log-sum-exp shortcut.
    fn loop_loss(img: &Tensor, txt: &Tensor, tau: f64) -> f64 {
        let n = img.shape()[0];
        let d = img.shape()[1];
        let s = |i: usize, j: usize| -> f64 {
            (0..d).map(|c| img.data()[i * d + c] * txt.data()[j * d + c]).sum::<f64>() / tau
        };
        let mut total = 0.0;
        for i in 0..n {
            let row: f64 = (0..n).map(|j| libm::exp(s(i, j))).sum();
            let col: f64 = (0..n).map(|j| libm::exp(s(j, i))).sum();
            total -= libm::log(libm::exp(s(i, i)) / row) + libm::log(libm::exp(s(i, i)) / col);
        }
        total
    }

    #[test]
    fn identical_embeddings_give_2n_log_n() {
        let row = [0.6, 0.8];
        for n in [2usize, 3, 5] {
            let t = Tensor::new([n, 2], row.repeat(n)).unwrap();
            let e = BatchEmbeddings::new(t.clone(), t).unwrap();
            let l = clip_loss(&e, &Temperature::default()).unwrap();
            let expect = 2.0 * n as f64 * libm::log(n as f64);
            assert!((l - expect).abs() < 1e-9, "n={n}: {l} vs {expect}");
        }
    }

    #[test]
    fn perfect_alignment_at_small_tau_tends_to_zero() {
        let eye = Tensor::from_fn([4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
        let e = BatchEmbeddings::new(eye.clone(), eye).unwrap();
        let mut last = f64::INFINITY;
        for tau in [1.0, 0.3, 0.1, 0.05, TAU_MIN] {
            let l = clip_loss(&e, &Temperature::from_tau(tau)).unwrap();
            assert!(l >= 0.0 && l < last, "tau={tau}: {l}");
            last = l;
        }
        // 8·3·exp(-100) is below f64 resolution next to the logit 100
        assert!(last < 1e-30, "{last}");
    }

    #[test]
    fn needs_two_pairs() {
        let t = Tensor::new([1, 2], vec![1.0, 0.0]).unwrap();
        let e = BatchEmbeddings::new(t.clone(), t).unwrap();
        assert!(clip_loss(&e, &Temperature::default()).is_err());
    }

    #[test]
    fn matches_loop_oracle_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let img = normalized(4, 8, &mut rng);
        let txt = normalized(4, 8, &mut rng);
        let theta = Temperature::default().log_inv_tau;
        let g = clip_loss_with_grads(&img, &txt, theta).unwrap();
        assert!((g.loss - loop_loss(&img, &txt, 0.07)).abs() < 1e-12);

        let numeric = numeric_gradients(
            |p| Ok(clip_loss_with_grads(&p[0], &p[1], p[2].data()[0])?.loss),
            &[img, txt, Tensor::scalar(theta)],
            1e-6,
        )
        .unwrap();
        let analytic = [g.d_image, g.d_text, Tensor::scalar(g.d_log_inv_tau)];
        let rep = compare_gradients(&analytic, &numeric, &GradCheckConfig::with_rel_tol(1e-5));
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn temperature_is_clamped() {
        assert!((Temperature::default().tau() - 0.07).abs() < 1e-15);
        assert_eq!(Temperature { log_inv_tau: 50.0 }.tau(), TAU_MIN);
        assert_eq!(Temperature { log_inv_tau: -50.0 }.tau(), TAU_MAX);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let img = normalized(3, 4, &mut rng);
        let txt = normalized(3, 4, &mut rng);
        assert_eq!(clip_loss_with_grads(&img, &txt, 50.0).unwrap().d_log_inv_tau, 0.0);
    }

    #[test]
    fn similarity_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let a = normalized(5, 6, &mut rng);
        let s = similarity_matrix(&BatchEmbeddings::new(a.clone(), a).unwrap());
        for i in 0..5 {
            assert!((s.data()[i * 6] - 1.0).abs() < 1e-12);
        }
        let eye = Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let s = similarity_matrix(&BatchEmbeddings::new(eye.clone(), eye).unwrap());
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(s.data()[i * 3 + j], 0.0);
                }
            }
        }
    }

    #[test]
    fn recall_identity_and_antidiagonal() {
        use RetrievalDirection::*;
        let n = 5;
        let eye = Tensor::from_fn([n, n], |i| if i % (n + 1) == 0 { 1.0 } else { 0.0 });
        assert_eq!(recall_at_k(&eye, 1, ImageToText).unwrap(), 1.0);
        assert_eq!(recall_at_k(&eye, 1, TextToImage).unwrap(), 1.0);
        let anti = Tensor::from_fn([n, n], |i| if i / n + i % n == n - 1 { 1.0 } else { 0.0 });
        // the centre row of an odd anti-diagonal sits on the diagonal
        assert_eq!(recall_at_k(&anti, 1, ImageToText).unwrap(), 1.0 / n as f64);
        let anti4 = Tensor::from_fn([4, 4], |i| if i / 4 + i % 4 == 3 { 1.0 } else { 0.0 });
        assert_eq!(recall_at_k(&anti4, 1, ImageToText).unwrap(), 0.0);
        assert_eq!(recall_at_k(&anti4, 1, TextToImage).unwrap(), 0.0);
        assert_eq!(recall_at_k(&anti4, 4, TextToImage).unwrap(), 1.0);
        assert!(recall_at_k(&anti4, 0, TextToImage).is_err());
        assert!(recall_at_k(&anti4, 5, TextToImage).is_err());
    }

    #[test]
    fn recall_matches_brute_force_rank() {
        use RetrievalDirection::*;
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let s = Tensor::randn([6, 6], 1.0, &mut rng);
        for k in 1..=6 {
            for dir in [ImageToText, TextToImage] {
                let mut hits = 0;
                for q in 0..6 {
                    let val = |c: usize| match dir {
                        ImageToText => s.data()[q * 6 + c],
                        TextToImage => s.data()[c * 6 + q],
                    };
                    let better = (0..6).filter(|&c| val(c) > val(q)).count();
                    if better < k {
                        hits += 1;
                    }
                }
                assert_eq!(recall_at_k(&s, k, dir).unwrap(), hits as f64 / 6.0);
            }
        }
    }

    #[test]
    fn grouped_recall_accepts_any_group_member() {
        // queries 0 and 1 share a caption; image 1 prefers text 0
        let s = Tensor::new([2, 2], vec![1.0, 0.5, 0.9, 0.2]).unwrap();
        let plain = recall_at_k(&s, 1, RetrievalDirection::ImageToText).unwrap();
        let grouped = recall_at_k_grouped(&s, 1, RetrievalDirection::ImageToText, &[0, 0]).unwrap();
        assert_eq!(plain, 0.5);
        assert_eq!(grouped, 1.0);
    }

    fn encoder_from(table: Vec<(String, Vec<f64>)>) -> impl FnMut(&[String]) -> Result<Tensor> {
        move |prompts: &[String]| {
            let d = table[0].1.len();
            let mut out = Vec::new();
            for p in prompts {
                let row = table
                    .iter()
                    .find(|(k, _)| k == p)
                    .map(|(_, v)| v.clone())
                    .ok_or_else(|| Error::invalid("unknown prompt"))?;
                out.extend(row);
            }
            Tensor::new([prompts.len(), d], out)
        }
    }

    #[test]
    fn zeroshot_examples() {
        let templates = vec![String::from("a photo of a {label}."), String::from("a {label} pattern.")];
        // one class: always predicted
        let enc = encoder_from(vec![
            ("a photo of a cat.".into(), vec![1.0, 0.0]),
            ("a cat pattern.".into(), vec![0.0, 1.0]),
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let imgs = normalized(7, 2, &mut rng);
        let p = zeroshot_classify(&imgs, &templates, &["cat".into()], enc).unwrap();
        assert!(p.iter().all(|&c| c == 0));

        // two orthogonal prototypes vs brute-force nearest prototype
        let enc = encoder_from(vec![
            ("a photo of a x.".into(), vec![1.0, 0.0]),
            ("a x pattern.".into(), vec![1.0, 0.0]),
            ("a photo of a y.".into(), vec![0.0, 1.0]),
            ("a y pattern.".into(), vec![0.0, 1.0]),
        ]);
        let p = zeroshot_classify(&imgs, &templates, &["x".into(), "y".into()], enc).unwrap();
        for (i, row) in imgs.data().chunks(2).enumerate() {
            assert_eq!(p[i], if row[1] > row[0] { 1 } else { 0 });
        }

        let err = zeroshot_classify(&imgs, &[], &["x".into()], |_: &[String]| Ok(Tensor::zeros([1, 2])));
        assert!(err.is_err());
    }

    #[test]
    fn prototypes_equal_to_images_classify_perfectly() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let imgs = normalized(4, 16, &mut rng);
        let labels: Vec<String> = (0..4).map(|i| format!("c{i}")).collect();
        let table = labels
            .iter()
            .zip(imgs.data().chunks(16))
            .map(|(l, r)| (format!("{l}"), r.to_vec()))
            .collect();
        let p = zeroshot_classify(&imgs, &["{label}".into()], &labels, encoder_from(table)).unwrap();
        assert_eq!(p, vec![0, 1, 2, 3]);
    }

    proptest! {
        #[test]
        fn loss_invariances(seed in 0u64..10_000, n in 2usize..6, shift in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = normalized(n, 4, &mut rng);
            let txt = normalized(n, 4, &mut rng);
            let e = BatchEmbeddings::new(img.clone(), txt.clone()).unwrap();
            let tau = Temperature::default();
            let l = clip_loss(&e, &tau).unwrap();
            prop_assert!(l > 0.0);

            let swapped = BatchEmbeddings::new(txt.clone(), img.clone()).unwrap();
            prop_assert!((clip_loss(&swapped, &tau).unwrap() - l).abs() < 1e-9);

            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let permute = |t: &Tensor| {
                let rows = t.unstack();
                Tensor::stack(&perm.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>()).unwrap()
            };
            let pe = BatchEmbeddings::new(permute(&img), permute(&txt)).unwrap();
            prop_assert!((clip_loss(&pe, &tau).unwrap() - l).abs() < 1e-9);

            // appending a constant coordinate to both sides adds `shift` to
            // every entry of S/τ once the rows are re-normalized
            let c = libm::sqrt(shift.abs() * tau.tau());
            let sign = if shift < 0.0 { -1.0 } else { 1.0 };
            let widen = |t: &Tensor, v: f64| {
                let rows: Vec<Tensor> = t.unstack().into_iter().map(|r| {
                    let mut d = r.into_data();
                    d.push(v);
                    Tensor::new([5], d).unwrap()
                }).collect();
                Tensor::stack(&rows).unwrap()
            };
            let lhs = clip_loss_with_grads(&widen(&img, c), &widen(&txt, sign * c), tau.log_inv_tau).unwrap().loss;
            prop_assert!((lhs - l).abs() < 1e-9, "{} vs {}", lhs, l);
        }

        #[test]
        fn similarity_is_bounded(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = BatchEmbeddings::new(normalized(5, 3, &mut rng), normalized(5, 3, &mut rng)).unwrap();
            let s = similarity_matrix(&e);
            prop_assert!(s.data().iter().all(|&x| (-1.0 - 1e-12..=1.0 + 1e-12).contains(&x)));
        }

        #[test]
        fn recall_invariant_to_increasing_transform(seed in 0u64..10_000, k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = Tensor::randn([5, 5], 1.0, &mut rng);
            let t = s.map(|x| libm::exp(2.0 * x) + 3.0);
            for dir in [RetrievalDirection::ImageToText, RetrievalDirection::TextToImage] {
                prop_assert_eq!(recall_at_k(&s, k, dir).unwrap(), recall_at_k(&t, k, dir).unwrap());
            }
        }
    }
}
