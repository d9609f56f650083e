//! Paired records, the three-way text sampler, the byte tokenizer, the
//! procedural toy corpus and the description-fusion prompt.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const BYTE_OFFSET: usize = 3;
pub const BYTE_VOCAB: usize = 256 + BYTE_OFFSET;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Stripes,
    Checker,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Stripes, Shape::Checker];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Stripes => "stripes",
            Shape::Checker => "checker",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    White,
    Orange,
    Black,
}

impl Color {
    /// The eight fill colours of the toy corpus.
    pub const FILLS: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Cyan,
        Color::Magenta,
        Color::White,
        Color::Orange,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
            Color::White => "white",
            Color::Orange => "orange",
            Color::Black => "black",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [255, 0, 0],
            Color::Green => [0, 255, 0],
            Color::Blue => [0, 0, 255],
            Color::Yellow => [255, 255, 0],
            Color::Cyan => [0, 255, 255],
            Color::Magenta => [255, 0, 255],
            Color::White => [255, 255, 255],
            Color::Orange => [255, 128, 0],
            Color::Black => [0, 0, 0],
        }
    }
}

/// Everything needed to rasterize one toy image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    /// Drives position, size and phase jitter.
    pub seed: u64,
    pub size: usize,
    pub shape: Shape,
    pub color: Color,
    pub background: Color,
}

impl ToySpec {
    /// Class index in `0..32`: colour-major within shape.
    pub fn class_index(&self) -> Option<usize> {
        let s = Shape::ALL.iter().position(|&x| x == self.shape)?;
        let c = Color::FILLS.iter().position(|&x| x == self.color)?;
        Some(s * Color::FILLS.len() + c)
    }

    pub fn for_class(class: usize, seed: u64, size: usize) -> Self {
        Self {
            seed,
            size,
            shape: Shape::ALL[(class / Color::FILLS.len()) % Shape::ALL.len()],
            color: Color::FILLS[class % Color::FILLS.len()],
            background: Color::Black,
        }
    }
}

pub const TOY_CLASSES: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    /// Path to an image file, resolved by the IO layer.
    Path(String),
    Toy(ToySpec),
}

/// One image with its raw text, optional synthetic caption, optional
/// fused description and detection tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairedRecord {
    pub id: String,
    pub image_source: ImageSource,
    pub raw_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic_caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_description: Option<String>,
    #[serde(default)]
    pub tags: Vec<String>,
}

impl PairedRecord {
    pub fn validate(&self) -> Result<()> {
        if self.raw_text.is_empty() {
            return Err(Error::invalid(format!("record {}: raw_text is empty", self.id)));
        }
        Ok(())
    }

    /// Present members of `[raw, synthetic, generated]` in that order.
    pub fn variants(&self) -> Vec<(TextKind, &str)> {
        let mut v = Vec::with_capacity(3);
        if !self.raw_text.is_empty() {
            v.push((TextKind::Raw, self.raw_text.as_str()));
        }
        if let Some(s) = &self.synthetic_caption {
            v.push((TextKind::Synthetic, s.as_str()));
        }
        if let Some(s) = &self.generated_description {
            v.push((TextKind::Generated, s.as_str()));
        }
        v
    }

    pub fn text(&self, kind: TextKind) -> Option<&str> {
        match kind {
            TextKind::Raw => Some(self.raw_text.as_str()).filter(|s| !s.is_empty()),
            TextKind::Synthetic => self.synthetic_caption.as_deref(),
            TextKind::Generated => self.generated_description.as_deref(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextKind {
    Raw,
    Synthetic,
    Generated,
}

impl TextKind {
    pub const ALL: [TextKind; 3] = [TextKind::Raw, TextKind::Synthetic, TextKind::Generated];
}

/// Uniform draw over the present text variants.
pub fn sample_text_with<'a, R: Rng + ?Sized>(rec: &'a PairedRecord, rng: &mut R) -> Result<&'a str> {
    let v = rec.variants();
    if v.is_empty() {
        return Err(Error::invalid(format!("record {} has no text", rec.id)));
    }
    Ok(v[rng.random_range(0..v.len())].1)
}

pub fn sample_text(rec: &PairedRecord, seed: u64) -> Result<&str> {
    sample_text_with(rec, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// BOS, UTF-8 bytes offset by 3, EOS, then right padding with 0. Long inputs
/// are cut so EOS stays the last token.
pub fn tokenize(s: &str, context_len: usize) -> Result<Vec<usize>> {
    if context_len < 2 {
        return Err(Error::invalid("context_len must be at least 2"));
    }
    let bytes = s.as_bytes();
    let keep = bytes.len().min(context_len - 2);
    let mut out = Vec::with_capacity(context_len);
    out.push(BOS);
    out.extend(bytes[..keep].iter().map(|&b| b as usize + BYTE_OFFSET));
    out.push(EOS);
    out.resize(context_len, PAD);
    Ok(out)
}

/// Inverse of [`tokenize`]: bytes between BOS and the first EOS or pad.
pub fn detokenize(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids
        .iter()
        .skip_while(|&&i| i == BOS)
        .take_while(|&&i| i != EOS && i != PAD)
        .filter(|&&i| (BYTE_OFFSET..BYTE_VOCAB).contains(&i))
        .map(|&i| (i - BYTE_OFFSET) as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Rasterizes a toy spec to `[size, size, 3]` with values in `[0, 1]`.
/// Every value is `k / 255` for an integer `k`, so 8-bit files hold it
/// exactly.
pub fn render_toy(spec: &ToySpec) -> Result<Tensor> {
    let s = spec.size;
    if s < 8 {
        return Err(Error::invalid("toy canvas must be at least 8 pixels"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sf = s as f64;
    let inside: alloc::boxed::Box<dyn Fn(usize, usize) -> bool> = match spec.shape {
        Shape::Circle => {
            let r = sf * rng.random_range(0.22..0.32);
            let j = sf / 8.0;
            let cx = sf / 2.0 + rng.random_range(-j..j);
            let cy = sf / 2.0 + rng.random_range(-j..j);
            alloc::boxed::Box::new(move |y, x| {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                dx * dx + dy * dy <= r * r
            })
        }
        Shape::Square => {
            let side = (sf * rng.random_range(0.4..0.6)) as usize;
            let x0 = rng.random_range(0..=s - side);
            let y0 = rng.random_range(0..=s - side);
            alloc::boxed::Box::new(move |y, x| (x0..x0 + side).contains(&x) && (y0..y0 + side).contains(&y))
        }
        Shape::Stripes => {
            let period = (s / 4).max(2);
            let phase = rng.random_range(0..period);
            alloc::boxed::Box::new(move |_, x| ((x + phase) % period) < period / 2)
        }
        Shape::Checker => {
            let cell = (s / 8).max(1);
            let (px, py) = (rng.random_range(0..2 * cell), rng.random_range(0..2 * cell));
            alloc::boxed::Box::new(move |y, x| ((x + px) / cell + (y + py) / cell).is_multiple_of(2))
        }
    };
    let fg = spec.color.rgb();
    let bg = spec.background.rgb();
    let mut data = Vec::with_capacity(s * s * 3);
    for y in 0..s {
        for x in 0..s {
            let c = if inside(y, x) { fg } else { bg };
            data.extend(c.iter().map(|&v| v as f64 / 255.0));
        }
    }
    Tensor::new([s, s, 3], data)
}

/// Raw, synthetic and generated phrasings of the same colour/shape fact.
pub fn toy_captions(spec: &ToySpec) -> (String, String, String) {
    let (c, s, bg) = (spec.color.name(), spec.shape.name(), spec.background.name());
    let raw = format!("{c} {s}");
    let synthetic = match spec.shape {
        Shape::Stripes => format!("a pattern of {c} stripes on a {bg} background"),
        Shape::Checker => format!("a {c} checker board pattern on a {bg} background"),
        _ => format!("a {c} {s} on a {bg} background"),
    };
    let generated = format!("A simple picture showing a {s} shape colored {c} against {bg}.");
    (raw, synthetic, generated)
}

/// `n` toy records cycling through the 32 classes, with per-record jitter
/// seeds drawn from `seed`.
pub fn toy_corpus(n: usize, seed: u64, size: usize) -> Vec<PairedRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let spec = ToySpec::for_class(i % TOY_CLASSES, rng.random(), size);
            let (raw, synthetic, generated) = toy_captions(&spec);
            PairedRecord {
                id: format!("toy-{seed}-{i:05}"),
                image_source: ImageSource::Toy(spec),
                raw_text: raw,
                synthetic_caption: Some(synthetic),
                generated_description: Some(generated),
                tags: vec![spec.color.name().to_string(), spec.shape.name().to_string()],
            }
        })
        .collect()
}

pub const FUSION_TEMPLATE: &str = "Please merge the information from the given raw text and the synthetic caption with the help of the highly relevant detection tags. The raw caption offers detailed real-world information, yet it suffers from flaws in sentence structure and grammar. The synthetic caption exhibits impeccable sentence structure but often lacks in-depth real-world details and may contain false information. The highly relevant detection tags are provided to enrich the semantic information of the raw caption, while some are redundant and noisy. You are a great information integration and summary expert, you are also good at enriching semantic information. Ensure a well-structured sentence while retaining the detailed real-world information provided in the raw caption. Avoid simply concatenating the sentences and avoid adding external information to describe. Correctness and simplify sentences finally. Raw caption:<raw caption>, synthetic caption:<synthetic caption>, and highly relevant detection tags:<detection tags>";

pub const RAW_SLOT: &str = "<raw caption>";
pub const SYNTHETIC_SLOT: &str = "<synthetic caption>";
pub const TAGS_SLOT: &str = "<detection tags>";

/// Fills the fusion instruction with one record's texts. Tags are joined
/// with `", "`.
pub fn build_fusion_prompt(raw: &str, synthetic: &str, tags: &[String]) -> Result<String> {
    if raw.is_empty() {
        return Err(Error::invalid("fusion prompt needs a raw caption"));
    }
    // slot by slot so a caption containing a slot name is left alone
    let (head, rest) = FUSION_TEMPLATE.split_once(RAW_SLOT).expect("raw slot");
    let (mid, rest) = rest.split_once(SYNTHETIC_SLOT).expect("synthetic slot");
    let (mid2, tail) = rest.split_once(TAGS_SLOT).expect("tags slot");
    let mut out = String::with_capacity(FUSION_TEMPLATE.len() + raw.len() + synthetic.len() + 32);
    out.push_str(head);
    out.push_str(raw);
    out.push_str(mid);
    out.push_str(synthetic);
    out.push_str(mid2);
    out.push_str(&tags.join(", "));
    out.push_str(tail);
    Ok(out)
}

/// Request sent to a chat-completion endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub prompt: String,
    pub model: String,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl LlmRequest {
    pub fn new(prompt: String, model: impl Into<String>) -> Result<Self> {
        if prompt.is_empty() {
            return Err(Error::invalid("empty prompt"));
        }
        Ok(Self {
            prompt,
            model: model.into(),
            max_tokens: 256,
            temperature: 0.2,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub text: String,
    pub finish_reason: String,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextTypeStats {
    pub count: usize,
    pub mean_tokens: f64,
    /// Token count -> number of texts.
    pub histogram: BTreeMap<usize, usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_similarity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionStats {
    pub records: usize,
    pub by_kind: BTreeMap<TextKind, TextTypeStats>,
}

/// Number of non-pad tokens of `s` under [`tokenize`].
pub fn token_count(s: &str, context_len: usize) -> Result<usize> {
    Ok(tokenize(s, context_len)?.iter().filter(|&&t| t != PAD).count())
}

/// Token-length histograms per text kind. When `similarity` is given it is
/// called per present text and its results averaged per kind.
pub fn caption_stats<F>(records: &[PairedRecord], context_len: usize, mut similarity: Option<F>) -> Result<CaptionStats>
where
    F: FnMut(&PairedRecord, &str) -> Result<f64>,
{
    if records.is_empty() {
        return Err(Error::invalid("caption_stats needs at least one record"));
    }
    let mut by_kind = BTreeMap::new();
    for kind in TextKind::ALL {
        let mut hist = BTreeMap::new();
        let (mut count, mut total, mut sim) = (0usize, 0usize, 0.0);
        for rec in records {
            if let Some(text) = rec.text(kind) {
                let n = token_count(text, context_len)?;
                *hist.entry(n).or_insert(0) += 1;
                count += 1;
                total += n;
                if let Some(f) = similarity.as_mut() {
                    sim += f(rec, text)?;
                }
            }
        }
        if count == 0 {
            continue;
        }
        by_kind.insert(
            kind,
            TextTypeStats {
                count,
                mean_tokens: total as f64 / count as f64,
                histogram: hist,
                mean_similarity: similarity.as_ref().map(|_| sim / count as f64),
            },
        );
    }
    Ok(CaptionStats {
        records: records.len(),
        by_kind,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(raw: &str, syn: Option<&str>, gen: Option<&str>) -> PairedRecord {
        PairedRecord {
            id: "r".into(),
            image_source: ImageSource::Path("x.png".into()),
            raw_text: raw.into(),
            synthetic_caption: syn.map(Into::into),
            generated_description: gen.map(Into::into),
            tags: vec![],
        }
    }

    #[test]
    fn sampler_single_option_and_determinism() {
        let r = rec("only", None, None);
        for seed in 0..50 {
            assert_eq!(sample_text(&r, seed).unwrap(), "only");
        }
        let r = rec("a", Some("b"), Some("c"));
        for seed in 0..50 {
            assert_eq!(sample_text(&r, seed).unwrap(), sample_text(&r, seed).unwrap());
        }
        assert!(sample_text(&rec("", None, None), 0).is_err());
    }

    #[test]
    fn sampler_is_uniform() {
        let r = rec("a", Some("b"), Some("c"));
        let mut counts = [0usize; 3];
        let n = 30_000;
        for seed in 0..n {
            let t = sample_text(&r, seed).unwrap();
            counts[(t.as_bytes()[0] - b'a') as usize] += 1;
        }
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((0.323..=0.343).contains(&f), "{counts:?}");
        }
    }

    #[test]
    fn tokenizer_examples() {
        assert_eq!(tokenize("", 8).unwrap(), vec![1, 2, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&tokenize("a", 8).unwrap()[..4], &[1, 100, 2, 0]);
        let t = tokenize("abcdef", 5).unwrap();
        assert_eq!(t, vec![1, 100, 101, 102, 2]);
        assert!(tokenize("x", 1).is_err());
    }

    proptest! {
        #[test]
        fn tokenizer_roundtrip(s in "[ -~]{0,30}") {
            prop_assert_eq!(detokenize(&tokenize(&s, 32).unwrap()), s);
        }
    }

    #[test]
    fn toy_render_is_deterministic_and_exact_in_u8() {
        let spec = ToySpec::for_class(5, 99, 32);
        let a = render_toy(&spec).unwrap();
        assert_eq!(a, render_toy(&spec).unwrap());
        assert_eq!(a.shape(), &[32, 32, 3]);
        for &v in a.data() {
            let k = v * 255.0;
            assert_eq!(k, libm::round(k));
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn square_caption_mentions_square() {
        let spec = ToySpec::for_class(8 + 3, 1, 32);
        assert_eq!(spec.shape, Shape::Square);
        let (a, b, c) = toy_captions(&spec);
        for s in [&a, &b, &c] {
            assert!(s.contains("square"), "{s}");
        }
        assert!(a != b && b != c && a != c);
    }

    #[test]
    fn all_classes_render_distinct_images_and_captions() {
        let imgs: Vec<Tensor> = (0..TOY_CLASSES)
            .map(|c| render_toy(&ToySpec::for_class(c, 3, 32)).unwrap())
            .collect();
        let caps: Vec<String> = (0..TOY_CLASSES)
            .map(|c| toy_captions(&ToySpec::for_class(c, 3, 32)).0)
            .collect();
        for i in 0..TOY_CLASSES {
            assert_eq!(ToySpec::for_class(i, 0, 32).class_index(), Some(i));
            for j in 0..i {
                assert_ne!(imgs[i], imgs[j], "classes {i} {j}");
                assert_ne!(caps[i], caps[j]);
            }
        }
    }

    #[test]
    fn toy_corpus_cycles_classes() {
        let c = toy_corpus(64, 7, 32);
        assert_eq!(c.len(), 64);
        for (i, r) in c.iter().enumerate() {
            let ImageSource::Toy(spec) = r.image_source else { panic!() };
            assert_eq!(spec.class_index(), Some(i % 32));
            assert_eq!(r.tags.len(), 2);
            r.validate().unwrap();
        }
        assert_eq!(c, toy_corpus(64, 7, 32));
    }

    #[test]
    fn fusion_prompt_examples() {
        let p = build_fusion_prompt("RAW", "SYN", &["a".into(), "b".into()]).unwrap();
        assert!(p.starts_with("Please merge the information from the given raw text"));
        assert!(p.ends_with("Raw caption:RAW, synthetic caption:SYN, and highly relevant detection tags:a, b"));
        let e = build_fusion_prompt("RAW", "SYN", &[]).unwrap();
        assert!(e.ends_with("highly relevant detection tags:"));
        assert!(build_fusion_prompt("", "SYN", &[]).is_err());
    }

    #[test]
    fn fusion_prompt_differs_from_template_only_at_slots() {
        // independent diff: re-substitute the filled values back into slots
        let (raw, syn, tags) = ("r1 <x>", "s2", vec![String::from("t3"), String::from("t4")]);
        let p = build_fusion_prompt(raw, syn, &tags).unwrap();
        let i = FUSION_TEMPLATE.find(RAW_SLOT).unwrap();
        assert_eq!(&p[..i], &FUSION_TEMPLATE[..i]);
        assert_eq!(&p[i..i + raw.len()], raw);
        let after_raw = &FUSION_TEMPLATE[i + RAW_SLOT.len()..];
        let j = after_raw.find(SYNTHETIC_SLOT).unwrap();
        let p2 = &p[i + raw.len()..];
        assert_eq!(&p2[..j], &after_raw[..j]);
        assert_eq!(&p2[j..j + syn.len()], syn);
        let after_syn = &after_raw[j + SYNTHETIC_SLOT.len()..];
        let k = after_syn.find(TAGS_SLOT).unwrap();
        let p3 = &p2[j + syn.len()..];
        assert_eq!(&p3[..k], &after_syn[..k]);
        assert_eq!(&p3[k..], "t3, t4");
        assert_eq!(FUSION_TEMPLATE.matches('<').count(), 3);
    }

    #[test]
    fn caption_stats_examples() {
        let none: Option<fn(&PairedRecord, &str) -> Result<f64>> = None;
        let s = caption_stats(&[rec("abc", None, None)], 77, none).unwrap();
        assert_eq!(s.by_kind.len(), 1);
        assert_eq!(s.by_kind[&TextKind::Raw].histogram.len(), 1);

        let recs = [rec("a", None, None), rec("abcd", None, None), rec("abcdefg", None, None)];
        let s = caption_stats(&recs, 77, none).unwrap();
        // token counts are bytes + BOS + EOS: 3, 6, 9
        assert_eq!(s.by_kind[&TextKind::Raw].mean_tokens, (3.0 + 6.0 + 9.0) / 3.0);

        let s = caption_stats(&recs, 77, Some(|_: &PairedRecord, t: &str| Ok(if t.len() > 3 { 1.0 } else { -1.0 })))
            .unwrap();
        let m = s.by_kind[&TextKind::Raw].mean_similarity.unwrap();
        assert!((-1.0..=1.0).contains(&m));
        assert!(caption_stats(&[], 77, none).is_err());
    }
}
