//! Held-out retrieval and zero-shot classification.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use rwkv_clip_core::contrastive::{cross_similarity, recall_at_k_grouped, zeroshot_classify, RetrievalDirection};
use rwkv_clip_core::data::{tokenize, PairedRecord};
use rwkv_clip_core::model::ClipModel;
use rwkv_clip_core::Tensor;

use crate::error::{Error, Result};
use crate::images;
use crate::train::prepare_images;

const ENCODE_CHUNK: usize = 64;

/// Runs `f` over `0..n` in chunks spread across `threads` workers and
/// concatenates the row blocks in order.
fn encode_rows<F>(n: usize, threads: usize, f: F) -> Result<Tensor>
where
    F: Fn(std::ops::Range<usize>) -> Result<Tensor> + Sync,
{
    let ranges: Vec<_> = (0..n).step_by(ENCODE_CHUNK).map(|s| s..(s + ENCODE_CHUNK).min(n)).collect();
    let threads = threads.clamp(1, ranges.len().max(1));
    let blocks: Vec<Tensor> = if threads == 1 {
        ranges.into_iter().map(&f).collect::<Result<_>>()?
    } else {
        let per = ranges.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = ranges
                .chunks(per)
                .map(|part| {
                    let f = &f;
                    s.spawn(move || part.iter().cloned().map(f).collect::<Result<Vec<_>>>())
                })
                .collect();
            let mut out = Vec::new();
            for h in handles {
                out.extend(h.join().expect("encoder worker panicked")?);
            }
            Ok::<_, Error>(out)
        })?
    };
    let dim = blocks.first().map_or(0, |b| b.shape()[1]);
    let data: Vec<f64> = blocks.into_iter().flat_map(Tensor::into_data).collect();
    Ok(Tensor::new([n, dim], data)?)
}

pub fn embed_images(model: &ClipModel, pixels: &[Tensor], threads: usize) -> Result<Tensor> {
    encode_rows(pixels.len(), threads, |r| {
        let refs: Vec<&Tensor> = pixels[r].iter().collect();
        model.encode_images(&images::batch(&refs)?).map_err(Error::from)
    })
}

pub fn embed_texts(model: &ClipModel, texts: &[String], threads: usize) -> Result<Tensor> {
    let ctx = model.config.text.context_len;
    encode_rows(texts.len(), threads, |r| {
        let mut ids = Vec::with_capacity(r.len() * ctx);
        for t in &texts[r.clone()] {
            ids.extend(tokenize(t, ctx)?);
        }
        model.encode_texts(&ids, r.len()).map_err(Error::from)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recalls {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub records: usize,
    /// Distinct raw captions; candidates sharing the query's caption count as hits.
    pub groups: usize,
    pub image_to_text: Recalls,
    pub text_to_image: Recalls,
    /// Expected R@1 of a random ranking and its standard deviation.
    pub null_r1_mean: f64,
    pub null_r1_std: f64,
}

/// Group id per record, keyed by raw caption in first-seen order.
pub fn caption_groups(records: &[PairedRecord]) -> Vec<usize> {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    records
        .iter()
        .map(|r| {
            let next = seen.len();
            *seen.entry(r.raw_text.as_str()).or_insert(next)
        })
        .collect()
}

/// Chance R@1 under a uniformly random ranking: each query hits with
/// probability `group_size / n`; the count is a sum of independent
/// Bernoullis.
pub fn null_r1(groups: &[usize]) -> (f64, f64) {
    let n = groups.len() as f64;
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for &g in groups {
        *sizes.entry(g).or_default() += 1;
    }
    let ps: Vec<f64> = groups.iter().map(|g| sizes[g] as f64 / n).collect();
    let mean = ps.iter().sum::<f64>() / n;
    let var = ps.iter().map(|p| p * (1.0 - p)).sum::<f64>() / (n * n);
    (mean, var.sqrt())
}

fn recalls(s: &Tensor, dir: RetrievalDirection, groups: &[usize]) -> Result<Recalls> {
    let n = groups.len();
    let at = |k: usize| recall_at_k_grouped(s, k.min(n), dir, groups);
    Ok(Recalls {
        r1: at(1)?,
        r5: at(5)?,
        r10: at(10)?,
    })
}

/// Image/text retrieval over `records`, pairing each image with its raw
/// caption.
pub fn retrieval(model: &ClipModel, records: &[PairedRecord], base: &Path, threads: usize) -> Result<RetrievalReport> {
    if records.len() < 2 {
        return Err(Error::Config("retrieval needs at least two records".into()));
    }
    let pixels = prepare_images(records, base, model.config.image.image_size, threads)?;
    let img = embed_images(model, &pixels, threads)?;
    let texts: Vec<String> = records.iter().map(|r| r.raw_text.clone()).collect();
    let txt = embed_texts(model, &texts, threads)?;
    let s = cross_similarity(&img, &txt)?;
    let groups = caption_groups(records);
    let (null_r1_mean, null_r1_std) = null_r1(&groups);
    Ok(RetrievalReport {
        records: records.len(),
        groups: groups.iter().max().map_or(0, |m| m + 1),
        image_to_text: recalls(&s, RetrievalDirection::ImageToText, &groups)?,
        text_to_image: recalls(&s, RetrievalDirection::TextToImage, &groups)?,
        null_r1_mean,
        null_r1_std,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub labels: Vec<String>,
    pub templates: usize,
    /// Records whose true label is in the label set.
    pub scored: usize,
    pub skipped: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// A record's true label is the first label equal to its raw caption or
/// listed among its tags.
pub fn true_label(rec: &PairedRecord, labels: &[String]) -> Option<usize> {
    labels
        .iter()
        .position(|l| *l == rec.raw_text)
        .or_else(|| labels.iter().position(|l| rec.tags.contains(l)))
}

pub fn zeroshot(
    model: &ClipModel,
    records: &[PairedRecord],
    base: &Path,
    labels: &[String],
    templates: &[String],
    threads: usize,
) -> Result<ZeroShotReport> {
    let truth: Vec<Option<usize>> = records.iter().map(|r| true_label(r, labels)).collect();
    let keep: Vec<usize> = (0..records.len()).filter(|&i| truth[i].is_some()).collect();
    let kept: Vec<PairedRecord> = keep.iter().map(|&i| records[i].clone()).collect();
    let (mut correct, mut accuracy) = (0, 0.0);
    if !kept.is_empty() {
        let pixels = prepare_images(&kept, base, model.config.image.image_size, threads)?;
        let img = embed_images(model, &pixels, threads)?;
        let pred = zeroshot_classify(&img, templates, labels, |prompts| {
            embed_texts(model, prompts, 1).map_err(|e| rwkv_clip_core::Error::InvalidArgument(e.to_string()))
        })?;
        correct = pred.iter().zip(&keep).filter(|(p, &i)| Some(**p) == truth[i]).count();
        accuracy = correct as f64 / kept.len() as f64;
    }
    Ok(ZeroShotReport {
        labels: labels.to_vec(),
        templates: templates.len(),
        scored: kept.len(),
        skipped: records.len() - kept.len(),
        correct,
        accuracy,
    })
}

/// Non-empty trimmed lines of a labels or templates file.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    if lines.is_empty() {
        return Err(Error::Config(format!("{} has no entries", path.display())));
    }
    Ok(lines)
}
