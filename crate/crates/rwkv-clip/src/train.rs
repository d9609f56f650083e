//! The training loop: sample, tokenize, forward both towers, clip, step.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rwkv_clip_core::contrastive::clamp_log_inv_tau;
use rwkv_clip_core::data::{sample_text_with, tokenize, PairedRecord};
use rwkv_clip_core::model::ClipModel;
use rwkv_clip_core::optim::{adamw_step, clip_grad_norm, onecycle_lr, AdamState, TrainConfig};
use rwkv_clip_core::Tensor;

use crate::checkpoint::save_checkpoint;
use crate::error::{Error, Result};
use crate::images;

pub const METRICS_HEADER: &str = "step,epoch,loss,lr,grad_norm";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const EPOCH_CHECKPOINT: &str = "epoch.ckpt";
pub const NONFINITE_DUMP: &str = "nonfinite_batch.json";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

impl MetricRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.epoch, self.loss, self.lr, self.grad_norm)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Metrics, checkpoints and failure dumps go here when set.
    pub out_dir: Option<PathBuf>,
    /// Base for relative image paths.
    pub base_dir: PathBuf,
    /// Single-threaded image preparation.
    pub deterministic: bool,
    /// Print a progress line per epoch to stderr.
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ClipModel,
    pub metrics: Vec<MetricRow>,
}

/// Loads every record's image once. Rendering is a pure function of the
/// record, so the thread count never changes the result.
pub fn prepare_images(records: &[PairedRecord], base: &Path, size: usize, threads: usize) -> Result<Vec<Tensor>> {
    let threads = threads.clamp(1, records.len().max(1));
    if threads == 1 {
        return records.iter().map(|r| images::load_record_image(r, base, size)).collect();
    }
    let chunk = records.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = records
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|r| images::load_record_image(r, base, size))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(records.len());
        for h in handles {
            out.extend(h.join().expect("image worker panicked")?);
        }
        Ok(out)
    })
}

pub fn available_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Batches per epoch and the batch length. A corpus smaller than one batch
/// trains on itself; otherwise the incomplete tail batch is dropped.
pub fn epoch_layout(records: usize, batch_size: usize) -> (usize, usize) {
    if records >= batch_size {
        (records / batch_size, batch_size)
    } else {
        (1, records)
    }
}

struct MetricsSink {
    path: PathBuf,
    w: BufWriter<File>,
}

impl MetricsSink {
    fn create(path: PathBuf) -> Result<Self> {
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut sink = Self {
            w: BufWriter::new(f),
            path,
        };
        sink.line(METRICS_HEADER)?;
        Ok(sink)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.w, "{s}")
            .and_then(|_| self.w.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Trains `model` in place on `records` and returns it with the per-step
/// metrics. All randomness (shuffles and text sampling) comes from
/// `cfg.seed`.
pub fn train(records: &[PairedRecord], mut model: ClipModel, cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.config.validate()?;
    if records.len() < 2 {
        return Err(Error::Config("training needs at least two records".into()));
    }
    let size = model.config.image.image_size;
    let ctx = model.config.text.context_len;
    let threads = if opts.deterministic { 1 } else { available_threads() };
    let pixels = prepare_images(records, &opts.base_dir, size, threads)?;

    let mut sink = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(MetricsSink::create(dir.join(METRICS_FILE))?)
        }
        None => None,
    };

    let (per_epoch, blen) = epoch_layout(records.len(), cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(model.store.values());
    let exempt = model.store.decay_exempt().to_vec();
    let theta = model.log_inv_tau;
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut metrics = Vec::with_capacity(total);
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for b in 0..per_epoch {
            let idx = &order[b * blen..(b + 1) * blen];
            let imgs: Vec<&Tensor> = idx.iter().map(|&i| &pixels[i]).collect();
            let batch_images = images::batch(&imgs)?;
            let mut ids = Vec::with_capacity(blen * ctx);
            for &i in idx {
                let text = sample_text_with(&records[i], &mut rng)?;
                ids.extend(tokenize(text, ctx)?);
            }
            let result = model.loss_and_grads(&batch_images, &ids, blen);
            let (loss, mut grads) = match result {
                Ok((l, g)) if l.is_finite() => (l, g),
                Ok(_) | Err(rwkv_clip_core::Error::NonFinite(_)) => {
                    let dump = dump_batch(opts.out_dir.as_deref(), step, epoch, b, idx, records)?;
                    return Err(Error::NonFiniteLoss { step, batch: b, dump });
                }
                Err(e) => return Err(e.into()),
            };
            let lr = onecycle_lr(step, total, cfg)?;
            let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
            adamw_step(model.store.values_mut(), &grads, &exempt, &mut state, lr, cfg)?;
            let t = model.store.get_mut(theta);
            t.data_mut()[0] = clamp_log_inv_tau(t.data()[0]);

            let row = MetricRow {
                step,
                epoch,
                loss,
                lr,
                grad_norm,
            };
            if let Some(s) = sink.as_mut() {
                s.line(&row.csv())?;
            }
            metrics.push(row);
            step += 1;
        }
        if let Some(dir) = &opts.out_dir {
            save_checkpoint(&dir.join(EPOCH_CHECKPOINT), &model)?;
        }
        if opts.verbose {
            let tail = &metrics[metrics.len() - per_epoch..];
            let mean = tail.iter().map(|r| r.loss).sum::<f64>() / per_epoch as f64;
            eprintln!("epoch {:>3}/{}  mean loss {mean:.4}  tau {:.4}", epoch + 1, cfg.epochs, model.temperature().tau());
        }
    }
    if let Some(dir) = &opts.out_dir {
        save_checkpoint(&dir.join(FINAL_CHECKPOINT), &model)?;
    }
    Ok(TrainOutcome { model, metrics })
}

fn dump_batch(
    dir: Option<&Path>,
    step: usize,
    epoch: usize,
    batch: usize,
    idx: &[usize],
    records: &[PairedRecord],
) -> Result<String> {
    let ids: Vec<&str> = idx.iter().map(|&i| records[i].id.as_str()).collect();
    let body = serde_json::json!({ "step": step, "epoch": epoch, "batch": batch, "record_ids": ids });
    match dir {
        Some(d) => {
            let p = d.join(NONFINITE_DUMP);
            std::fs::write(&p, body.to_string()).map_err(|e| Error::io(&p, e))?;
            Ok(p.display().to_string())
        }
        None => {
            eprintln!("{body}");
            Ok("stderr".into())
        }
    }
}
