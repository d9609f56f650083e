use std::path::{Path, PathBuf};
use std::io::Write;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use rwkv_clip::bench::{self, BenchConfig};
use rwkv_clip::checkpoint::load_checkpoint;
use rwkv_clip::config::RunConfig;
use rwkv_clip::error::{Error, Result};
use rwkv_clip::eval;
use rwkv_clip::images::{load_record_image, save_png};
use rwkv_clip::jsonl::{read_records, write_records};
use rwkv_clip::llm::{fuse_descriptions, ChatClient, FuseOptions, HttpClient, MockClient};
use rwkv_clip::plot::{self, Axes};
use rwkv_clip::train::{self, available_threads, TrainOptions};
use rwkv_clip_core::data::{caption_stats, toy_corpus, tokenize, ImageSource, PairedRecord};
use rwkv_clip_core::math;
use rwkv_clip_core::model::ClipModel;
use rwkv_clip_core::suite::standard_suite;

#[derive(Parser)]
#[command(name = "rwkv-clip", version, about = "Bidirectional-RWKV dual-tower contrastive learner")]
struct Cli {
    /// Seed for every random choice; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded execution.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train both towers and write metrics and checkpoints.
    Train(TrainArgs),
    /// Retrieval or zero-shot evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Time the scan kernel against the quadratic reference.
    Bench(BenchArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck,
    /// Dataset tools.
    Data {
        #[command(subcommand)]
        cmd: DataCommand,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run config (model, train, data); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// JSONL dataset; overrides the config's data section.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Quiet: no per-epoch progress.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalMode {
    Retrieval,
    Zeroshot,
}

#[derive(Args)]
struct DatasetArgs {
    /// JSONL dataset.
    #[arg(long, conflicts_with = "toy")]
    data: Option<PathBuf>,
    /// Generate this many toy records instead of reading a file.
    #[arg(long)]
    toy: Option<usize>,
    /// Seed for the generated toy records.
    #[arg(long, default_value_t = 1007)]
    toy_seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    dataset: DatasetArgs,
    #[arg(long, value_enum, default_value_t = EvalMode::Retrieval)]
    mode: EvalMode,
    /// One label per line (zeroshot).
    #[arg(long, required_if_eq("mode", "zeroshot"))]
    labels: Option<PathBuf>,
    /// One prompt template per line, with `{label}` (zeroshot).
    #[arg(long, required_if_eq("mode", "zeroshot"))]
    templates: Option<PathBuf>,
    /// Write the JSON report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Sequence lengths, comma separated.
    #[arg(long = "T", value_delimiter = ',', default_values_t = [512usize, 1024, 2048, 4096])]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    #[arg(long, default_value_t = 21)]
    scan_reps: usize,
    #[arg(long, default_value_t = 3)]
    naive_reps: usize,
    /// Directory for bench.csv and bench.png.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit 1 when the scaling verdict fails.
    #[arg(long)]
    strict: bool,
}

#[derive(Subcommand)]
enum DataCommand {
    /// Write a toy corpus as JSONL plus PNG images.
    GenToy {
        #[arg(long, default_value_t = 512)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Output directory (records.jsonl, images/).
        #[arg(long)]
        out: PathBuf,
        /// Keep procedural specs in the records instead of writing PNGs.
        #[arg(long)]
        inline: bool,
    },
    /// Fill generated descriptions through a chat-completion endpoint.
    Fuse {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Offline client that answers "fused: " + raw caption.
        #[arg(long)]
        mock: bool,
        /// Full chat-completions endpoint URL.
        #[arg(long, required_unless_present = "mock")]
        url: Option<String>,
        #[arg(long, default_value = "llama3-8b-instruct")]
        model: String,
        #[arg(long, default_value_t = 4)]
        concurrency: usize,
        #[arg(long, default_value_t = 3)]
        retries: usize,
        /// Base backoff in milliseconds.
        #[arg(long, default_value_t = 200)]
        backoff_ms: u64,
        #[arg(long, default_value_t = 60)]
        timeout_s: u64,
    },
    /// Token-length statistics per text kind.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 77)]
        context: usize,
        /// Adds mean image-text cosine similarity per kind.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// Usage and config problems exit 2, everything else 1.
struct Failure {
    code: u8,
    error: Error,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = if matches!(error, Error::Config(_)) { 2 } else { 1 };
        Self { code, error }
    }
}

impl From<rwkv_clip_core::Error> for Failure {
    fn from(e: rwkv_clip_core::Error) -> Self {
        Error::from(e).into()
    }
}

fn usage(error: Error) -> Failure {
    Failure { code: 2, error }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = if cli.deterministic { 1 } else { available_threads() };
    let res = match cli.cmd {
        Command::Train(a) => cmd_train(a, cli.seed, cli.deterministic),
        Command::Eval(a) => cmd_eval(a, cli.seed, threads),
        Command::Bench(a) => cmd_bench(a, cli.seed),
        Command::Gradcheck => cmd_gradcheck(cli.seed),
        Command::Data { cmd } => cmd_data(cmd, cli.seed, threads),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn write_json<T: serde::Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json("report", e))?;
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = writeln!(stdout, "{text}") {
        if e.kind() != std::io::ErrorKind::BrokenPipe {
            return Err(Error::io("<stdout>", e));
        }
    }
    if let Some(p) = out {
        std::fs::write(p, format!("{text}\n")).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn base_of(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn cmd_train(a: TrainArgs, seed: Option<u64>, deterministic: bool) -> std::result::Result<(), Failure> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p).map_err(usage)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(p) = &a.data {
        cfg.data.path = Some(p.display().to_string());
    }
    let (records, base) = match &cfg.data.path {
        Some(p) => {
            let p = PathBuf::from(p);
            (read_records(&p)?, base_of(&p))
        }
        None => (
            toy_corpus(cfg.data.toy_records, cfg.data.toy_seed, cfg.model.image.image_size),
            PathBuf::new(),
        ),
    };
    std::fs::create_dir_all(&a.out).map_err(|e| usage(Error::io(&a.out, e)))?;
    let cfg_path = a.out.join("config.json");
    std::fs::write(&cfg_path, cfg.to_json()).map_err(|e| Error::io(&cfg_path, e))?;

    let model = ClipModel::new(cfg.model.clone(), cfg.train.seed)?;
    let opts = TrainOptions {
        out_dir: Some(a.out.clone()),
        base_dir: base,
        deterministic,
        verbose: !a.quiet,
    };
    let outcome = train::train(&records, model, &cfg.train, &opts)?;
    let curve: Vec<(f64, f64)> = outcome.metrics.iter().map(|m| (m.step as f64, m.loss)).collect();
    plot::save(&a.out.join("loss.png"), &[curve], Axes::default())?;
    if let (Some(first), Some(last)) = (outcome.metrics.first(), outcome.metrics.last()) {
        println!(
            "trained {} steps: loss {:.4} -> {:.4}; wrote {}",
            outcome.metrics.len(),
            first.loss,
            last.loss,
            a.out.join(train::FINAL_CHECKPOINT).display()
        );
    }
    Ok(())
}

fn load_dataset(d: &DatasetArgs, size: usize) -> Result<(Vec<PairedRecord>, PathBuf)> {
    match (&d.data, d.toy) {
        (Some(p), _) => Ok((read_records(p)?, base_of(p))),
        (None, Some(n)) => Ok((toy_corpus(n, d.toy_seed, size), PathBuf::new())),
        (None, None) => Err(Error::Config("pass --data FILE or --toy N".into())),
    }
}

fn cmd_eval(a: EvalArgs, _seed: Option<u64>, threads: usize) -> std::result::Result<(), Failure> {
    let model = load_checkpoint(&a.checkpoint)?;
    let (records, base) = load_dataset(&a.dataset, model.config.image.image_size)?;
    match a.mode {
        EvalMode::Retrieval => {
            let rep = eval::retrieval(&model, &records, &base, threads)?;
            eprintln!(
                "image->text R@1 {:.4} R@5 {:.4} R@10 {:.4} | text->image R@1 {:.4} R@5 {:.4} R@10 {:.4} | chance R@1 {:.4}",
                rep.image_to_text.r1,
                rep.image_to_text.r5,
                rep.image_to_text.r10,
                rep.text_to_image.r1,
                rep.text_to_image.r5,
                rep.text_to_image.r10,
                rep.null_r1_mean
            );
            write_json(&rep, a.out.as_deref())?;
        }
        EvalMode::Zeroshot => {
            let labels = eval::read_lines(a.labels.as_deref().expect("clap enforces --labels")).map_err(usage)?;
            let templates =
                eval::read_lines(a.templates.as_deref().expect("clap enforces --templates")).map_err(usage)?;
            let rep = eval::zeroshot(&model, &records, &base, &labels, &templates, threads)?;
            eprintln!("zero-shot accuracy {:.4} ({}/{})", rep.accuracy, rep.correct, rep.scored);
            write_json(&rep, a.out.as_deref())?;
        }
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs, seed: Option<u64>) -> std::result::Result<(), Failure> {
    let cfg = BenchConfig {
        lengths: a.lengths,
        d: a.d,
        heads: a.heads,
        scan_reps: a.scan_reps,
        naive_reps: a.naive_reps,
        seed: seed.unwrap_or(7),
    };
    if cfg.lengths.is_empty() || cfg.d == 0 || cfg.heads == 0 {
        return Err(usage(Error::Config("need at least one length and positive d, heads".into())));
    }
    let rows = bench::run(&cfg)?;
    let csv = bench::to_csv(&rows);
    print!("{csv}");
    let v = bench::verdict(&rows);
    let fmt = |rs: &[(usize, f64)]| rs.iter().map(|(t, r)| format!("{t}:{r:.2}")).collect::<Vec<_>>().join(" ");
    eprintln!("scan ratios  {}  linear: {}", fmt(&v.scan_ratios), v.scan_linear);
    eprintln!("naive ratios {}  superlinear: {}", fmt(&v.naive_ratios), v.naive_superlinear);
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("bench.csv");
        std::fs::write(&p, &csv).map_err(|e| Error::io(&p, e))?;
        let series: Vec<Vec<(f64, f64)>> = [bench::Kernel::Scan, bench::Kernel::Naive]
            .iter()
            .map(|&k| rows.iter().filter(|r| r.kernel == k).map(|r| (r.t as f64, r.median_ns as f64)).collect())
            .collect();
        plot::save(&dir.join("bench.png"), &series, Axes { log_x: true, log_y: true })?;
    }
    if a.strict && !v.passed() {
        return Err(Failure {
            code: 1,
            error: Error::CheckFailed("scaling verdict failed".into()),
        });
    }
    Ok(())
}

fn cmd_gradcheck(seed: Option<u64>) -> std::result::Result<(), Failure> {
    let reports = standard_suite(seed.unwrap_or(7))?;
    let mut failed = 0;
    for r in &reports {
        println!(
            "{:<6} {:<40} max_rel {:.3e}  max_abs {:.3e}  tol {:.0e}  coords {}",
            if r.passed { "ok" } else { "FAIL" },
            r.name,
            r.max_rel_err,
            r.max_abs_err,
            r.rel_tol,
            r.coordinates
        );
        failed += usize::from(!r.passed);
    }
    println!("{} checks, {} failed", reports.len(), failed);
    if failed > 0 {
        return Err(Failure {
            code: 1,
            error: Error::CheckFailed(format!("{failed} gradient checks failed")),
        });
    }
    Ok(())
}

fn cmd_data(cmd: DataCommand, seed: Option<u64>, threads: usize) -> std::result::Result<(), Failure> {
    match cmd {
        DataCommand::GenToy { n, size, out, inline } => {
            if size < 8 {
                return Err(usage(Error::Config("--size must be at least 8".into())));
            }
            let seed = seed.unwrap_or(7);
            let mut records = toy_corpus(n, seed, size);
            std::fs::create_dir_all(&out).map_err(|e| usage(Error::io(&out, e)))?;
            if !inline {
                let img_dir = out.join("images");
                std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
                for r in &mut records {
                    let img = load_record_image(r, &out, size)?;
                    let rel = format!("images/{}.png", r.id);
                    save_png(&out.join(&rel), &img)?;
                    r.image_source = ImageSource::Path(rel);
                }
            }
            let p = out.join("records.jsonl");
            write_records(&p, &records)?;
            println!("wrote {} records to {}", records.len(), p.display());
        }
        DataCommand::Fuse {
            input,
            out,
            mock,
            url,
            model,
            concurrency,
            retries,
            backoff_ms,
            timeout_s,
        } => {
            let mut records = read_records(&input)?;
            let opts = FuseOptions {
                model,
                concurrency: if threads == 1 { 1 } else { concurrency },
                retries,
                backoff: Duration::from_millis(backoff_ms),
                ..FuseOptions::default()
            };
            let client: Box<dyn ChatClient> = if mock {
                Box::new(MockClient::default())
            } else {
                Box::new(HttpClient::new(url.expect("clap enforces --url"), Duration::from_secs(timeout_s))?)
            };
            let rep = fuse_descriptions(&mut records, client.as_ref(), &opts)?;
            write_records(&out, &records)?;
            write_json(&rep, None)?;
        }
        DataCommand::Stats {
            input,
            context,
            checkpoint,
        } => {
            let records = read_records(&input)?;
            let base = base_of(&input);
            let stats = match checkpoint {
                None => caption_stats(&records, context, None::<fn(&PairedRecord, &str) -> _>)?,
                Some(ck) => {
                    let model = load_checkpoint(&ck)?;
                    let size = model.config.image.image_size;
                    let ctx = model.config.text.context_len;
                    let mut failure = None;
                    let stats = caption_stats(
                        &records,
                        context,
                        Some(|rec: &PairedRecord, text: &str| {
                            let sim = (|| -> Result<f64> {
                                let img = load_record_image(rec, &base, size)?;
                                let ie = model.encode_images(&rwkv_clip::images::batch(&[&img])?)?;
                                let te = model.encode_texts(&tokenize(text, ctx)?, 1)?;
                                Ok(math::dot(ie.data(), te.data()))
                            })();
                            sim.map_err(|e| {
                                let msg = e.to_string();
                                failure = Some(e);
                                rwkv_clip_core::Error::InvalidArgument(msg)
                            })
                        }),
                    );
                    match (stats, failure) {
                        (_, Some(e)) => return Err(e.into()),
                        (s, None) => s?,
                    }
                }
            };
            write_json(&stats, None)?;
        }
    }
    Ok(())
}
