//! The `imu-align` command line: every subcommand prints one JSON document
//! on stdout; failures print a JSON error on stderr and exit with 2
//! (validation) or 3 (numerical).

mod manifest;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::encoder::{encode_batch, EncoderConfig};
use crate::error::{Error, Result};
use crate::evaluate::{
    classification_metrics, eval_retrieval, fine_tune, init_head, predict, top_k, train_probe, zeroshot_predict,
    ClassifyConfig, LabeledSet, RetrievalDirection,
};
use crate::signal::normalize_in_place;
use crate::signal::synth::{files, write_corpus, SYNTH_RATE_HZ};
use crate::signal::{
    assemble_dataset, cache_key, load_anchor_embeddings, load_imu_stream, load_labels, make_windows,
    parse_anchor_line, read_cache, resample, synth_class_anchors, synth_dataset, write_cache, AssembleOptions,
    SynthConfig, WindowCache, WindowParams,
};
use crate::train::{load_checkpoint, save_checkpoint, train_run, Checkpoint, RunOptions, TrainConfig, TrainMode};

pub use manifest::{RunManifest, MANIFEST_FILE};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "IMU_ALIGN_THREADS";

#[derive(Debug, Parser)]
#[command(name = "imu-align", version, about = "Align an IMU encoder to frozen video/text embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Window IMU CSV files into a cache.
    Ingest(IngestArgs),
    /// Contrastive pre-training against frozen anchors.
    Train(TrainArgs),
    /// Recall@k / MRR between IMU embeddings and anchors.
    EvalRetrieval(EvalRetrievalArgs),
    /// Activity recognition by zeroshot, linear probe or fine-tuning.
    EvalClassify(EvalClassifyArgs),
    /// Top-k windows for one query anchor.
    Retrieve(RetrieveArgs),
    /// Write a deterministic synthetic corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct IngestArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub imu: Vec<PathBuf>,
    #[arg(long)]
    pub window_s: f64,
    #[arg(long)]
    pub stride_s: f64,
    #[arg(long)]
    pub rate_hz: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Default,
    Small,
    Tiny,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub cache: PathBuf,
    #[arg(long)]
    pub video_anchors: PathBuf,
    #[arg(long)]
    pub text_anchors: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "iv")]
    pub mode: TrainMode,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub adagrad_eps: f64,
    #[arg(long, default_value_t = 0.1)]
    pub decay: f64,
    #[arg(long, default_value_t = 0.1)]
    pub temperature: f64,
    /// Encoder architecture; the embedding size follows the anchors.
    #[arg(long, value_enum, default_value = "default")]
    pub preset: Preset,
    /// JSON encoder config overriding `--preset`.
    #[arg(long)]
    pub encoder_config: Option<PathBuf>,
    /// Minimum fraction of windows that must have every anchor.
    #[arg(long, default_value_t = 1.0)]
    pub coverage_threshold: f64,
    /// Extra checkpoint every N epochs (0: final only).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub run_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalRetrievalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub cache: PathBuf,
    #[arg(long)]
    pub anchors: PathBuf,
    #[arg(long, value_enum)]
    pub direction: RetrievalDirection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Zeroshot,
    Probe,
    Finetune,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalClassifyArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub cache: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, value_enum)]
    pub protocol: Protocol,
    /// One text anchor per class, `window_id` holding the class name.
    #[arg(long)]
    pub class_anchors: Option<PathBuf>,
    /// Where probe/finetune write their outputs (default: `<ckpt dir>/<protocol>`).
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long, default_value_t = ClassifyConfig::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = ClassifyConfig::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = ClassifyConfig::default().learning_rate)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Window cache whose windows form the pool.
    #[arg(long)]
    pub pool: PathBuf,
    /// One anchor JSON line, or a file whose first line is one.
    #[arg(long)]
    pub query_anchor: String,
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub n: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// Samples per window (at 50 Hz).
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    match execute(cli.command) {
        Ok(value) => {
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "{value}");
            0
        }
        Err(e) => {
            let report = json!({"error": {"kind": e.kind(), "message": e.to_string()}});
            eprintln!("{report}");
            if e.is_numerical() {
                3
            } else {
                2
            }
        }
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        if n > 0 {
            // A second call in the same process keeps the first pool.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn execute(command: Command) -> Result<String> {
    let value = match command {
        Command::Ingest(a) => ingest(&a)?,
        Command::Train(a) => train(&a)?,
        Command::EvalRetrieval(a) => eval_retrieval_cmd(&a)?,
        Command::EvalClassify(a) => eval_classify(&a)?,
        Command::Retrieve(a) => retrieve(&a)?,
        Command::Synth(a) => synth(&a)?,
    };
    Ok(value)
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string(v)?)
}

fn ingest(a: &IngestArgs) -> Result<String> {
    let params = WindowParams {
        window_s: a.window_s,
        stride_s: a.stride_s,
        rate_hz: a.rate_hz,
    };
    let mut blobs = Vec::new();
    let mut windows = Vec::new();
    let mut sources = Vec::new();
    for path in &a.imu {
        let bytes = crate::binio::read_file(path)?;
        let stream = resample(&load_imu_stream(path)?, a.rate_hz)?;
        let ws = make_windows(&stream, a.window_s, a.stride_s)?;
        sources.push(json!({
            "source_id": stream.source_id,
            "duration_s": stream.duration_s(),
            "n_windows": ws.len(),
        }));
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        blobs.push((name, bytes));
        windows.extend(ws);
    }
    let mut seen = std::collections::BTreeSet::new();
    if let Some(w) = windows.iter().find(|w| !seen.insert(w.window_id.as_str())) {
        return Err(Error::DuplicateId(w.window_id.clone()));
    }
    let key = cache_key(blobs.iter().map(|(n, b)| (n.as_str(), b.as_slice())), params);
    let cache = WindowCache { key, params, windows };
    write_cache(&a.out, &cache)?;
    to_json(&json!({
        "cache": a.out,
        "key": cache.key_hex(),
        "n_windows": cache.windows.len(),
        "samples_per_window": cache.windows.first().map(|w| w.samples()),
        "window_s": a.window_s,
        "stride_s": a.stride_s,
        "rate_hz": a.rate_hz,
        "sources": sources,
    }))
}

fn resolve_encoder(a: &TrainArgs, anchor_dim: Option<usize>) -> Result<EncoderConfig> {
    match &a.encoder_config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let cfg: EncoderConfig = serde_json::from_str(&text)?;
            cfg.validate()?;
            Ok(cfg)
        }
        None => {
            let base = match a.preset {
                Preset::Default => EncoderConfig::default(),
                Preset::Small => EncoderConfig::small(),
                Preset::Tiny => EncoderConfig::tiny(),
            };
            Ok(match anchor_dim {
                Some(d) => base.with_embed_dim(d),
                None => base,
            })
        }
    }
}

fn train(a: &TrainArgs) -> Result<String> {
    let started = manifest::now_ms();
    if a.mode.uses_text() && a.text_anchors.is_none() {
        return Err(Error::Config(format!(
            "--mode {} aligns IMU with text and requires --text-anchors",
            serde_json::to_value(a.mode)?.as_str().unwrap_or("?")
        )));
    }
    let config = TrainConfig {
        batch_size: a.batch_size,
        learning_rate: a.lr,
        adagrad_eps: a.adagrad_eps,
        decay: a.decay,
        epochs: a.epochs,
        seed: a.seed,
        mode: a.mode,
        temperature: a.temperature,
    };
    config.validate()?;
    let cache = read_cache(&a.cache)?;
    let text = if a.mode.uses_text() { a.text_anchors.as_deref() } else { None };
    let (dataset, report) = assemble_dataset(
        cache.windows,
        &a.video_anchors,
        text,
        None,
        AssembleOptions {
            coverage_threshold: a.coverage_threshold,
        },
    )?;
    if !report.dropped.is_empty() {
        log::warn!("dropped {} windows without anchors", report.dropped.len());
    }
    let encoder = resolve_encoder(a, dataset.embed_dim())?;
    let resume = a.resume.as_deref().map(load_checkpoint).transpose()?;
    let summary = train_run(
        &dataset,
        &encoder,
        &config,
        &a.run_dir,
        RunOptions {
            resume,
            checkpoint_every: a.checkpoint_every,
        },
    )?;

    let mut inputs: Vec<&Path> = vec![&a.cache, &a.video_anchors];
    inputs.extend(text);
    inputs.extend(a.encoder_config.as_deref());
    inputs.extend(a.resume.as_deref());
    let resolved = json!({"args": a, "train": config, "encoder": encoder});
    RunManifest::new("train", resolved, manifest::hash_inputs(inputs)?, started).write(&a.run_dir)?;
    to_json(&summary)
}

type Embedded = Vec<(String, Vec<f64>)>;

fn embed_cache(ckpt: &Checkpoint, cache: &Path) -> Result<(Vec<crate::signal::ImuWindow>, Embedded)> {
    let windows = read_cache(cache)?.windows;
    let embs = encode_batch(&windows, &ckpt.params, &ckpt.encoder)?;
    let pairs = windows.iter().map(|w| w.window_id.clone()).zip(embs).collect();
    Ok((windows, pairs))
}

fn eval_retrieval_cmd(a: &EvalRetrievalArgs) -> Result<String> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let (_, imu) = embed_cache(&ckpt, &a.cache)?;
    let anchors = load_anchor_embeddings(&a.anchors)?;
    to_json(&eval_retrieval(&imu, &anchors, a.direction)?)
}

fn class_anchor_list(path: &Path, classes: &[String]) -> Result<Vec<(String, Vec<f64>)>> {
    let map = load_anchor_embeddings(path)?;
    let missing: Vec<String> = classes.iter().filter(|c| !map.contains_key(*c)).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::MissingIds {
            what: "class anchor".into(),
            ids: missing,
        });
    }
    Ok(classes.iter().map(|c| (c.clone(), map[c].vector.clone())).collect())
}

fn eval_classify(a: &EvalClassifyArgs) -> Result<String> {
    let started = manifest::now_ms();
    if a.protocol == Protocol::Zeroshot && a.class_anchors.is_none() {
        return Err(Error::Config("--protocol zeroshot requires --class-anchors".into()));
    }
    let ckpt = load_checkpoint(&a.ckpt)?;
    let windows = read_cache(&a.cache)?.windows;
    let set = LabeledSet::from_labels(windows, &load_labels(&a.labels)?)?;
    let cfg = ClassifyConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        seed: a.seed,
        ..Default::default()
    };
    let run_dir = a.run_dir.clone().unwrap_or_else(|| {
        let parent = a.ckpt.parent().unwrap_or(Path::new("."));
        parent.join(serde_json::to_value(a.protocol).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default())
    });

    let (predictions, outputs) = match a.protocol {
        Protocol::Zeroshot => {
            let anchors = class_anchor_list(a.class_anchors.as_deref().expect("checked above"), &set.class_names)?;
            (zeroshot_predict(&set, &ckpt.params, &ckpt.encoder, &anchors)?, None)
        }
        Protocol::Probe => {
            let head = train_probe(&set, &ckpt.params, &ckpt.encoder, &cfg)?;
            (predict(&set, &ckpt.params, &ckpt.encoder, &head)?, Some((head, None)))
        }
        Protocol::Finetune => {
            let head = init_head(&set.class_names, ckpt.encoder.embed_dim, cfg.seed);
            let (params, head) = fine_tune(&set, &ckpt.params, &ckpt.encoder, &head, &cfg)?;
            let preds = predict(&set, &params, &ckpt.encoder, &head)?;
            let tuned = Checkpoint {
                params,
                optimizer: None,
                ..ckpt.clone()
            };
            (preds, Some((head, Some(tuned))))
        }
    };
    let metrics = classification_metrics(&predictions, &set.targets, &set.class_names)?;
    let metrics_json = to_json(&metrics)?;

    if let Some((head, tuned)) = outputs {
        std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
        let write = |name: &str, text: String| {
            let p = run_dir.join(name);
            std::fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))
        };
        write("head.json", serde_json::to_string_pretty(&head)?)?;
        write("metrics.json", metrics_json.clone())?;
        if let Some(ck) = tuned {
            save_checkpoint(&run_dir.join("ckpt-finetune.bin"), &ck)?;
        }
        let mut inputs: Vec<&Path> = vec![&a.ckpt, &a.cache, &a.labels];
        inputs.extend(a.class_anchors.as_deref());
        let resolved = json!({"args": a, "classify": cfg});
        RunManifest::new("eval-classify", resolved, manifest::hash_inputs(inputs)?, started).write(&run_dir)?;
    }
    Ok(metrics_json)
}

#[derive(Serialize)]
struct Hit {
    window_id: String,
    #[serde(serialize_with = "crate::evaluate::fixed6")]
    score: f64,
}

// Built as a struct: going through `json!` would turn the fixed-precision
// scores back into plain floats.
#[derive(Serialize)]
struct Hits {
    query: String,
    pool_size: usize,
    results: Vec<Hit>,
}

fn retrieve(a: &RetrieveArgs) -> Result<String> {
    let line = if a.query_anchor.trim_start().starts_with('{') {
        a.query_anchor.clone()
    } else {
        let path = Path::new(&a.query_anchor);
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .find(|l| !l.trim().is_empty())
            .ok_or_else(|| Error::Format(format!("{}: no anchor line", path.display())))?
            .to_string()
    };
    let mut query = parse_anchor_line(&line)?;
    normalize_in_place(&mut query.vector).map_err(|reason| Error::Format(format!("query anchor: {reason}")))?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    if query.vector.len() != ckpt.encoder.embed_dim {
        return Err(Error::DimensionMismatch {
            expected: ckpt.encoder.embed_dim,
            found: query.vector.len(),
            context: "query anchor vs encoder embed_dim".into(),
        });
    }
    let (_, pool) = embed_cache(&ckpt, &a.pool)?;
    let hits: Vec<Hit> = top_k(&query.vector, &pool, a.top_k)?
        .into_iter()
        .map(|(window_id, score)| Hit { window_id, score })
        .collect();
    to_json(&Hits {
        query: query.window_id,
        pool_size: pool.len(),
        results: hits,
    })
}

fn synth(a: &SynthArgs) -> Result<String> {
    let cfg = SynthConfig {
        seed: a.seed,
        n_windows: a.n,
        n_classes: a.classes,
        dim: a.dim,
        samples: a.samples,
        noise: a.noise,
    };
    let dataset = synth_dataset(&cfg)?;
    let classes = synth_class_anchors(a.seed, a.classes, a.dim);
    write_corpus(&dataset, &classes, &a.out_dir)?;
    let window_s = a.samples as f64 / SYNTH_RATE_HZ;
    to_json(&json!({
        "out_dir": a.out_dir,
        "files": [files::IMU, files::VIDEO, files::TEXT, files::LABELS, files::CLASS_ANCHORS],
        "n_windows": dataset.len(),
        "samples_per_window": a.samples,
        "ingest": {"window_s": window_s, "stride_s": window_s, "rate_hz": SYNTH_RATE_HZ},
    }))
}
