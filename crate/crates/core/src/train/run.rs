use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{lr_at, save_checkpoint, train_epoch, AdagradState, Checkpoint, TrainConfig};
use crate::binio::PathLock;
use crate::contrastive::LossReport;
use crate::encoder::{init_params, EncoderConfig};
use crate::error::{Error, Result};
use crate::signal::ParallelDataset;

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// One `metrics.jsonl` record. `epoch` is the 0-based index that keys the
/// learning-rate schedule and the batch shuffle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_i2v: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_v2i: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_i2t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_t2i: Option<f64>,
    pub l_total: f64,
}

impl EpochMetrics {
    fn new(epoch: usize, lr: f64, r: &LossReport) -> Self {
        EpochMetrics {
            epoch,
            lr,
            l_i2v: r.l_i2v,
            l_v2i: r.l_v2i,
            l_i2t: r.l_i2t,
            l_t2i: r.l_t2i,
            l_total: r.l_total.unwrap_or(f64::NAN),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from this checkpoint instead of a fresh initialization.
    pub resume: Option<Checkpoint>,
    /// Also checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub epochs_completed: u64,
    pub steps: u64,
    pub param_checksum: String,
    pub last: Option<EpochMetrics>,
}

#[derive(Serialize)]
struct ResolvedConfig<'a> {
    train: &'a TrainConfig,
    encoder: &'a EncoderConfig,
}

pub fn checkpoint_path(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join(format!("ckpt-{step}.bin"))
}

/// Trains for `train.epochs` total epochs inside `run_dir`, writing
/// `config.json`, one `metrics.jsonl` line per epoch and `ckpt-{step}.bin`.
/// A resumed run continues at the checkpoint's epoch and appends to the
/// existing metrics.
pub fn train_run(
    dataset: &ParallelDataset,
    encoder: &EncoderConfig,
    train: &TrainConfig,
    run_dir: &Path,
    options: RunOptions,
) -> Result<RunSummary> {
    train.validate()?;
    encoder.validate()?;
    dataset.validate(train.mode.uses_text())?;
    if let Some(d) = dataset.embed_dim() {
        if d != encoder.embed_dim {
            return Err(Error::DimensionMismatch {
                expected: encoder.embed_dim,
                found: d,
                context: "anchor dimension vs encoder embed_dim".into(),
            });
        }
    }
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let _lock = PathLock::acquire(&run_dir.join("run"))?;

    let config_json = serde_json::to_string_pretty(&ResolvedConfig { train, encoder })?;
    fs::write(run_dir.join(CONFIG_FILE), config_json + "\n").map_err(|e| Error::io(run_dir.join(CONFIG_FILE), e))?;

    let (mut params, mut state, mut step, start) = match options.resume {
        Some(ck) => {
            if &ck.encoder != encoder {
                return Err(Error::Config("resume checkpoint was trained with a different encoder config".into()));
            }
            let state = ck.optimizer.unwrap_or_else(|| AdagradState::new(ck.params.tensors()));
            (ck.params, state, ck.step, ck.epoch as usize)
        }
        None => {
            let params = init_params(encoder, train.seed)?;
            let state = AdagradState::new(params.tensors());
            (params, state, 0, 0)
        }
    };

    let metrics_path = run_dir.join(METRICS_FILE);
    let mut metrics = OpenOptions::new()
        .create(true)
        .write(true)
        .append(start > 0)
        .truncate(start == 0)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;

    let mut last = None;
    let mut saved_at = None;
    for epoch in start..train.epochs {
        let report = train_epoch(dataset, &mut params, &mut state, encoder, train, epoch)?;
        step = state.step;
        let record = EpochMetrics::new(epoch, lr_at(epoch, train.learning_rate, train.decay), &report);
        writeln!(metrics, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(&metrics_path, e))?;
        log::info!("epoch {epoch}: l_total = {:.6}", record.l_total);
        last = Some(record);
        if options.checkpoint_every > 0 && (epoch + 1) % options.checkpoint_every == 0 {
            save(run_dir, encoder, train, &params, &state, step, epoch + 1)?;
            saved_at = Some(step);
        }
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;

    let completed = train.epochs.max(start) as u64;
    let checkpoint = checkpoint_path(run_dir, step);
    if saved_at != Some(step) {
        save(run_dir, encoder, train, &params, &state, step, completed as usize)?;
    }
    Ok(RunSummary {
        run_dir: run_dir.to_path_buf(),
        checkpoint,
        epochs_completed: completed,
        steps: step,
        param_checksum: params.checksum(),
        last,
    })
}

fn save(
    run_dir: &Path,
    encoder: &EncoderConfig,
    train: &TrainConfig,
    params: &crate::encoder::EncoderParams,
    state: &AdagradState,
    step: u64,
    epoch: usize,
) -> Result<()> {
    let ck = Checkpoint {
        encoder: encoder.clone(),
        params: params.clone(),
        optimizer: Some(state.clone()),
        train: Some(*train),
        step,
        epoch: epoch as u64,
    };
    save_checkpoint(&checkpoint_path(run_dir, step), &ck)
}
