//! The contrastive pre-training loop: in-batch negatives, Adagrad with an
//! inverse-time learning-rate decay, checkpoints and run directories.
//!
//! Anchors enter every batch as tape constants, so they are frozen by
//! construction; only encoder parameters receive gradients.

mod adagrad;
mod checkpoint;
mod run;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{Direction, LossReport, SymmetricLoss};
use crate::encoder::{encode_on_tape, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::signal::ParallelDataset;
use crate::tensor::{Tape, Tensor, Var};

pub use adagrad::{adagrad_step, lr_at, AdagradState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use run::{checkpoint_path, train_run, EpochMetrics, RunOptions, RunSummary, CONFIG_FILE, METRICS_FILE};

/// Which anchor modalities the IMU encoder is aligned to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// IMU ↔ video.
    Iv,
    /// IMU ↔ text.
    It,
    /// IMU ↔ video and IMU ↔ text, losses summed.
    Ivt,
}

impl TrainMode {
    pub fn uses_video(self) -> bool {
        matches!(self, TrainMode::Iv | TrainMode::Ivt)
    }

    pub fn uses_text(self) -> bool {
        matches!(self, TrainMode::It | TrainMode::Ivt)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adagrad_eps: f64,
    /// Inverse-time learning-rate decay per epoch.
    pub decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 0.01,
            adagrad_eps: 1e-8,
            decay: 0.1,
            epochs: 10,
            seed: 0,
            mode: TrainMode::Iv,
            temperature: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 for in-batch negatives, got {}",
                self.batch_size
            )));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("adagrad_eps", self.adagrad_eps),
            ("temperature", self.temperature),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.decay >= 0.0 && self.decay.is_finite()) {
            return Err(Error::Config(format!("decay must be non-negative, got {}", self.decay)));
        }
        Ok(())
    }
}

/// Shuffles `0..n` with a generator keyed by `(seed, epoch)` and cuts it into
/// batches of `batch_size`, dropping the trailing partial batch.
pub fn make_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || n < batch_size {
        return Err(Error::invalid(
            "make_batches",
            format!("dataset of {n} items cannot fill a batch of {batch_size}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    Ok(order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect())
}

fn anchor_matrix<'a>(ids: impl Iterator<Item = &'a str>, lookup: impl Fn(&str) -> Option<&'a [f64]>, what: &str) -> Result<Tensor> {
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for id in ids {
        match lookup(id) {
            Some(v) => rows.push(v.to_vec()),
            None => missing.push(id.to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingIds {
            what: format!("{what} anchor"),
            ids: missing,
        });
    }
    Tensor::from_rows(&rows)
}

fn symmetric_on_tape(tape: &mut Tape, imu: Var, anchors: Var, temperature: f64) -> Result<(Var, SymmetricLoss)> {
    let sims = tape.matmul_nt(imu, anchors)?;
    let fwd = tape.info_nce(sims, temperature, Direction::RowToCol)?;
    let bwd = tape.info_nce(sims, temperature, Direction::ColToRow)?;
    let sum = tape.add(fwd, bwd)?;
    let sym = tape.scale(sum, 0.5)?;
    let (f, b) = (tape.value(fwd).data()[0], tape.value(bwd).data()[0]);
    Ok((
        sym,
        SymmetricLoss {
            forward: f,
            backward: b,
            symmetric: tape.value(sym).data()[0],
        },
    ))
}

/// Forward pass and loss for one batch on a fresh tape. Returns the tape, the
/// loss variable, the parameter variables and the loss report.
fn batch_loss(
    dataset: &ParallelDataset,
    batch: &[usize],
    params: &EncoderParams,
    encoder: &EncoderConfig,
    config: &TrainConfig,
) -> Result<(Tape, Var, Vec<Var>, LossReport)> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, true);
    let mut rows = Vec::with_capacity(batch.len());
    for &i in batch {
        let signal = tape.constant(dataset.windows[i].signal.clone());
        rows.push(encode_on_tape(&mut tape, &vars, encoder, signal)?);
    }
    let imu = tape.stack(&rows)?;
    let ids = || batch.iter().map(|&i| dataset.windows[i].window_id.as_str());

    let mut total: Option<Var> = None;
    let mut report = LossReport::default();
    if config.mode.uses_video() {
        let a = anchor_matrix(ids(), |id| dataset.video_anchor(id), "video")?;
        let a = tape.constant(a);
        let (loss, parts) = symmetric_on_tape(&mut tape, imu, a, config.temperature)?;
        report = LossReport::from_video(parts);
        total = Some(loss);
    }
    if config.mode.uses_text() {
        let a = anchor_matrix(ids(), |id| dataset.text_anchor(id), "text")?;
        let a = tape.constant(a);
        let (loss, parts) = symmetric_on_tape(&mut tape, imu, a, config.temperature)?;
        let text = LossReport::from_text(parts);
        report.l_i2t = text.l_i2t;
        report.l_t2i = text.l_t2i;
        report.l_sym_it = text.l_sym_it;
        total = Some(match total {
            Some(v) => tape.add(v, loss)?,
            None => loss,
        });
    }
    let total = total.expect("every mode aligns at least one modality");
    report.l_total = Some(tape.value(total).data()[0]);
    Ok((tape, total, vars.all(), report))
}

/// Mean contrastive loss of the current parameters over the epoch's batches,
/// without updating anything.
pub fn evaluate_loss(
    dataset: &ParallelDataset,
    params: &EncoderParams,
    encoder: &EncoderConfig,
    config: &TrainConfig,
    epoch: usize,
) -> Result<LossReport> {
    let reports = make_batches(dataset.len(), config.batch_size, config.seed, epoch)?
        .iter()
        .map(|batch| batch_loss(dataset, batch, params, encoder, config).map(|r| r.3))
        .collect::<Result<Vec<_>>>()?;
    Ok(LossReport::mean(&reports))
}

/// One pass over the dataset: for every batch, encode, score against the
/// frozen anchors, back-propagate the mode's loss and take an Adagrad step at
/// `lr_at(epoch)`. Returns the mean of the per-batch losses.
pub fn train_epoch(
    dataset: &ParallelDataset,
    params: &mut EncoderParams,
    state: &mut AdagradState,
    encoder: &EncoderConfig,
    config: &TrainConfig,
    epoch: usize,
) -> Result<LossReport> {
    config.validate()?;
    dataset.validate(config.mode.uses_text())?;
    let lr = lr_at(epoch, config.learning_rate, config.decay);
    let batches = make_batches(dataset.len(), config.batch_size, config.seed, epoch)?;
    let mut reports = Vec::with_capacity(batches.len());
    for (k, batch) in batches.iter().enumerate() {
        let (mut tape, loss, vars, report) = batch_loss(dataset, batch, params, encoder, config)?;
        if report.fields().iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("loss at epoch {epoch}, batch {k}: {report:?}"),
            });
        }
        tape.backward(loss)?;
        let grads: Vec<Vec<f64>> = vars
            .iter()
            .map(|&v| tape.grad(v).map_or_else(|| vec![0.0; tape.value(v).numel()], <[f64]>::to_vec))
            .collect();
        adagrad_step(&mut params.tensors_mut(), &grads, state, lr, config.adagrad_eps).map_err(|e| match e {
            Error::NonFinite { context } => Error::NonFinite {
                context: format!("{context} (epoch {epoch}, batch {k})"),
            },
            other => other,
        })?;
        if !params.is_finite() {
            return Err(Error::NonFinite {
                context: format!("parameters after epoch {epoch}, batch {k}"),
            });
        }
        reports.push(report);
    }
    Ok(LossReport::mean(&reports))
}

#[cfg(test)]
mod tests;
