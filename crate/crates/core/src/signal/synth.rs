//! Deterministic synthetic corpora with class-conditioned motion and
//! correlated video/text anchors.
//!
//! Each class gets a base oscillation (frequency, amplitude, per-channel
//! phase) and a pair of anchor centroids: a video centroid and a text
//! centroid that shares most of its direction. Each window additionally
//! carries a latent style vector that sets the amplitudes of two extra
//! oscillations in every channel and, through a fixed projection, perturbs
//! both its anchors (scaled by `noise`). Within-class anchor differences are
//! therefore recoverable from the IMU signal alone.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::anchors::{normalize_in_place, write_anchor_embeddings, write_labels, AnchorEmbedding, LabelSet};
use super::dataset::ParallelDataset;
use super::stream::{write_imu_stream, ImuSample, ImuStream};
use super::window::{ImuWindow, CHANNELS};
use crate::contrastive::Modality;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Timestamp rate of synthetic windows.
pub const SYNTH_RATE_HZ: f64 = 50.0;
pub const SYNTH_SOURCE: &str = "synth";

/// Weight of the text-specific direction mixed into each text centroid.
const TEXT_SHIFT: f64 = 0.5;
const STYLE_DIMS: usize = 2 * CHANNELS;
const STYLE_AMPLITUDE: f64 = 0.4;
const STYLE_FREQS_HZ: [f64; 2] = [3.1, 5.3];
const SENSOR_NOISE: f64 = 0.05;
const GRAVITY: f64 = 9.81;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_windows: usize,
    pub n_classes: usize,
    pub dim: usize,
    /// Samples per window.
    pub samples: usize,
    /// Scale of the per-window anchor perturbation.
    pub noise: f64,
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_windows < self.n_classes {
            return Err(Error::invalid(
                "synth_dataset",
                format!("need n_windows ({}) ≥ n_classes ({}) ≥ 1", self.n_windows, self.n_classes),
            ));
        }
        if self.dim == 0 || self.samples == 0 {
            return Err(Error::invalid("synth_dataset", "dim and samples must be positive"));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::invalid("synth_dataset", "noise must be a finite non-negative number"));
        }
        Ok(())
    }
}

pub fn class_name(c: usize) -> String {
    format!("class_{c}")
}

pub fn window_id(index: usize, samples: usize) -> String {
    format!("{SYNTH_SOURCE}:{}", index * samples)
}

struct ClassSignature {
    freq_hz: f64,
    amplitude: f64,
    phases: [f64; CHANNELS],
    video: Vec<f64>,
    text: Vec<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    normalize_in_place(&mut v).expect("gaussian vector is non-zero");
    v
}

/// Class signatures and the style projection depend only on
/// `(seed, n_classes, dim)`, so class anchors can be regenerated without
/// the windows.
fn signatures(seed: u64, n_classes: usize, dim: usize) -> (Vec<ClassSignature>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let classes = (0..n_classes)
        .map(|c| {
            let video = unit(gaussian(&mut rng, dim));
            let shift = unit(gaussian(&mut rng, dim));
            let text = unit(video.iter().zip(&shift).map(|(v, s)| v + TEXT_SHIFT * s).collect());
            let mut phases = [0.0; CHANNELS];
            phases.iter_mut().for_each(|p| *p = rng.gen_range(0.0..2.0 * PI));
            ClassSignature {
                freq_hz: 0.5 + 4.0 * c as f64 / n_classes as f64,
                amplitude: 1.0 + 0.5 * (c % 3) as f64,
                phases,
                video,
                text,
            }
        })
        .collect();
    // dim × STYLE_DIMS, scaled so a standard-normal latent maps to a vector
    // of expected squared norm `dim`.
    let scale = 1.0 / (STYLE_DIMS as f64).sqrt();
    let projection = (0..dim)
        .map(|_| gaussian(&mut rng, STYLE_DIMS).into_iter().map(|x| x * scale).collect())
        .collect();
    (classes, projection)
}

/// Text-modality class anchors (one per class, in class order), the
/// zero-shot vocabulary matching [`synth_dataset`] with the same seed.
pub fn synth_class_anchors(seed: u64, n_classes: usize, dim: usize) -> Vec<(String, Vec<f64>)> {
    signatures(seed, n_classes, dim)
        .0
        .into_iter()
        .enumerate()
        .map(|(c, s)| (class_name(c), s.text))
        .collect()
}

/// Builds a labeled corpus with video and text anchors. Window `i` belongs to
/// class `i mod n_classes`.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<ParallelDataset> {
    cfg.validate()?;
    let (classes, projection) = signatures(cfg.seed, cfg.n_classes, cfg.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let mut windows = Vec::with_capacity(cfg.n_windows);
    let mut video = BTreeMap::new();
    let mut text = BTreeMap::new();
    let mut labels = BTreeMap::new();
    for i in 0..cfg.n_windows {
        let c = i % cfg.n_classes;
        let sig = &classes[c];
        let id = window_id(i, cfg.samples);

        let style = gaussian(&mut rng, STYLE_DIMS);
        let offset_dir: Vec<f64> = projection
            .iter()
            .map(|row| row.iter().zip(&style).map(|(a, b)| a * b).sum())
            .collect();
        let jitter = rng.gen_range(-0.3..0.3);

        let mut data = vec![0.0; CHANNELS * cfg.samples];
        for ch in 0..CHANNELS {
            let gain = if ch < 3 { 1.0 } else { 0.5 };
            let offset = if ch == 2 { GRAVITY } else { 0.0 };
            for t in 0..cfg.samples {
                let secs = t as f64 / SYNTH_RATE_HZ;
                let base = sig.amplitude * gain * (2.0 * PI * sig.freq_hz * secs + sig.phases[ch] + jitter).sin();
                let extra = STYLE_AMPLITUDE
                    * (style[2 * ch] * (2.0 * PI * STYLE_FREQS_HZ[0] * secs).sin()
                        + style[2 * ch + 1] * (2.0 * PI * STYLE_FREQS_HZ[1] * secs).cos());
                let eps: f64 = rng.sample(StandardNormal);
                data[ch * cfg.samples + t] = offset + base + extra + SENSOR_NOISE * eps;
            }
        }
        windows.push(ImuWindow::new(
            id.clone(),
            SYNTH_SOURCE,
            (i * cfg.samples) as f64 / SYNTH_RATE_HZ,
            SYNTH_RATE_HZ,
            Tensor::new(vec![CHANNELS, cfg.samples], data)?,
        )?);

        let perturb = |centroid: &[f64]| {
            if cfg.noise == 0.0 {
                return centroid.to_vec();
            }
            unit(centroid.iter().zip(&offset_dir).map(|(m, z)| m + cfg.noise * z).collect())
        };
        video.insert(
            id.clone(),
            AnchorEmbedding {
                window_id: id.clone(),
                modality: Modality::Video,
                vector: perturb(&sig.video),
            },
        );
        text.insert(
            id.clone(),
            AnchorEmbedding {
                window_id: id.clone(),
                modality: Modality::Text,
                vector: perturb(&sig.text),
            },
        );
        labels.insert(id, class_name(c));
    }

    Ok(ParallelDataset {
        windows,
        video_anchors: video,
        text_anchors: Some(text),
        labels: Some(labels),
        class_names: Some((0..cfg.n_classes).map(class_name).collect()),
    })
}

/// File names written by [`write_corpus`].
pub mod files {
    /// The stem matches the synthetic source id, which ingestion derives from the file name.
    pub const IMU: &str = "synth.csv";
    pub const VIDEO: &str = "video_anchors.jsonl";
    pub const TEXT: &str = "text_anchors.jsonl";
    pub const LABELS: &str = "labels.jsonl";
    pub const CLASS_ANCHORS: &str = "class_anchors.jsonl";
}

/// Writes a synthetic dataset as a corpus on disk: one IMU CSV holding all
/// windows back to back, anchor files, labels and class anchors. Ingesting
/// the CSV at [`SYNTH_RATE_HZ`] with window = stride = `samples / rate`
/// reproduces the same window ids.
pub fn write_corpus(dataset: &ParallelDataset, class_anchors: &[(String, Vec<f64>)], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut samples = Vec::new();
    for w in &dataset.windows {
        let n = w.samples();
        let start = (w.start_s * w.sample_rate_hz).round() as usize;
        for t in 0..n {
            let c: Vec<f64> = (0..CHANNELS).map(|ch| w.signal.data()[ch * n + t]).collect();
            samples.push(ImuSample {
                t: (start + t) as f64 / w.sample_rate_hz,
                accel: [c[0], c[1], c[2]],
                gyro: [c[3], c[4], c[5]],
            });
        }
    }
    let stream = ImuStream::new(SYNTH_SOURCE, samples)?;
    write_imu_stream(&stream, &dir.join(files::IMU))?;
    write_anchor_embeddings(&dir.join(files::VIDEO), dataset.video_anchors.values())?;
    if let Some(text) = &dataset.text_anchors {
        write_anchor_embeddings(&dir.join(files::TEXT), text.values())?;
    }
    if let (Some(labels), Some(classes)) = (&dataset.labels, &dataset.class_names) {
        write_labels(
            &dir.join(files::LABELS),
            &LabelSet {
                classes: classes.clone(),
                labels: labels.clone(),
            },
        )?;
    }
    let class_records: Vec<AnchorEmbedding> = class_anchors
        .iter()
        .map(|(name, v)| AnchorEmbedding {
            window_id: name.clone(),
            modality: Modality::Text,
            vector: v.clone(),
        })
        .collect();
    write_anchor_embeddings(&dir.join(files::CLASS_ANCHORS), &class_records)
}
