use super::*;
use crate::encoder::init_params;
use crate::signal::{synth_dataset, SynthConfig};

fn corpus(n: usize, noise: f64) -> ParallelDataset {
    synth_dataset(&SynthConfig {
        seed: 7,
        n_windows: n,
        n_classes: 4,
        dim: 32,
        samples: 200,
        noise,
    })
    .unwrap()
}

fn anchor_digest(ds: &ParallelDataset) -> Vec<u64> {
    ds.video_anchors
        .values()
        .chain(ds.text_anchors.iter().flat_map(|m| m.values()))
        .flat_map(|a| a.vector.iter().map(|v| v.to_bits()))
        .collect()
}

#[test]
fn batches_partition_and_truncate() {
    let b = make_batches(32, 16, 1, 0).unwrap();
    assert_eq!(b.len(), 2);
    let mut all: Vec<usize> = b.concat();
    all.sort_unstable();
    assert_eq!(all, (0..32).collect::<Vec<_>>());

    let b = make_batches(33, 16, 1, 0).unwrap();
    assert_eq!(b.len(), 2);
    assert_eq!(b.concat().len(), 32);

    assert_eq!(make_batches(40, 8, 3, 2).unwrap(), make_batches(40, 8, 3, 2).unwrap());
    assert_ne!(make_batches(40, 8, 3, 2).unwrap(), make_batches(40, 8, 3, 3).unwrap());
    assert!(make_batches(15, 16, 0, 0).is_err());
}

#[test]
fn defaults_carry_the_published_hyperparameters() {
    let v = serde_json::to_value(TrainConfig::default()).unwrap();
    assert_eq!(v["batch_size"], 16);
    assert_eq!(v["learning_rate"], 0.01);
    assert_eq!(v["adagrad_eps"], 1e-8);
    assert_eq!(v["decay"], 0.1);
    assert_eq!(v["temperature"], 0.1);
    assert!(TrainConfig { batch_size: 1, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
}

#[test]
fn loss_decreases_on_noise_free_corpus() {
    let ds = corpus(32, 0.0);
    let enc = EncoderConfig::small();
    let cfg = TrainConfig { seed: 3, ..Default::default() };
    let mut params = init_params(&enc, cfg.seed).unwrap();
    let mut state = AdagradState::new(params.tensors());
    let before = anchor_digest(&ds);
    let losses: Vec<f64> = (0..5)
        .map(|e| train_epoch(&ds, &mut params, &mut state, &enc, &cfg, e).unwrap().l_total.unwrap())
        .collect();
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
    assert_eq!(state.step, 10);
    assert_eq!(anchor_digest(&ds), before);
}

#[test]
fn batch_equal_to_dataset_is_one_step() {
    let ds = corpus(8, 0.05);
    let enc = EncoderConfig::tiny().with_embed_dim(32);
    let cfg = TrainConfig {
        batch_size: 8,
        mode: TrainMode::Ivt,
        ..Default::default()
    };
    let mut params = init_params(&enc, 0).unwrap();
    let mut state = AdagradState::new(params.tensors());
    let r = train_epoch(&ds, &mut params, &mut state, &enc, &cfg, 0).unwrap();
    assert_eq!(state.step, 1);
    let total = r.l_sym_iv.unwrap() + r.l_sym_it.unwrap();
    assert!((r.l_total.unwrap() - total).abs() < 1e-12);
}

#[test]
fn text_mode_requires_text_anchors() {
    let mut ds = corpus(16, 0.05);
    ds.text_anchors = None;
    let enc = EncoderConfig::tiny().with_embed_dim(32);
    let cfg = TrainConfig {
        mode: TrainMode::It,
        ..Default::default()
    };
    let mut params = init_params(&enc, 0).unwrap();
    let mut state = AdagradState::new(params.tensors());
    assert!(train_epoch(&ds, &mut params, &mut state, &enc, &cfg, 0).is_err());
}

#[test]
fn initial_loss_is_near_uniform() {
    let ds = synth_dataset(&SynthConfig {
        seed: 11,
        n_windows: 16,
        n_classes: 16,
        dim: 512,
        samples: 200,
        noise: 0.5,
    })
    .unwrap();
    let enc = EncoderConfig::default();
    let params = init_params(&enc, 1).unwrap();
    let r = evaluate_loss(&ds, &params, &enc, &TrainConfig::default(), 0).unwrap();
    let l = r.l_total.unwrap();
    let log_b = 16f64.ln();
    assert!(l >= 0.5 * log_b && l <= 1.5 * log_b, "{l}");
}

#[test]
fn runs_are_deterministic_and_resumable() {
    let ds = corpus(32, 0.05);
    let enc = EncoderConfig::tiny().with_embed_dim(32);
    let cfg = TrainConfig {
        epochs: 2,
        seed: 5,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    let ra = train_run(&ds, &enc, &cfg, &a, RunOptions::default()).unwrap();
    let rb = train_run(&ds, &enc, &cfg, &b, RunOptions::default()).unwrap();
    assert_eq!(ra.param_checksum, rb.param_checksum);
    assert_eq!(
        std::fs::read(a.join(METRICS_FILE)).unwrap(),
        std::fs::read(b.join(METRICS_FILE)).unwrap()
    );

    let one = TrainConfig { epochs: 1, ..cfg };
    let r1 = train_run(&ds, &enc, &one, &c, RunOptions::default()).unwrap();
    let ck = load_checkpoint(&r1.checkpoint).unwrap();
    assert_eq!(ck.epoch, 1);
    let resume = RunOptions {
        resume: Some(ck),
        ..Default::default()
    };
    let r2 = train_run(&ds, &enc, &cfg, &c, resume).unwrap();
    assert_eq!(r2.param_checksum, ra.param_checksum);
    assert_eq!(r2.steps, ra.steps);
    assert_eq!(
        std::fs::read(a.join(METRICS_FILE)).unwrap(),
        std::fs::read(c.join(METRICS_FILE)).unwrap()
    );
    let line: EpochMetrics =
        serde_json::from_str(std::fs::read_to_string(a.join(METRICS_FILE)).unwrap().lines().nth(1).unwrap()).unwrap();
    assert_eq!(line.epoch, 1);
    assert!(line.l_i2t.is_none() && line.l_i2v.is_some());
}

#[test]
fn embed_dim_must_match_anchors() {
    let ds = corpus(16, 0.05);
    let dir = tempfile::tempdir().unwrap();
    let res = train_run(&ds, &EncoderConfig::tiny(), &TrainConfig::default(), dir.path(), RunOptions::default());
    assert!(matches!(res, Err(Error::DimensionMismatch { .. })));
}
