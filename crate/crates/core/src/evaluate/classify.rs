use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{fixed6, fixed6_map};
use crate::encoder::{encode_batch, encode_on_tape, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::signal::{ImuWindow, LabelSet, ParallelDataset};
use crate::tensor::{Tape, Tensor};
use crate::train::{adagrad_step, make_batches, AdagradState};

/// Windows paired with class indices into `class_names`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub windows: Vec<ImuWindow>,
    pub targets: Vec<usize>,
    pub class_names: Vec<String>,
}

impl LabeledSet {
    pub fn from_dataset(dataset: &ParallelDataset) -> Result<Self> {
        let indices = dataset.labeled_indices()?;
        Ok(LabeledSet {
            windows: indices.iter().map(|&(i, _)| dataset.windows[i].clone()).collect(),
            targets: indices.iter().map(|&(_, c)| c).collect(),
            class_names: dataset.class_names.clone().unwrap_or_default(),
        })
    }

    /// Keeps the windows that have a label, in window order.
    pub fn from_labels(windows: Vec<ImuWindow>, labels: &LabelSet) -> Result<Self> {
        let mut kept = Vec::new();
        let mut targets = Vec::new();
        for w in windows {
            if let Some(name) = labels.labels.get(&w.window_id) {
                let c = labels
                    .classes
                    .iter()
                    .position(|k| k == name)
                    .ok_or_else(|| Error::UnknownClass(name.clone()))?;
                kept.push(w);
                targets.push(c);
            }
        }
        if kept.is_empty() {
            return Err(Error::Config("no window has a label".into()));
        }
        Ok(LabeledSet {
            windows: kept,
            targets,
            class_names: labels.classes.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    fn require_two_classes(&self, op: &'static str) -> Result<()> {
        let first = self.targets.first().copied();
        if self.targets.iter().all(|&t| Some(t) == first) {
            return Err(Error::invalid(op, "labeled data covers fewer than two classes"));
        }
        Ok(())
    }
}

/// Linear layer from the unit-norm embedding to class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub class_names: Vec<String>,
    /// `classes × D`
    pub weight: Tensor,
    /// `classes`
    pub bias: Tensor,
}

#[derive(Serialize, Deserialize)]
struct HeadFile {
    class_names: Vec<String>,
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl Serialize for ClassifierHead {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let c = self.class_names.len();
        HeadFile {
            class_names: self.class_names.clone(),
            weight: (0..c).map(|i| self.weight.row(i).to_vec()).collect(),
            bias: self.bias.data().to_vec(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ClassifierHead {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let f = HeadFile::deserialize(d)?;
        if f.weight.len() != f.class_names.len() || f.bias.len() != f.class_names.len() {
            return Err(D::Error::custom("head weight/bias rows must match the class count"));
        }
        Ok(ClassifierHead {
            class_names: f.class_names,
            weight: Tensor::from_rows(&f.weight).map_err(D::Error::custom)?,
            bias: Tensor::vector(f.bias),
        })
    }
}

impl ClassifierHead {
    pub fn logits(&self, embedding: &[f64]) -> Vec<f64> {
        (0..self.class_names.len())
            .map(|c| self.bias.data()[c] + self.weight.row(c).iter().zip(embedding).map(|(w, e)| w * e).sum::<f64>())
            .collect()
    }

    /// Highest-logit class; ties go to the earlier class.
    pub fn predict(&self, embedding: &[f64]) -> usize {
        argmax_first(&self.logits(embedding))
    }
}

fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Weights ~ U(±1/√D), zero bias.
pub fn init_head(class_names: &[String], dim: usize, seed: u64) -> ClassifierHead {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (dim as f64).sqrt();
    let c = class_names.len();
    let data = (0..c * dim).map(|_| rng.gen_range(-bound..=bound)).collect();
    ClassifierHead {
        class_names: class_names.to_vec(),
        weight: Tensor::new(vec![c, dim], data).expect("shape matches length"),
        bias: Tensor::zeros(&[c]),
    }
}

/// Nearest class anchor by inner product; ties go to the earlier class.
pub fn zeroshot_classify(embedding: &[f64], class_anchors: &[(String, Vec<f64>)]) -> Result<usize> {
    if class_anchors.is_empty() {
        return Err(Error::invalid("zeroshot_classify", "no class anchors"));
    }
    if let Some((name, v)) = class_anchors.iter().find(|(_, v)| v.len() != embedding.len()) {
        return Err(Error::DimensionMismatch {
            expected: embedding.len(),
            found: v.len(),
            context: format!("class anchor {name}"),
        });
    }
    let scores: Vec<f64> = class_anchors
        .iter()
        .map(|(_, v)| v.iter().zip(embedding).map(|(a, b)| a * b).sum())
        .collect();
    Ok(argmax_first(&scores))
}

pub fn zeroshot_predict(
    set: &LabeledSet,
    params: &EncoderParams,
    encoder: &EncoderConfig,
    class_anchors: &[(String, Vec<f64>)],
) -> Result<Vec<usize>> {
    encode_batch(&set.windows, params, encoder)?
        .iter()
        .map(|e| zeroshot_classify(e, class_anchors))
        .collect()
}

pub fn predict(set: &LabeledSet, params: &EncoderParams, encoder: &EncoderConfig, head: &ClassifierHead) -> Result<Vec<usize>> {
    Ok(encode_batch(&set.windows, params, encoder)?
        .iter()
        .map(|e| head.predict(e))
        .collect())
}

/// Budget for probing and fine-tuning. Both use softmax cross-entropy and
/// Adagrad at a constant learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adagrad_eps: f64,
    /// Seeds the head initialization and the batch shuffle.
    pub seed: u64,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        ClassifyConfig {
            epochs: 50,
            batch_size: 16,
            learning_rate: 0.05,
            adagrad_eps: 1e-8,
            seed: 0,
        }
    }
}

impl ClassifyConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) || !(self.adagrad_eps > 0.0) {
            return Err(Error::Config("learning_rate must be ≥ 0 and adagrad_eps > 0".into()));
        }
        Ok(())
    }
}

/// Shared supervised loop. With `encoder` present the encoder is trained
/// jointly (fine-tuning); otherwise `frozen` holds precomputed embeddings.
fn supervised_loop(
    set: &LabeledSet,
    mut encoder: Option<(&mut EncoderParams, &EncoderConfig)>,
    frozen: &[Vec<f64>],
    head: &mut ClassifierHead,
    config: &ClassifyConfig,
) -> Result<()> {
    let batch = config.batch_size.min(set.len());
    let mut state = {
        let mut shapes: Vec<&Tensor> = encoder.as_ref().map(|(p, _)| p.tensors()).unwrap_or_default();
        shapes.extend([&head.weight, &head.bias]);
        AdagradState::new(shapes)
    };
    for epoch in 0..config.epochs {
        for (k, idx) in make_batches(set.len(), batch, config.seed, epoch)?.iter().enumerate() {
            let mut tape = Tape::new();
            let w = tape.param(head.weight.clone());
            let b = tape.param(head.bias.clone());
            let enc_vars = encoder.as_ref().map(|(p, _)| p.register(&mut tape, true));
            let mut rows = Vec::with_capacity(idx.len());
            for &i in idx {
                let e = match (&enc_vars, &encoder) {
                    (Some(vars), Some((_, cfg))) => {
                        let s = tape.constant(set.windows[i].signal.clone());
                        encode_on_tape(&mut tape, vars, cfg, s)?
                    }
                    _ => tape.constant(Tensor::vector(frozen[i].clone())),
                };
                rows.push(tape.linear(e, w, b)?);
            }
            let logits = tape.stack(&rows)?;
            let targets: Vec<usize> = idx.iter().map(|&i| set.targets[i]).collect();
            let loss = tape.softmax_cross_entropy(logits, &targets)?;
            if !tape.value(loss).is_finite() {
                return Err(Error::NonFinite {
                    context: format!("classification loss at epoch {epoch}, batch {k}"),
                });
            }
            tape.backward(loss)?;
            let mut vars = enc_vars.as_ref().map(|v| v.all()).unwrap_or_default();
            vars.extend([w, b]);
            let grads: Vec<Vec<f64>> = vars
                .iter()
                .map(|&v| tape.grad(v).map_or_else(|| vec![0.0; tape.value(v).numel()], <[f64]>::to_vec))
                .collect();
            let mut tensors: Vec<&mut Tensor> = match encoder.as_mut() {
                Some((p, _)) => p.tensors_mut(),
                None => Vec::new(),
            };
            tensors.push(&mut head.weight);
            tensors.push(&mut head.bias);
            adagrad_step(&mut tensors, &grads, &mut state, config.learning_rate, config.adagrad_eps)?;
        }
    }
    Ok(())
}

/// Trains a linear head on frozen embeddings. The encoder is only borrowed
/// immutably, so it cannot change.
pub fn train_probe(
    set: &LabeledSet,
    params: &EncoderParams,
    encoder: &EncoderConfig,
    config: &ClassifyConfig,
) -> Result<ClassifierHead> {
    config.validate()?;
    set.require_two_classes("train_probe")?;
    let embeddings = encode_batch(&set.windows, params, encoder)?;
    let mut head = init_head(&set.class_names, encoder.embed_dim, config.seed);
    supervised_loop(set, None, &embeddings, &mut head, config)?;
    Ok(head)
}

/// Jointly trains a copy of the encoder and the head.
pub fn fine_tune(
    set: &LabeledSet,
    params: &EncoderParams,
    encoder: &EncoderConfig,
    head: &ClassifierHead,
    config: &ClassifyConfig,
) -> Result<(EncoderParams, ClassifierHead)> {
    config.validate()?;
    set.require_two_classes("fine_tune")?;
    let mut params = params.clone();
    let mut head = head.clone();
    supervised_loop(set, Some((&mut params, encoder)), &[], &mut head, config)?;
    if !params.is_finite() {
        return Err(Error::NonFinite {
            context: "encoder parameters after fine-tuning".into(),
        });
    }
    Ok((params, head))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    #[serde(serialize_with = "fixed6")]
    pub accuracy: f64,
    #[serde(serialize_with = "fixed6")]
    pub macro_f1: f64,
    #[serde(serialize_with = "fixed6_map")]
    pub per_class_f1: BTreeMap<String, f64>,
    pub n: usize,
}

/// Accuracy and macro-F1; a class absent from both predictions and golds
/// scores F1 = 0.
pub fn classification_metrics(
    predictions: &[usize],
    golds: &[usize],
    class_names: &[String],
) -> Result<ClassificationMetrics> {
    if predictions.len() != golds.len() {
        return Err(Error::DimensionMismatch {
            expected: golds.len(),
            found: predictions.len(),
            context: "predictions vs gold labels".into(),
        });
    }
    if golds.is_empty() || class_names.is_empty() {
        return Err(Error::invalid("classification_metrics", "no predictions or no classes"));
    }
    let c = class_names.len();
    if let Some(&bad) = predictions.iter().chain(golds).find(|&&k| k >= c) {
        return Err(Error::invalid(
            "classification_metrics",
            format!("class index {bad} out of {c}"),
        ));
    }
    let (mut tp, mut fp, mut fneg) = (vec![0usize; c], vec![0usize; c], vec![0usize; c]);
    for (&p, &g) in predictions.iter().zip(golds) {
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[g] += 1;
        }
    }
    let f1: Vec<f64> = (0..c)
        .map(|k| {
            let denom = 2 * tp[k] + fp[k] + fneg[k];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[k] as f64 / denom as f64
            }
        })
        .collect();
    Ok(ClassificationMetrics {
        accuracy: tp.iter().sum::<usize>() as f64 / golds.len() as f64,
        macro_f1: f1.iter().sum::<f64>() / c as f64,
        per_class_f1: class_names.iter().cloned().zip(f1).collect(),
        n: golds.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_params;
    use crate::signal::{synth_dataset, SynthConfig};

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| ["a", "b", "c", "d"][i].to_string()).collect()
    }

    #[test]
    fn metrics_hand_confusion_matrix() {
        let m = classification_metrics(&[0, 1, 1, 1], &[0, 0, 1, 1], &names(2)).unwrap();
        assert_eq!(m.accuracy, 0.75);
        assert!((m.per_class_f1["a"] - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.per_class_f1["b"] - 0.8).abs() < 1e-12);
        assert!((m.macro_f1 - 0.733333).abs() < 1e-6);

        let m = classification_metrics(&[1, 0], &[1, 0], &names(2)).unwrap();
        assert_eq!((m.accuracy, m.macro_f1), (1.0, 1.0));
        let m = classification_metrics(&[0, 0, 0, 0], &[0, 0, 1, 1], &names(2)).unwrap();
        assert_eq!(m.accuracy, 0.5);
        let m = classification_metrics(&[0, 1], &[0, 1], &names(3)).unwrap();
        assert!((m.macro_f1 - 2.0 / 3.0).abs() < 1e-12, "absent class scores zero");
        assert!(classification_metrics(&[0], &[0, 1], &names(2)).is_err());

        let s = serde_json::to_string(&classification_metrics(&[0, 1, 1, 1], &[0, 0, 1, 1], &names(2)).unwrap()).unwrap();
        assert_eq!(
            s,
            r#"{"accuracy":0.750000,"macro_f1":0.733333,"per_class_f1":{"a":0.666667,"b":0.800000},"n":4}"#
        );
    }

    #[test]
    fn zeroshot_examples() {
        let anchors = vec![
            ("x".to_string(), vec![1.0, 0.0]),
            ("y".to_string(), vec![0.0, 1.0]),
        ];
        assert_eq!(zeroshot_classify(&[0.0, 1.0], &anchors).unwrap(), 1);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_eq!(zeroshot_classify(&[h, h], &anchors).unwrap(), 0);
        assert!(zeroshot_classify(&[1.0, 0.0], &[]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let anchors: Vec<_> = (0..5)
                .map(|i| (i.to_string(), (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>()))
                .collect();
            let e: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let brute = (0..5)
                .max_by(|&a, &b| {
                    let s = |k: usize| anchors[k].1.iter().zip(&e).map(|(x, y)| x * y).sum::<f64>();
                    s(a).partial_cmp(&s(b)).unwrap().then(b.cmp(&a))
                })
                .unwrap();
            assert_eq!(zeroshot_classify(&e, &anchors).unwrap(), brute);
        }
    }

    fn fixture() -> (LabeledSet, EncoderParams, EncoderConfig) {
        let ds = synth_dataset(&SynthConfig {
            seed: 3,
            n_windows: 16,
            n_classes: 2,
            dim: 8,
            samples: 32,
            noise: 0.05,
        })
        .unwrap();
        let enc = EncoderConfig::tiny();
        (LabeledSet::from_dataset(&ds).unwrap(), init_params(&enc, 1).unwrap(), enc)
    }

    #[test]
    fn probe_leaves_encoder_alone_and_zero_epochs_is_init() {
        let (set, params, enc) = fixture();
        let before = params.checksum();
        let cfg = ClassifyConfig { epochs: 0, ..Default::default() };
        let head = train_probe(&set, &params, &enc, &cfg).unwrap();
        assert_eq!(head, init_head(&set.class_names, enc.embed_dim, cfg.seed));
        let head = train_probe(&set, &params, &enc, &ClassifyConfig { epochs: 5, ..cfg }).unwrap();
        assert_ne!(head, init_head(&set.class_names, enc.embed_dim, cfg.seed));
        assert_eq!(params.checksum(), before);
    }

    #[test]
    fn probe_separates_separable_embeddings() {
        // Embeddings are constants, so a direct head fit on a separable
        // fixture exercises the loop without the encoder.
        let set = LabeledSet {
            windows: vec![],
            targets: (0..20).map(|i| i % 2).collect(),
            class_names: names(2),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let embs: Vec<Vec<f64>> = set
            .targets
            .iter()
            .map(|&t| {
                let s = if t == 0 { 1.0 } else { -1.0 };
                vec![s * rng.gen_range(0.2..1.0), rng.gen_range(-1.0..1.0)]
            })
            .collect();
        let mut head = init_head(&set.class_names, 2, 0);
        let set = LabeledSet {
            windows: vec![ImuWindow::new("x", "s", 0.0, 1.0, Tensor::zeros(&[6, 1])).unwrap(); 20],
            ..set
        };
        supervised_loop(&set, None, &embs, &mut head, &ClassifyConfig { epochs: 100, ..Default::default() }).unwrap();
        let correct = embs.iter().zip(&set.targets).filter(|(e, &t)| head.predict(e) == t).count();
        assert_eq!(correct, 20);
    }

    #[test]
    fn fine_tune_no_op_and_determinism() {
        let (set, params, enc) = fixture();
        let head = init_head(&set.class_names, enc.embed_dim, 0);
        let frozen = ClassifyConfig {
            epochs: 2,
            learning_rate: 0.0,
            ..Default::default()
        };
        let (p, h) = fine_tune(&set, &params, &enc, &head, &frozen).unwrap();
        assert_eq!(p.checksum(), params.checksum());
        assert_eq!(h, head);

        let cfg = ClassifyConfig { epochs: 2, ..Default::default() };
        let a = fine_tune(&set, &params, &enc, &head, &cfg).unwrap();
        let b = fine_tune(&set, &params, &enc, &head, &cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0.checksum(), params.checksum());
    }

    #[test]
    fn single_class_is_rejected() {
        let (mut set, params, enc) = fixture();
        set.targets.iter_mut().for_each(|t| *t = 0);
        assert!(train_probe(&set, &params, &enc, &ClassifyConfig::default()).is_err());
        let head = init_head(&set.class_names, enc.embed_dim, 0);
        assert!(fine_tune(&set, &params, &enc, &head, &ClassifyConfig::default()).is_err());
    }

    #[test]
    fn head_json_round_trip() {
        let head = init_head(&names(3), 4, 2);
        let s = serde_json::to_string(&head).unwrap();
        let back: ClassifierHead = serde_json::from_str(&s).unwrap();
        assert_eq!(back, head);
        assert!(serde_json::from_str::<ClassifierHead>(r#"{"class_names":["a"],"weight":[],"bias":[0.0]}"#).is_err());
    }
}
