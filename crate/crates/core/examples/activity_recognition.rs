// Zeroshot, linear-probe and fine-tune classification from an encoder that
// was only ever aligned with video.

use imu_align::encoder::{init_params, EncoderConfig};
use imu_align::evaluate::{
    classification_metrics, fine_tune, init_head, predict, train_probe, zeroshot_predict, ClassifyConfig,
    LabeledSet,
};
use imu_align::signal::{synth_class_anchors, synth_dataset, SynthConfig};
use imu_align::train::{train_epoch, AdagradState, TrainConfig};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let synth = SynthConfig {
        seed: 4,
        n_windows: 48,
        n_classes: 4,
        dim: 32,
        samples: 200,
        noise: 0.05,
    };
    let data = synth_dataset(&synth)?;
    let enc = EncoderConfig::small();
    let cfg = TrainConfig { decay: 0.0, ..Default::default() };
    let mut params = init_params(&enc, 0)?;
    let mut state = AdagradState::new(params.tensors());
    for epoch in 0..30 {
        train_epoch(&data, &mut params, &mut state, &enc, &cfg, epoch)?;
    }

    let set = LabeledSet::from_dataset(&data)?;
    // Text class names never took part in training.
    let classes = synth_class_anchors(synth.seed, synth.n_classes, synth.dim);
    let zs = zeroshot_predict(&set, &params, &enc, &classes)?;

    let budget = ClassifyConfig { epochs: 20, ..Default::default() };
    let head = train_probe(&set, &params, &enc, &budget)?;
    let probe = predict(&set, &params, &enc, &head)?;

    let fresh = init_head(&set.class_names, enc.embed_dim, budget.seed);
    let (tuned, tuned_head) = fine_tune(&set, &params, &enc, &fresh, &budget)?;
    let ft = predict(&set, &tuned, &enc, &tuned_head)?;

    for (name, preds) in [("zeroshot", zs), ("probe", probe), ("finetune", ft)] {
        let m = classification_metrics(&preds, &set.targets, &set.class_names)?;
        println!("{name:9} accuracy {:.3}  macro-F1 {:.3}", m.accuracy, m.macro_f1);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
