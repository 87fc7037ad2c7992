// Retrieval in all four directions after a short IMU↔video+text run, plus
// an ad-hoc top-k query.

use imu_align::encoder::{encode_batch, init_params, EncoderConfig};
use imu_align::evaluate::{eval_retrieval, top_k, RetrievalDirection};
use imu_align::signal::{synth_dataset, SynthConfig};
use imu_align::train::{train_epoch, AdagradState, TrainConfig, TrainMode};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let data = synth_dataset(&SynthConfig {
        seed: 1,
        n_windows: 64,
        n_classes: 8,
        dim: 32,
        samples: 200,
        noise: 0.1,
    })?;
    let enc = EncoderConfig::small();
    let cfg = TrainConfig { mode: TrainMode::Ivt, decay: 0.0, ..Default::default() };
    let mut params = init_params(&enc, 0)?;
    let mut state = AdagradState::new(params.tensors());
    for epoch in 0..40 {
        train_epoch(&data, &mut params, &mut state, &enc, &cfg, epoch)?;
    }

    let emb = encode_batch(&data.windows, &params, &enc)?;
    let imu: Vec<_> = data.windows.iter().map(|w| w.window_id.clone()).zip(emb).collect();
    let text = data.text_anchors.as_ref().unwrap();
    for (dir, anchors) in [
        (RetrievalDirection::TextToImu, text),
        (RetrievalDirection::ImuToText, text),
        (RetrievalDirection::ImuToVideo, &data.video_anchors),
        (RetrievalDirection::VideoToImu, &data.video_anchors),
    ] {
        println!("{}", serde_json::to_string(&eval_retrieval(&imu, anchors, dir)?)?);
    }

    let query = &text[&imu[5].0].vector;
    for (id, score) in top_k(query, &imu, 3)? {
        println!("{id}  {score:.4}");
    }
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
