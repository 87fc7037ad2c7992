// The default encoder on a 20 s window at 50 Hz.

use imu_align::encoder::{encode, init_params, EncoderConfig};
use imu_align::signal::ImuWindow;
use imu_align::tensor::Tensor;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = EncoderConfig::default();
    let params = init_params(&cfg, 42)?;
    println!("parameters: {}", params.param_count());
    println!("GRU steps for 1000 samples: {}", cfg.output_steps(1000)?);

    let samples = 1000;
    let data = (0..6 * samples)
        .map(|i| {
            let (ch, t) = (i / samples, (i % samples) as f64 / 50.0);
            (t * (1.0 + ch as f64)).sin()
        })
        .collect();
    let window = ImuWindow::new("demo:0", "demo", 0.0, 50.0, Tensor::new(vec![6, samples], data)?)?;
    let z = encode(&window, &params, &cfg)?;
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    println!("embedding: {} dims, norm {norm:.12}", z.len());
    println!("first values: {:?}", &z[..4]);

    // Too short for the conv/pool stack.
    let short = ImuWindow::new("demo:1", "demo", 0.0, 50.0, Tensor::zeros(&[6, 40]))?;
    println!("40 samples: {}", encode(&short, &params, &cfg).unwrap_err());
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
