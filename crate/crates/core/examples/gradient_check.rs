// Compares tape gradients against central finite differences for a few
// kernels and for the whole (tiny) encoder.

use imu_align::encoder::{init_params, EncoderConfig};
use imu_align::tensor::{gradient_check, GruWeights, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let h = 1e-5;

    let conv = gradient_check(
        |t, v| {
            let y = t.conv1d(v[0], v[1], v[2], 2)?;
            let y = t.tanh(y)?;
            t.sum(y)
        },
        &[random(&mut rng, &[3, 12]), random(&mut rng, &[2, 3, 4]), random(&mut rng, &[2])],
        h,
    )?;
    println!("conv1d          max rel err {conv:.2e}");

    let (f, hid) = (3, 4);
    let gru = gradient_check(
        |t, v| {
            let w = GruWeights { w_ih: v[1], w_hh: v[2], b_ih: v[3], b_hh: v[4] };
            let h0 = t.constant(Tensor::zeros(&[hid]));
            let (_, last) = t.gru(v[0], &w, h0)?;
            t.sum_squares(last)
        },
        &[
            random(&mut rng, &[5, f]),
            random(&mut rng, &[3 * hid, f]),
            random(&mut rng, &[3 * hid, hid]),
            random(&mut rng, &[3 * hid]),
            random(&mut rng, &[3 * hid]),
        ],
        h,
    )?;
    println!("gru             max rel err {gru:.2e}");

    // Full encoder: gradient of sum(embedding) with respect to the signal.
    let cfg = EncoderConfig::tiny();
    let params = init_params(&cfg, 1)?;
    let signal = random(&mut rng, &[6, 32]);
    let enc = gradient_check(
        |t, v| {
            let vars = params.register(t, false);
            let e = imu_align::encoder::encode_on_tape(t, &vars, &cfg, v[0])?;
            t.sum(e)
        },
        &[signal],
        h,
    )?;
    println!("encoder (input) max rel err {enc:.2e}");

    assert!(conv.max(gru).max(enc) < 1e-4);
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
