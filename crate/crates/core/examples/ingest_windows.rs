// Raw CSV → uniform resampling → fixed windows → content-keyed cache.

use imu_align::signal::{
    cache_key, load_imu_stream, make_windows, read_cache, resample, write_cache, write_imu_stream, ImuSample,
    ImuStream, WindowCache, WindowParams,
};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let csv = dir.path().join("walk.csv");

    // 10 s of slightly jittered 100 Hz samples.
    let samples = (0..1000)
        .map(|i| {
            let t = i as f64 / 100.0 + if i % 2 == 1 { 0.002 } else { 0.0 };
            ImuSample {
                t,
                accel: [(2.0 * t).sin(), (3.0 * t).cos(), 9.81],
                gyro: [0.1 * t, 0.0, -0.1 * t],
            }
        })
        .collect();
    write_imu_stream(&ImuStream::new("walk", samples)?, &csv)?;

    let stream = load_imu_stream(&csv)?;
    println!("{}: {} samples, ~{:.1} Hz", stream.source_id, stream.len(), stream.sample_rate_hz);
    let uniform = resample(&stream, 50.0)?;
    let windows = make_windows(&uniform, 5.0, 2.5)?;
    for w in &windows {
        println!("  {} starts at {:.1} s, {} samples", w.window_id, w.start_s, w.samples());
    }

    let params = WindowParams { window_s: 5.0, stride_s: 2.5, rate_hz: 50.0 };
    let bytes = std::fs::read(&csv)?;
    let cache = WindowCache {
        key: cache_key([("walk.csv", bytes.as_slice())], params),
        params,
        windows,
    };
    let path = dir.path().join("walk.cache");
    write_cache(&path, &cache)?;
    let back = read_cache(&path)?;
    println!("cache {} holds {} windows", &back.key_hex()[..12], back.windows.len());
    assert_eq!(back, cache);
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
