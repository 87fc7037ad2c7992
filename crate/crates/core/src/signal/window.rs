use super::stream::ImuStream;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 6;

/// A fixed-length slice of an IMU stream, channels `ax, ay, az, gx, gy, gz`
/// by time.
#[derive(Clone, Debug, PartialEq)]
pub struct ImuWindow {
    pub window_id: String,
    pub source_id: String,
    pub start_s: f64,
    pub duration_s: f64,
    pub sample_rate_hz: f64,
    /// `6 × T`
    pub signal: Tensor,
}

impl ImuWindow {
    pub fn new(
        window_id: impl Into<String>,
        source_id: impl Into<String>,
        start_s: f64,
        sample_rate_hz: f64,
        signal: Tensor,
    ) -> Result<Self> {
        if signal.shape().len() != 2 || signal.shape()[0] != CHANNELS {
            return Err(Error::ShapeMismatch {
                op: "imu window",
                expected: vec![CHANNELS, signal.shape().last().copied().unwrap_or(0)],
                found: signal.shape().to_vec(),
            });
        }
        if !signal.is_finite() {
            return Err(Error::NonFinite {
                context: "imu window signal".into(),
            });
        }
        let samples = signal.shape()[1];
        Ok(ImuWindow {
            window_id: window_id.into(),
            source_id: source_id.into(),
            start_s,
            duration_s: samples as f64 / sample_rate_hz,
            sample_rate_hz,
            signal,
        })
    }

    pub fn samples(&self) -> usize {
        self.signal.shape()[1]
    }
}

/// Cuts a uniformly sampled stream into equal windows. Trailing partial
/// windows are dropped; a stream shorter than one window yields nothing.
/// Window ids are `"{source_id}:{start_index}"`.
pub fn make_windows(stream: &ImuStream, window_s: f64, stride_s: f64) -> Result<Vec<ImuWindow>> {
    if !(window_s > 0.0) || !(stride_s > 0.0) {
        return Err(Error::invalid(
            "make_windows",
            format!("window ({window_s}) and stride ({stride_s}) must be positive"),
        ));
    }
    if !(stream.sample_rate_hz > 0.0) {
        return Ok(Vec::new());
    }
    let rate = stream.sample_rate_hz;
    let len = (window_s * rate).round() as usize;
    let step = ((stride_s * rate).round() as usize).max(1);
    if len == 0 {
        return Err(Error::invalid("make_windows", "window shorter than one sample"));
    }

    let n = stream.samples.len();
    let mut windows = Vec::new();
    let mut start = 0;
    while start + len <= n {
        let mut data = vec![0.0; CHANNELS * len];
        for (t, s) in stream.samples[start..start + len].iter().enumerate() {
            for (c, v) in s.channels().into_iter().enumerate() {
                data[c * len + t] = v;
            }
        }
        windows.push(ImuWindow::new(
            format!("{}:{start}", stream.source_id),
            stream.source_id.clone(),
            stream.samples[start].t,
            rate,
            Tensor::new(vec![CHANNELS, len], data)?,
        )?);
        start += step;
    }
    Ok(windows)
}
