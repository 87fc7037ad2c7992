use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 7] = ["t", "ax", "ay", "az", "gx", "gy", "gz"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    /// m/s²
    pub accel: [f64; 3],
    /// rad/s
    pub gyro: [f64; 3],
}

impl ImuSample {
    pub fn channels(&self) -> [f64; 6] {
        let [ax, ay, az] = self.accel;
        let [gx, gy, gz] = self.gyro;
        [ax, ay, az, gx, gy, gz]
    }

    fn from_channels(t: f64, c: [f64; 6]) -> Self {
        ImuSample {
            t,
            accel: [c[0], c[1], c[2]],
            gyro: [c[3], c[4], c[5]],
        }
    }
}

/// A time-ordered 6-axis recording from one device.
#[derive(Clone, Debug, PartialEq)]
pub struct ImuStream {
    pub source_id: String,
    pub sample_rate_hz: f64,
    pub samples: Vec<ImuSample>,
}

impl ImuStream {
    /// Validates ordering and finiteness, estimating the rate from the span.
    pub fn new(source_id: impl Into<String>, samples: Vec<ImuSample>) -> Result<Self> {
        for (i, pair) in samples.windows(2).enumerate() {
            if !(pair[1].t > pair[0].t) {
                return Err(Error::NonMonotone { index: i + 1 });
            }
        }
        let sample_rate_hz = match (samples.first(), samples.last()) {
            (Some(a), Some(b)) if samples.len() > 1 => (samples.len() - 1) as f64 / (b.t - a.t),
            _ => 0.0,
        };
        Ok(ImuStream {
            source_id: source_id.into(),
            sample_rate_hz,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Duration covered by the samples, counting each as one sample period.
    pub fn duration_s(&self) -> f64 {
        if self.sample_rate_hz > 0.0 {
            self.samples.len() as f64 / self.sample_rate_hz
        } else {
            0.0
        }
    }
}

/// Reads a `t,ax,ay,az,gx,gy,gz` CSV. The source id is the file stem.
pub fn load_imu_stream(path: &Path) -> Result<ImuStream> {
    let mut raw = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "imu".to_string());
    parse_imu_csv(raw.as_bytes(), source_id, path)
}

pub fn parse_imu_csv(reader: impl Read, source_id: String, path: &Path) -> Result<ImuStream> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let header = rdr
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(parse_err(
            1,
            format!("expected header {:?}, got {:?}", CSV_HEADER.join(","), header.iter().collect::<Vec<_>>().join(",")),
        ));
    }

    let mut samples = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != CSV_HEADER.len() {
            return Err(parse_err(line, format!("expected 7 fields, got {}", record.len())));
        }
        let mut values = [0.0; 7];
        for (k, field) in record.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(line, format!("column {}: cannot parse {field:?}", CSV_HEADER[k])))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("column {}: non-finite value", CSV_HEADER[k])));
            }
            values[k] = v;
        }
        samples.push(ImuSample {
            t: values[0],
            accel: [values[1], values[2], values[3]],
            gyro: [values[4], values[5], values[6]],
        });
    }
    ImuStream::new(source_id, samples)
}

/// Writes a stream in the same CSV layout [`load_imu_stream`] reads.
/// Values use the shortest representation that parses back exactly.
pub fn write_imu_stream(stream: &ImuStream, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let write = |out: &mut BufWriter<File>| -> std::io::Result<()> {
        writeln!(out, "{}", CSV_HEADER.join(","))?;
        for s in &stream.samples {
            let c = s.channels();
            writeln!(out, "{},{},{},{},{},{},{}", s.t, c[0], c[1], c[2], c[3], c[4], c[5])?;
        }
        out.flush()
    };
    write(&mut out).map_err(|e| Error::io(path, e))
}

/// Linear interpolation onto a uniform `target_hz` grid spanning the first to
/// the last timestamp. Streams already uniform at the target rate are
/// returned unchanged.
pub fn resample(stream: &ImuStream, target_hz: f64) -> Result<ImuStream> {
    if !(target_hz > 0.0) || !target_hz.is_finite() {
        return Err(Error::invalid("resample", format!("target rate {target_hz} must be positive")));
    }
    let n = stream.samples.len();
    if n < 2 {
        return Err(Error::invalid("resample", format!("need at least 2 samples, got {n}")));
    }
    let t0 = stream.samples[0].t;
    let period = 1.0 / target_hz;
    let uniform = stream
        .samples
        .iter()
        .enumerate()
        .all(|(i, s)| (s.t - (t0 + i as f64 * period)).abs() <= 1e-6 * period);
    if uniform {
        return Ok(ImuStream {
            source_id: stream.source_id.clone(),
            sample_rate_hz: target_hz,
            samples: stream.samples.clone(),
        });
    }

    let span = stream.samples[n - 1].t - t0;
    let steps = (span * target_hz + 1e-9).floor() as usize + 1;
    let mut out = Vec::with_capacity(steps);
    let mut seg = 0;
    for k in 0..steps {
        let t = t0 + k as f64 * period;
        while seg + 2 < n && stream.samples[seg + 1].t < t {
            seg += 1;
        }
        let (a, b) = (&stream.samples[seg], &stream.samples[seg + 1]);
        let w = ((t - a.t) / (b.t - a.t)).clamp(0.0, 1.0);
        let (ca, cb) = (a.channels(), b.channels());
        let mut c = [0.0; 6];
        for i in 0..6 {
            c[i] = ca[i] + w * (cb[i] - ca[i]);
        }
        out.push(ImuSample::from_channels(t, c));
    }
    Ok(ImuStream {
        source_id: stream.source_id.clone(),
        sample_rate_hz: target_hz,
        samples: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(t: f64, v: f64) -> ImuSample {
        ImuSample {
            t,
            accel: [v; 3],
            gyro: [v; 3],
        }
    }

    fn parse(text: &str) -> Result<ImuStream> {
        parse_imu_csv(text.as_bytes(), "s".into(), Path::new("mem.csv"))
    }

    #[test]
    fn parses_valid_file() {
        let s = parse("t,ax,ay,az,gx,gy,gz\n0,1,2,3,4,5,6\n0.01,1,2,3,4,5,6\n0.02,1,2,3,4,5,6\n").unwrap();
        assert_eq!(s.len(), 3);
        assert!((s.sample_rate_hz - 100.0).abs() < 1e-9);
        assert_eq!(s.samples[1].gyro, [4.0, 5.0, 6.0]);
    }

    #[test]
    fn nan_is_rejected_with_line_number() {
        let err = parse("t,ax,ay,az,gx,gy,gz\n0,1,2,3,4,5,6\n0.01,1,2,3,4,NaN,6\n").unwrap_err();
        match err {
            Error::Parse { line, reason, .. } => {
                assert_eq!(line, 3);
                assert!(reason.contains("gy"), "{reason}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_and_wrong_header() {
        assert!(matches!(
            parse("t,ax,ay,az,gx,gy,gz\n0,1,2,3,4,5\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(parse("time,ax,ay,az,gx,gy,gz\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(
            parse("t,ax,ay,az,gx,gy,gz\n0,a,2,3,4,5,6\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn non_monotone_reports_index() {
        let err = parse("t,ax,ay,az,gx,gy,gz\n0,0,0,0,0,0,0\n0.2,0,0,0,0,0,0\n0.1,0,0,0,0,0,0\n").unwrap_err();
        assert!(matches!(err, Error::NonMonotone { index: 2 }));
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("walk.csv");
        let samples = (0..20)
            .map(|i| ImuSample {
                t: i as f64 / 200.0,
                accel: [0.1 * i as f64, -1.0 / 3.0, 9.81],
                gyro: [1e-7, std::f64::consts::PI, -2.5 * i as f64],
            })
            .collect();
        let s = ImuStream::new("walk", samples).unwrap();
        write_imu_stream(&s, &path).unwrap();
        let back = load_imu_stream(&path).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn resample_identity_at_native_rate() {
        let s = ImuStream::new("s", (0..50).map(|i| sample(i as f64 / 100.0, (i as f64).sin())).collect()).unwrap();
        let r = resample(&s, 100.0).unwrap();
        assert_eq!(r.samples, s.samples);
    }

    #[test]
    fn resample_hand_interpolation() {
        let s = ImuStream::new("s", vec![sample(0.0, 0.0), sample(1.0, 2.0)]).unwrap();
        let r = resample(&s, 2.0).unwrap();
        let got: Vec<(f64, f64)> = r.samples.iter().map(|x| (x.t, x.accel[0])).collect();
        assert_eq!(got, vec![(0.0, 0.0), (0.5, 1.0), (1.0, 2.0)]);
        assert_eq!(r.sample_rate_hz, 2.0);
    }

    #[test]
    fn resample_constant_stream_stays_constant() {
        let s = ImuStream::new("s", vec![sample(0.0, 4.2), sample(0.3, 4.2), sample(1.1, 4.2)]).unwrap();
        for hz in [3.0, 17.0, 250.0] {
            let r = resample(&s, hz).unwrap();
            assert!(r.samples.iter().all(|x| x.channels().iter().all(|&v| (v - 4.2).abs() < 1e-12)));
        }
    }

    #[test]
    fn resample_needs_two_samples() {
        let s = ImuStream::new("s", vec![sample(0.0, 1.0)]).unwrap();
        assert!(resample(&s, 10.0).is_err());
    }
}
