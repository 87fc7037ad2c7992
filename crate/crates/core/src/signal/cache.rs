use std::path::Path;

use sha2::{Digest, Sha256};

use super::window::{ImuWindow, CHANNELS};
use crate::binio::{expect_header, read_file, write_atomic, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"IMUWCACH";
const VERSION: u8 = 1;

/// Windowing parameters that, together with the input bytes, key a cache.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowParams {
    pub window_s: f64,
    pub stride_s: f64,
    pub rate_hz: f64,
}

/// Pre-cut windows on disk, keyed by a content hash of their inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowCache {
    pub key: [u8; 32],
    pub params: WindowParams,
    pub windows: Vec<ImuWindow>,
}

/// SHA-256 over the named input blobs (in order) and the window parameters.
pub fn cache_key<'a>(inputs: impl IntoIterator<Item = (&'a str, &'a [u8])>, params: WindowParams) -> [u8; 32] {
    let mut h = Sha256::new();
    for (name, bytes) in inputs {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    for v in [params.window_s, params.stride_s, params.rate_hz] {
        h.update(v.to_bits().to_le_bytes());
    }
    h.finalize().into()
}

impl WindowCache {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u8(VERSION);
        w.bytes(&self.key);
        w.f64(self.params.window_s);
        w.f64(self.params.stride_s);
        w.f64(self.params.rate_hz);
        w.u64(self.windows.len() as u64);
        for win in &self.windows {
            w.str(&win.window_id);
            w.str(&win.source_id);
            w.f64(win.start_s);
            w.f64(win.sample_rate_hz);
            w.u32(win.samples() as u32);
            w.f64s(win.signal.data());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "window cache");
        expect_header(&mut r, MAGIC, VERSION)?;
        let key: [u8; 32] = r.take(32)?.try_into().unwrap();
        let params = WindowParams {
            window_s: r.f64()?,
            stride_s: r.f64()?,
            rate_hz: r.f64()?,
        };
        let n = r.u64()? as usize;
        let mut windows = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let window_id = r.str()?;
            let source_id = r.str()?;
            let start_s = r.f64()?;
            let rate = r.f64()?;
            let samples = r.u32()? as usize;
            let data = r.f64s()?;
            let signal = Tensor::new(vec![CHANNELS, samples], data)
                .map_err(|_| Error::Format(format!("window cache: bad signal size for {window_id}")))?;
            windows.push(ImuWindow::new(window_id, source_id, start_s, rate, signal)?);
        }
        r.expect_end()?;
        Ok(WindowCache { key, params, windows })
    }

    pub fn key_hex(&self) -> String {
        hex::encode(self.key)
    }
}

pub fn write_cache(path: &Path, cache: &WindowCache) -> Result<()> {
    write_atomic(path, &cache.to_bytes())
}

pub fn read_cache(path: &Path) -> Result<WindowCache> {
    WindowCache::from_bytes(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_cache() -> WindowCache {
        let params = WindowParams {
            window_s: 0.5,
            stride_s: 0.25,
            rate_hz: 8.0,
        };
        let windows = (0..3)
            .map(|k| {
                let data = (0..24).map(|i| (i * (k + 1)) as f64 * 0.1).collect();
                ImuWindow::new(format!("s:{}", 2 * k), "s", k as f64 * 0.25, 8.0, Tensor::new(vec![6, 4], data).unwrap())
                    .unwrap()
            })
            .collect();
        WindowCache {
            key: cache_key([("s.csv", b"abc".as_slice())], params),
            params,
            windows,
        }
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.cache");
        let c = sample_cache();
        write_cache(&p, &c).unwrap();
        let back = read_cache(&p).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), std::fs::read(&p).unwrap());
    }

    #[test]
    fn key_depends_on_inputs_and_params() {
        let p = sample_cache().params;
        let a = cache_key([("a", b"1".as_slice())], p);
        assert_eq!(a, cache_key([("a", b"1".as_slice())], p));
        assert_ne!(a, cache_key([("a", b"2".as_slice())], p));
        assert_ne!(a, cache_key([("a", b"1".as_slice())], WindowParams { window_s: 1.0, ..p }));
    }

    #[test]
    fn rejects_wrong_version_and_truncation() {
        let mut bytes = sample_cache().to_bytes();
        assert!(WindowCache::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        bytes[8] = VERSION + 1;
        let err = WindowCache::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
        bytes[0] = b'X';
        assert!(WindowCache::from_bytes(&bytes).unwrap_err().to_string().contains("magic"));
    }
}
