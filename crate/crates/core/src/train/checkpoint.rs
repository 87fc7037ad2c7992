use std::path::Path;

use super::{AdagradState, TrainConfig};
use crate::binio::{expect_header, read_file, write_atomic, ByteReader, ByteWriter};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"IMUACKPT";
const VERSION: u8 = 1;

/// Everything needed to resume training or run evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderConfig,
    pub params: EncoderParams,
    pub optimizer: Option<AdagradState>,
    pub train: Option<TrainConfig>,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Epochs completed so far.
    pub epoch: u64,
}

impl Checkpoint {
    /// Layout: magic, version, JSON configs, tensors (shape + raw f64 bits),
    /// optional optimizer accumulators, counters.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u8(VERSION);
        w.str(&serde_json::to_string(&self.encoder)?);
        w.str(&match &self.train {
            Some(t) => serde_json::to_string(t)?,
            None => String::new(),
        });
        let tensors = self.params.tensors();
        w.u32(tensors.len() as u32);
        for t in tensors {
            w.usizes(t.shape());
            w.f64s(t.data());
        }
        match &self.optimizer {
            Some(state) => {
                w.u8(1);
                w.u64(state.step);
                w.u32(state.accumulators.len() as u32);
                state.accumulators.iter().for_each(|a| w.f64s(a));
            }
            None => w.u8(0),
        }
        w.u64(self.step);
        w.u64(self.epoch);
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "checkpoint");
        expect_header(&mut r, MAGIC, VERSION)?;
        let encoder: EncoderConfig = serde_json::from_str(&r.str()?)?;
        let train = match r.str()?.as_str() {
            "" => None,
            s => Some(serde_json::from_str(s)?),
        };
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let shape = r.usizes()?;
            let data = r.f64s()?;
            tensors.push(Tensor::new(shape, data).map_err(|e| Error::Format(format!("checkpoint tensor: {e}")))?);
        }
        let params = EncoderParams::from_tensors(&encoder, tensors)?;
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let k = r.u32()? as usize;
                let accumulators = (0..k).map(|_| r.f64s()).collect::<Result<Vec<_>>>()?;
                let sizes: Vec<usize> = params.tensors().iter().map(|t| t.numel()).collect();
                if accumulators.iter().map(Vec::len).ne(sizes.iter().copied()) {
                    return Err(Error::Format("checkpoint: optimizer state does not match parameters".into()));
                }
                Some(AdagradState { accumulators, step })
            }
            other => return Err(Error::Format(format!("checkpoint: bad optimizer flag {other}"))),
        };
        let step = r.u64()?;
        let epoch = r.u64()?;
        r.expect_end()?;
        Ok(Checkpoint {
            encoder,
            params,
            optimizer,
            train,
            step,
            epoch,
        })
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    write_atomic(path, &checkpoint.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&read_file(path)?)
}
