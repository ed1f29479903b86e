//! Checkpoint file: the 8-byte magic `MASEGCK1`, a little-endian `u64`
//! header length, a JSON header, then the parameters, Adam first moments and
//! Adam second moments as little-endian `f32`, block by block.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamState, Plateau};
use super::tensor::Tensor;
use super::train::{EpochLog, TrainConfig};
use super::unet::{UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::imagecore::RngState;

const MAGIC: &[u8; 8] = b"MASEGCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Validation score of the best epoch seen so far in a fold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub epoch: usize,
    pub val_dice: f64,
    pub val_loss: f64,
}

/// Complete training state of one fold after `epoch` finished epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub unet: UNetConfig,
    pub train: TrainConfig,
    pub fold: usize,
    pub epoch: usize,
    pub params: Vec<Tensor<f32>>,
    pub adam: AdamState,
    pub scheduler: Plateau,
    /// Position of the batch-order stream.
    pub rng: RngState,
    pub log: Vec<EpochLog>,
    pub best: Option<BestRecord>,
}

#[derive(Serialize, Deserialize)]
struct BlockInfo {
    name: String,
    shape: [usize; 4],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    unet: UNetConfig,
    train: TrainConfig,
    fold: usize,
    epoch: usize,
    adam_step: u64,
    scheduler: Plateau,
    rng: RngState,
    log: Vec<EpochLog>,
    best: Option<BestRecord>,
    blocks: Vec<BlockInfo>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<UNet<f32>> {
        UNet::from_params(&self.unet, self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let names = self.unet.param_names();
        if names.len() != self.params.len() {
            return Err(Error::DimensionMismatch(
                "checkpoint parameters do not match its network layout".into(),
            ));
        }
        let header = Header {
            version: CHECKPOINT_VERSION,
            unet: self.unet.clone(),
            train: self.train.clone(),
            fold: self.fold,
            epoch: self.epoch,
            adam_step: self.adam.step,
            scheduler: self.scheduler.clone(),
            rng: self.rng,
            log: self.log.clone(),
            best: self.best,
            blocks: names
                .into_iter()
                .zip(&self.params)
                .map(|(name, p)| BlockInfo {
                    name,
                    shape: p.shape(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)
            .map_err(|e| Error::invalid(format!("checkpoint header: {e}")))?;
        let n: usize = self.params.iter().map(Tensor::len).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 12 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let blocks = self
            .params
            .iter()
            .map(|p| p.data())
            .chain(self.adam.m.iter().map(Vec::as_slice))
            .chain(self.adam.v.iter().map(Vec::as_slice));
        for block in blocks {
            for v in block {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(origin, msg);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if hlen > body.len() {
            return Err(bad("truncated header".into()));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| Error::json(origin, e))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported checkpoint version {}",
                header.version
            )));
        }
        header.unet.validate()?;
        let shapes = header.unet.param_shapes();
        if shapes.len() != header.blocks.len()
            || shapes
                .iter()
                .zip(&header.blocks)
                .any(|(s, b)| *s != b.shape)
        {
            return Err(bad(
                "block shapes do not match the network configuration".into()
            ));
        }
        let n: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        let blob = &body[hlen..];
        if blob.len() != 12 * n {
            return Err(bad(format!(
                "expected {} blob bytes, found {}",
                12 * n,
                blob.len()
            )));
        }
        let mut values = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let mut take = |len: usize| -> Vec<f32> { values.by_ref().take(len).collect() };
        let mut params = Vec::with_capacity(shapes.len());
        for s in &shapes {
            params.push(Tensor::new(*s, take(s.iter().product()))?);
        }
        let m = shapes.iter().map(|s| take(s.iter().product())).collect();
        let v = shapes.iter().map(|s| take(s.iter().product())).collect();
        Ok(Checkpoint {
            unet: header.unet,
            train: header.train,
            fold: header.fold,
            epoch: header.epoch,
            params,
            adam: AdamState {
                step: header.adam_step,
                m,
                v,
            },
            scheduler: header.scheduler,
            rng: header.rng,
            log: header.log,
            best: header.best,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}
