//! Single-file checkpoints: magic, version, JSON header, little-endian f32
//! payload (parameters, then Adam first and second moments), CRC-64 trailer.

use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_ECMA_182};
use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::tensor::Tensor;

use super::optim::AdamState;
use super::{TrainConfig, TrainError};

const MAGIC: &[u8; 4] = b"XLCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_ECMA_182);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub epoch: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
    /// Corpus languages in model language-id order.
    pub languages: Vec<String>,
    /// Vocabulary file contents.
    pub vocab: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
}

#[derive(Serialize, Deserialize)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    params: Vec<ParamSpec>,
    adam_t: u64,
}

fn corrupt(reason: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(reason.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, TrainError> {
        let header = Header {
            meta: self.meta.clone(),
            params: self
                .params
                .iter()
                .map(|(_, name, t)| ParamSpec {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            adam_t: self.adam.t,
        };
        let json = serde_json::to_vec(&header).map_err(|e| corrupt(e.to_string()))?;
        let mut out = Vec::with_capacity(json.len() + 3 * 4 * self.params.numel() + 24);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let tensors = self.params.iter().map(|(_, _, t)| t).chain(&self.adam.m).chain(&self.adam.v);
        for t in tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = CRC64.checksum(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        if bytes.len() < 24 || &bytes[..4] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(trailer.try_into().unwrap());
        if CRC64.checksum(body) != stored {
            return Err(corrupt("checksum mismatch (truncated or corrupted file)"));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
        let json = body.get(16..16 + hlen).ok_or_else(|| corrupt("header length exceeds file"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| corrupt(format!("header: {e}")))?;
        let mut payload = body[16 + hlen..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let expected: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum::<usize>() * 3;
        if body.len() - 16 - hlen != expected * 4 {
            return Err(corrupt("payload size does not match header"));
        }
        let mut take = |shape: &[usize]| -> Result<Tensor<f32>, TrainError> {
            let n = shape.iter().product();
            let data: Vec<f32> = payload.by_ref().take(n).collect();
            Tensor::new(shape.to_vec(), data).map_err(|e| corrupt(e.to_string()))
        };
        let mut params = ParamStore::new();
        for p in &header.params {
            let t = take(&p.shape)?;
            params.add(p.name.clone(), t);
        }
        let m = header.params.iter().map(|p| take(&p.shape)).collect::<Result<Vec<_>, _>>()?;
        let v = header.params.iter().map(|p| take(&p.shape)).collect::<Result<Vec<_>, _>>()?;
        Ok(Checkpoint {
            meta: header.meta,
            params,
            adam: AdamState { t: header.adam_t, m, v },
        })
    }

    /// Writes via a temporary file and rename, so a crash never leaves a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| TrainError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| TrainError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = fs::read(path).map_err(|e| TrainError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
