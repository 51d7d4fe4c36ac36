//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, JSON header,
//! then every parameter tensor as little-endian `f32` in manifest order.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FusionSpec, HeadConfig, HeadParams, Model, Params, TrainConfig, TrainingLog};
use crate::corpus::LabelIndex;
use crate::encoder::{EncoderConfig, EncoderParams, Parameters};
use crate::error::{Error, Result};
use crate::features::{MeterClassMap, Scaler};
use crate::normalize::NormalizationConfig;

const MAGIC: &[u8; 8] = b"DVNCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub encoder_config: EncoderConfig,
    pub head_config: HeadConfig,
    pub fusion: FusionSpec,
    pub vocab_size: usize,
    pub d_concat: usize,
    pub classes: usize,
    pub tensors: Vec<TensorEntry>,
    pub normalization: NormalizationConfig,
    pub max_len: usize,
    pub vocab_hash: String,
    pub embeddings_hash: String,
    pub scaler: Scaler,
    pub scaler_hash: String,
    pub meter_map: MeterClassMap,
    pub meter_map_hash: String,
    pub form_index: LabelIndex,
    pub poet_index: LabelIndex,
    pub train_config: TrainConfig,
    pub training_log: TrainingLog,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serialize");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.model.params.tensors() {
            for &x in t.data {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let mut v = [0u8; 4];
        r.read_exact(&mut v)?;
        let version = u32::from_le_bytes(v);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut l = [0u8; 8];
        r.read_exact(&mut l)?;
        let len = u64::from_le_bytes(l) as usize;
        if r.len() < len {
            return Err(Error::Format("truncated checkpoint header".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&r[..len])?;
        r = &r[len..];

        for (name, stored, actual) in [
            ("meter map", &header.meter_map_hash, header.meter_map.hash()),
            ("scaler", &header.scaler_hash, header.scaler.hash()),
        ] {
            if *stored != actual {
                return Err(Error::StaleArtifact {
                    name: name.into(),
                    expected: stored.clone(),
                    found: actual,
                });
            }
        }

        let encoder = EncoderParams::init(header.vocab_size, &header.encoder_config)?;
        let head = HeadParams::zeros(header.d_concat, header.head_config.hidden, header.classes);
        let mut params = Params { encoder, head };
        let manifest: Vec<TensorEntry> = params
            .tensors()
            .into_iter()
            .map(|t| TensorEntry { name: t.name, shape: t.shape })
            .collect();
        if manifest != header.tensors {
            return Err(Error::Format("tensor manifest disagrees with configuration".into()));
        }
        let expected: usize = manifest.iter().map(|t| t.shape.0 * t.shape.1).sum();
        if r.len() != expected * 4 {
            return Err(Error::Format("checkpoint payload has the wrong length".into()));
        }
        let mut floats = r
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        for t in params.tensors_mut() {
            for x in t.iter_mut() {
                *x = floats.next().expect("length checked");
            }
        }
        let model = Model {
            encoder_cfg: header.encoder_config.clone(),
            head_cfg: header.head_config,
            fusion: header.fusion,
            params,
        };
        Ok(Self { header, model })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Tensor manifest of a model, in serialization order.
    pub fn manifest(model: &Model) -> Vec<TensorEntry> {
        model
            .params
            .tensors()
            .into_iter()
            .map(|t| TensorEntry { name: t.name, shape: t.shape })
            .collect()
    }

    /// Checks that an artifact's hash matches the one recorded at training time.
    pub fn verify(&self, name: &str, found: &str) -> Result<()> {
        let expected = match name {
            "vocabulary" => &self.header.vocab_hash,
            "embeddings" => &self.header.embeddings_hash,
            "meter map" => &self.header.meter_map_hash,
            "scaler" => &self.header.scaler_hash,
            other => return Err(Error::Invalid(format!("unknown artifact `{other}`"))),
        };
        if expected != found {
            return Err(Error::StaleArtifact {
                name: name.into(),
                expected: expected.clone(),
                found: found.into(),
            });
        }
        Ok(())
    }
}
