//! Binary checkpoint files.
//!
//! ```text
//! magic     8 bytes  "JAMCKPT\0"
//! version   u32 LE
//! hlen      u64 LE
//! header    hlen bytes of JSON (model config, vocabulary, fusion spec, metadata)
//! count     u64 LE
//! records   count × { u32 name_len, name, u32 ndim, ndim × u64 dim, f64 LE data }
//! ```
//!
//! Records are written in name order, so identical parameters give
//! identical bytes.

use crate::data::Vocabulary;
use crate::fusion::FusionSpec;
use crate::model::{
    JamCross, JamCrossConfig, JamModel, LanguageModel, ModelError, ParameterSet, Trainable, Transformer, TransformerConfig,
};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"JAMCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Dense { config: TransformerConfig },
    Cross { config: JamCrossConfig },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelSpec,
    pub vocab: Vocabulary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion: Option<FusionSpec>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: JamModel,
    pub vocab: Vocabulary,
    pub fusion: Option<FusionSpec>,
    /// Free-form provenance (role, step, seed, ...).
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: impl Into<JamModel>, vocab: Vocabulary) -> Self {
        Self {
            model: model.into(),
            vocab,
            fusion: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.into(), value.to_string());
        self
    }

    pub fn header(&self) -> CheckpointHeader {
        let model = match &self.model {
            JamModel::Dense(m) => ModelSpec::Dense { config: *m.config() },
            JamModel::Cross(m) => ModelSpec::Cross { config: *m.config() },
        };
        CheckpointHeader {
            model,
            vocab: self.vocab,
            fusion: self.fusion,
            meta: self.meta.clone(),
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::to_vec(&self.header()).map_err(|e| CheckpointError::Format(e.to_string()))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&payload_bytes(self.model.params()))?;
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out).expect("writing to memory cannot fail");
        out
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Format("not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Format(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let hlen = read_u64(&mut r)?;
        let header: CheckpointHeader = serde_json::from_slice(&read_vec(&mut r, hlen)?)
            .map_err(|e| CheckpointError::Format(format!("header: {e}")))?;
        header
            .vocab
            .validate()
            .map_err(|e| CheckpointError::Format(e.to_string()))?;
        let params = read_payload(&mut r)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(CheckpointError::Format(format!("{} trailing bytes", rest.len())));
        }
        let model: JamModel = match header.model {
            ModelSpec::Dense { config } => Transformer::from_params(config, params)?.into(),
            ModelSpec::Cross { config } => JamCross::from_params(config, params)?.into(),
        };
        if model.vocab_size() != header.vocab.size() {
            return Err(CheckpointError::Format(format!(
                "model vocabulary {} does not match header vocabulary {}",
                model.vocab_size(),
                header.vocab.size()
            )));
        }
        Ok(Self {
            model,
            vocab: header.vocab,
            fusion: header.fusion,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read(bytes.as_slice())
    }
}

/// The record section alone; equal for equal parameter sets whatever the header says.
pub fn payload_bytes(params: &ParameterSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.num_scalars() * 8);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_vec<R: Read>(r: &mut R, len: u64) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let got = r.take(len).read_to_end(&mut out)?;
    if got as u64 != len {
        return Err(CheckpointError::Format("unexpected end of file".into()));
    }
    Ok(out)
}

fn read_payload<R: Read>(r: &mut R) -> Result<ParameterSet> {
    let count = read_u64(r)?;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let nlen = read_u32(r)?;
        let name = String::from_utf8(read_vec(r, nlen as u64)?)
            .map_err(|_| CheckpointError::Format("parameter name is not UTF-8".into()))?;
        let ndim = read_u32(r)?;
        let mut shape = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            shape.push(read_u64(r)? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = read_vec(r, 8 * n as u64)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Format(format!("{name}: {e}")))?;
        if params.insert(name.clone(), t).is_some() {
            return Err(CheckpointError::Format(format!("duplicate parameter {name:?}")));
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{fuse, FusionKind};

    fn dense() -> Checkpoint {
        let v = Vocabulary::default();
        let m = Transformer::init(TransformerConfig::toy(v.size()), 3).unwrap();
        Checkpoint::new(m, v).with_meta("role", "text_parent")
    }

    #[test]
    fn round_trip_dense_and_cross() {
        let c = dense();
        let bytes = c.to_bytes();
        assert_eq!(Checkpoint::read(bytes.as_slice()).unwrap(), c);
        assert_eq!(bytes, Checkpoint::read(bytes.as_slice()).unwrap().to_bytes());

        let JamModel::Dense(a) = &c.model else { unreachable!() };
        let mut cross = Checkpoint::new(fuse(a, a, &c.vocab, &crate::fusion::FusionSpec::cross(2, 1)).unwrap(), c.vocab);
        cross.fusion = Some(crate::fusion::FusionSpec::cross(2, 1));
        let back = Checkpoint::read(cross.to_bytes().as_slice()).unwrap();
        assert_eq!(back, cross);
        assert_eq!(back.header().fusion.unwrap().insertion_every, Some(2));
    }

    #[test]
    fn uniform_merge_of_identical_parents_keeps_payload() {
        let c = dense();
        let JamModel::Dense(a) = &c.model else { unreachable!() };
        let merged = fuse(a, a, &c.vocab, &crate::fusion::FusionSpec::new(FusionKind::Uniform)).unwrap();
        assert_eq!(payload_bytes(merged.params()), payload_bytes(c.model.params()));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = dense().to_bytes();
        assert!(Checkpoint::read(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read(bad.as_slice()).is_err());
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(Checkpoint::read(v2.as_slice()), Err(CheckpointError::Format(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::read(extra.as_slice()).is_err());
    }
}
