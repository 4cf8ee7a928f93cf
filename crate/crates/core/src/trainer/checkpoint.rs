//! Checkpoint files: one JSON header line, then every parameter as raw
//! little-endian `f64` in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, TrainConfig};
use crate::dataio::DatasetHeader;
use crate::error::{Error, Result};
use crate::numkernel::Rng;

pub const CHECKPOINT_FORMAT: &str = "promise-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    model: ModelConfig,
    train: TrainConfig,
    best_epoch: Option<usize>,
    params: Vec<ParamEntry>,
    payload_bytes: usize,
}

/// A model together with the configuration that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub train: TrainConfig,
    /// `None` when no epoch ran.
    pub best_epoch: Option<usize>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let store = &self.model.store;
        let params: Vec<ParamEntry> = store
            .ids()
            .map(|id| ParamEntry {
                name: store.name(id).to_string(),
                shape: store.get(id).shape().to_vec(),
            })
            .collect();
        let payload_bytes = 8 * store.coordinate_count();
        let header = Header {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self.model.cfg.clone(),
            train: self.train.clone(),
            best_epoch: self.best_epoch,
            params,
            payload_bytes,
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        out.reserve(payload_bytes);
        for id in store.ids() {
            for v in store.get(id).data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("not a checkpoint (format {:?})", header.format)));
        }
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                header.version
            )));
        }
        let payload = &bytes[nl + 1..];
        if payload.len() != header.payload_bytes {
            return Err(Error::Checkpoint(format!(
                "payload holds {} bytes but the header declares {} (truncated file?)",
                payload.len(),
                header.payload_bytes
            )));
        }
        // Parameter layout is a pure function of the config; values are
        // overwritten below.
        let mut model = Model::new(header.model.clone(), &mut Rng::new(0))?;
        let ids: Vec<_> = model.store.ids().collect();
        if ids.len() != header.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint lists {} parameters but the config implies {}",
                header.params.len(),
                ids.len()
            )));
        }
        let mut offset = 0;
        for (id, entry) in ids.into_iter().zip(&header.params) {
            let t = model.store.get_mut(id);
            if entry.shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    entry.name,
                    entry.shape,
                    t.shape()
                )));
            }
            for v in t.data_mut() {
                let chunk: [u8; 8] = payload[offset..offset + 8].try_into().expect("8-byte chunk");
                *v = f64::from_le_bytes(chunk);
                offset += 8;
            }
            if model.store.name(id) != entry.name {
                return Err(Error::Checkpoint(format!(
                    "parameter {:?} found where {:?} was expected",
                    entry.name,
                    model.store.name(id)
                )));
            }
        }
        Ok(Checkpoint {
            model,
            train: header.train,
            best_epoch: header.best_epoch,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rejects datasets whose feature dimensions or labels do not fit the
    /// model.
    pub fn check_compatible(&self, header: &DatasetHeader) -> Result<()> {
        let m = &self.model.cfg;
        if (m.d1, m.d2) != (header.d1, header.d2) {
            return Err(Error::Data(format!(
                "feature dimensions differ: checkpoint has d1={} d2={}, dataset has d1={} d2={}",
                m.d1, m.d2, header.d1, header.d2
            )));
        }
        if m.label_kind != header.label_kind || m.class_count != header.class_count {
            return Err(Error::Data(format!(
                "label space differs: checkpoint has {} {:?} classes, dataset has {} {:?}",
                m.class_count, m.label_kind, header.class_count, header.label_kind
            )));
        }
        Ok(())
    }
}
