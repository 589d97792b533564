//! Checkpoint file layout (all integers little-endian):
//!
//! ```text
//! "AUCKPT01"                     8-byte magic
//! digest                         64 ASCII hex chars, SHA-256 of the model config JSON
//! u32 len + mode                 training mode name
//! u64 iteration
//! u32 len + model config JSON
//! u32 len + run config JSON      free-form, "{}" when absent
//! named tensor records           see ParamSet::write_records
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{AuModel, FrameBatch, ModelConfig, ModelError};
use crate::tensor_core::ParamSet;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AUCKPT01";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub mode: String,
    pub iteration: u64,
    pub model: ModelConfig,
    pub run_config: String,
    pub params: ParamSet,
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_str<R: Read>(r: &mut R, what: &str) -> Result<String, ModelError> {
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let len = u32::from_le_bytes(b4) as usize;
    if len > 1 << 24 {
        return Err(ModelError::Checkpoint(format!("{what} field of {len} bytes")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| ModelError::Checkpoint(format!("{what} is not UTF-8")))
}

impl Checkpoint {
    pub fn from_model(model: &AuModel, mode: &str, iteration: u64, run_config: String) -> Self {
        Checkpoint {
            mode: mode.to_string(),
            iteration,
            model: model.config.clone(),
            run_config,
            params: model.params.clone(),
        }
    }

    pub fn digest(&self) -> String {
        self.model.digest()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), ModelError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(self.digest().as_bytes())?;
        write_str(w, &self.mode)?;
        w.write_all(&self.iteration.to_le_bytes())?;
        write_str(w, &serde_json::to_string(&self.model)?)?;
        write_str(w, &self.run_config)?;
        self.params.write_records(w)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, ModelError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let mut digest = [0u8; 64];
        r.read_exact(&mut digest)?;
        let digest = String::from_utf8(digest.to_vec())
            .map_err(|_| ModelError::Checkpoint("digest is not ASCII".into()))?;
        let mode = read_str(r, "mode")?;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let iteration = u64::from_le_bytes(b8);
        let model: ModelConfig = serde_json::from_str(&read_str(r, "model config")?)?;
        if model.digest() != digest {
            return Err(ModelError::Checkpoint(
                "header digest does not match the embedded model config".into(),
            ));
        }
        let run_config = read_str(r, "run config")?;
        let params = ParamSet::read_records(r)?;
        Ok(Checkpoint {
            mode,
            iteration,
            model,
            run_config,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path)?;
        Checkpoint::read_from(&mut bytes.as_slice())
    }

    /// Rebuilds the network, checking parameter names and shapes.
    pub fn to_model(&self) -> Result<AuModel, ModelError> {
        AuModel::from_params(self.model.clone(), self.params.clone())
    }
}

/// Global features of `frames` under a checkpoint that must have been
/// trained with exactly `expected` as its model config.
pub fn extract_features(
    checkpoint: &Checkpoint,
    expected: &ModelConfig,
    frames: &FrameBatch,
) -> Result<Vec<Vec<f64>>, ModelError> {
    let (found, want) = (checkpoint.digest(), expected.digest());
    if found != want {
        return Err(ModelError::ConfigMismatch {
            expected: want,
            found,
        });
    }
    checkpoint.to_model()?.extract_features(frames)
}
