//! Text checkpoints: a config header plus every tensor with its shape.
//! Floats are written in shortest round-trip form, so save/load is
//! bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DecoderConfig, DecoderError, DecoderParams, Result};

pub const FORMAT: &str = "pointperc-decoder";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: DecoderConfig,
    /// Number of optimiser steps already applied.
    pub step: u64,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn from_params(params: &DecoderParams, step: u64) -> Self {
        let tensors = params
            .tensors()
            .into_iter()
            .map(|t| TensorRecord { name: t.name, shape: t.shape, data: t.data.to_vec() })
            .collect();
        Self { format: FORMAT.into(), version: VERSION, config: params.config, step, tensors }
    }

    pub fn to_params(&self) -> Result<DecoderParams> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(DecoderError::Checkpoint(format!("unsupported format {} v{}", self.format, self.version)));
        }
        let mut params = DecoderParams::init(self.config, 0)?;
        let mut views = params.tensors_mut();
        if views.len() != self.tensors.len() {
            return Err(DecoderError::Checkpoint(format!(
                "expected {} tensors, found {}",
                views.len(),
                self.tensors.len()
            )));
        }
        for (view, rec) in views.iter_mut().zip(&self.tensors) {
            if view.name != rec.name || view.shape != rec.shape || view.data.len() != rec.data.len() {
                return Err(DecoderError::Checkpoint(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    rec.name, rec.shape, view.name, view.shape
                )));
            }
            view.data.copy_from_slice(&rec.data);
        }
        Ok(params)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| DecoderError::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut params = DecoderParams::init(DecoderConfig::tiny(), 11).unwrap();
        params.head.out.b[0] = 0.1 + 0.2;
        params.reduce.w[[0, 0]] = f64::MIN_POSITIVE * 3.0;
        let ckpt = Checkpoint::from_params(&params, 42);
        let back = Checkpoint::from_json(&ckpt.to_json()).unwrap();
        assert_eq!(back.step, 42);
        let restored = back.to_params().unwrap();
        let bits = |p: &DecoderParams| p.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&restored), bits(&params));
    }

    #[test]
    fn mismatched_tensor_is_rejected() {
        let params = DecoderParams::init(DecoderConfig::tiny(), 1).unwrap();
        let mut ckpt = Checkpoint::from_params(&params, 0);
        ckpt.tensors[0].shape = vec![1, 1];
        assert!(matches!(ckpt.to_params(), Err(DecoderError::Checkpoint(_))));
    }
}
