//! Checkpoint container.
//!
//! Layout: magic `QVCK`, format version (u32 LE), header length (u64 LE),
//! a UTF-8 JSON header, then contiguous f32 LE tensor payloads. The header
//! lists every tensor with its shape, dtype and byte offset into the payload
//! section, and carries quantizer states, the model config, the optimizer
//! step and hyperparameters, epoch, seed and the training config inline.

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::quant::QuantizerState;
use crate::trainer::{AdamW, Stage, TrainConfig};
use crate::vit::{ModelConfig, Vit, VitError};

pub const MAGIC: &[u8; 4] = b"QVCK";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated: need {need} bytes, have {got}")]
    Truncated { need: usize, got: usize },
    #[error("payload is {got} bytes, header describes {expected}")]
    PayloadLength { expected: usize, got: usize },
    #[error("bad checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint does not fit its model: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Model(#[from] VitError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuantizerEntry {
    name: String,
    state: QuantizerState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerEntry {
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    epoch: usize,
    seed: u64,
    stage: Stage,
    eval_accuracy: Option<f64>,
    train_config: Option<TrainConfig>,
    optimizer: Option<OptimizerEntry>,
    quantizers: Vec<QuantizerEntry>,
    tensors: Vec<TensorEntry>,
}

/// A saved model with its training context.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Vit,
    pub optimizer: Option<AdamW>,
    pub epoch: usize,
    /// Run seed; batch order of epoch `e` derives from `(seed, e)`.
    pub seed: u64,
    pub stage: Stage,
    /// Eval accuracy logged when the checkpoint was written.
    pub eval_accuracy: Option<f64>,
    pub train_config: Option<TrainConfig>,
}

const PARAM: &str = "param/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

impl Checkpoint {
    pub fn new(model: Vit, stage: Stage) -> Self {
        Self {
            model,
            optimizer: None,
            epoch: 0,
            seed: 0,
            stage,
            eval_accuracy: None,
            train_config: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors: Vec<(String, &Tensor)> = self
            .model
            .params
            .iter()
            .map(|p| (format!("{PARAM}{}", p.name), &p.value))
            .collect();
        if let Some(opt) = &self.optimizer {
            for (p, (m, v)) in self.model.params.iter().zip(opt.m.iter().zip(&opt.v)) {
                tensors.push((format!("{ADAM_M}{}", p.name), m));
                tensors.push((format!("{ADAM_V}{}", p.name), v));
            }
        }
        let mut entries = Vec::with_capacity(tensors.len());
        let mut payload = Vec::new();
        for (name, t) in &tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset: payload.len(),
            });
            let start = payload.len();
            payload.resize(start + 4 * t.len(), 0);
            for (chunk, &v) in payload[start..].chunks_exact_mut(4).zip(t.data()) {
                LittleEndian::write_f32(chunk, v as f32);
            }
        }
        let header = Header {
            model: self.model.config.clone(),
            epoch: self.epoch,
            seed: self.seed,
            stage: self.stage,
            eval_accuracy: self.eval_accuracy,
            train_config: self.train_config.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerEntry {
                step: o.step,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
            }),
            quantizers: self
                .model
                .quantizers
                .iter()
                .map(|q| QuantizerEntry {
                    name: q.name().to_string(),
                    state: q.state.clone(),
                })
                .collect(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 {
            return Err(CheckpointError::Truncated {
                need: PREAMBLE,
                got: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        if bytes.len() < PREAMBLE {
            return Err(CheckpointError::Truncated {
                need: PREAMBLE,
                got: bytes.len(),
            });
        }
        let version = LittleEndian::read_u32(&bytes[4..8]);
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let header_len = LittleEndian::read_u64(&bytes[8..16]) as usize;
        let body = PREAMBLE
            .checked_add(header_len)
            .filter(|&n| n <= bytes.len())
            .ok_or(CheckpointError::Truncated {
                need: PREAMBLE.saturating_add(header_len),
                got: bytes.len(),
            })?;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..body])
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        let payload = &bytes[body..];

        let mut expected = 0usize;
        for e in &header.tensors {
            if e.dtype != "f32" {
                return Err(CheckpointError::Header(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            if e.offset != expected {
                return Err(CheckpointError::Header(format!(
                    "{}: offset {} is not contiguous (expected {expected})",
                    e.name, e.offset
                )));
            }
            expected += 4 * e.shape.iter().product::<usize>();
        }
        if payload.len() != expected {
            return Err(CheckpointError::PayloadLength {
                expected,
                got: payload.len(),
            });
        }
        let read = |e: &TensorEntry| -> Result<Tensor, CheckpointError> {
            let n: usize = e.shape.iter().product();
            let data = payload[e.offset..e.offset + 4 * n]
                .chunks_exact(4)
                .map(|c| LittleEndian::read_f32(c) as f64)
                .collect();
            Tensor::new(e.shape.clone(), data).map_err(|err| CheckpointError::Header(format!("{}: {err}", e.name)))
        };
        let find = |name: &str| header.tensors.iter().find(|e| e.name == name);

        let mut model = Vit::new(header.model.clone(), 0)?;
        if header.tensors.len() != model.params.len() * if header.optimizer.is_some() { 3 } else { 1 } {
            return Err(CheckpointError::Mismatch("unexpected tensor count".into()));
        }
        for p in &mut model.params {
            let e = find(&format!("{PARAM}{}", p.name))
                .ok_or_else(|| CheckpointError::Mismatch(format!("missing parameter {}", p.name)))?;
            let t = read(e)?;
            if t.shape() != p.value.shape() {
                return Err(CheckpointError::Mismatch(format!(
                    "{}: shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        if header.quantizers.len() != model.quantizers.len() {
            return Err(CheckpointError::Mismatch(format!(
                "{} quantizers stored, model has {}",
                header.quantizers.len(),
                model.quantizers.len()
            )));
        }
        for q in &mut model.quantizers {
            let e = header
                .quantizers
                .iter()
                .find(|e| e.name == q.name())
                .ok_or_else(|| CheckpointError::Mismatch(format!("missing quantizer {}", q.name())))?;
            e.state.check().map_err(|err| CheckpointError::Header(format!("{}: {err}", e.name)))?;
            q.state = e.state.clone();
        }
        let optimizer = match &header.optimizer {
            None => None,
            Some(o) => {
                let mut opt = AdamW::new(&model.params, o.beta1, o.beta2, o.eps, o.weight_decay);
                opt.step = o.step;
                for (i, p) in model.params.iter().enumerate() {
                    for (prefix, slot) in [(ADAM_M, &mut opt.m[i]), (ADAM_V, &mut opt.v[i])] {
                        let e = find(&format!("{prefix}{}", p.name))
                            .ok_or_else(|| CheckpointError::Mismatch(format!("missing moment {prefix}{}", p.name)))?;
                        let t = read(e)?;
                        if t.shape() != p.value.shape() {
                            return Err(CheckpointError::Mismatch(format!("{prefix}{}: shape", p.name)));
                        }
                        *slot = t;
                    }
                }
                Some(opt)
            }
        };
        Ok(Self {
            model,
            optimizer,
            epoch: header.epoch,
            seed: header.seed,
            stage: header.stage,
            eval_accuracy: header.eval_accuracy,
            train_config: header.train_config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::QuantMode;

    fn model() -> Vit {
        let cfg = ModelConfig {
            image_size: 16,
            embed_dim: 16,
            depth: 1,
            heads: 2,
            mlp_dim: 32,
            num_classes: 3,
            quant_mode: QuantMode::Learned,
            ..ModelConfig::toy()
        };
        let mut m = Vit::new(cfg, 3).unwrap();
        m.snap_to_f32();
        m.quantizers[4].state.b_tilde = 4.371;
        m.quantizers[5].state.frozen_bit = Some(3);
        m.quantizers[6].state.scales[2] = 0.1 + 1e-17;
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let mut ck = Checkpoint::new(m.clone(), Stage::Search);
        ck.epoch = 7;
        ck.seed = 42;
        ck.eval_accuracy = Some(0.625);
        let mut opt = AdamW::new(&m.params, 0.9, 0.999, 1e-8, 0.05);
        opt.step = 11;
        opt.m[0].data_mut()[0] = 0.25;
        ck.optimizer = Some(opt.clone());
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.model, m);
        assert_eq!(back.optimizer, Some(opt));
        assert_eq!((back.epoch, back.seed, back.stage, back.eval_accuracy), (7, 42, Stage::Search, Some(0.625)));
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn layout_preamble() {
        let bytes = Checkpoint::new(model(), Stage::Float).to_bytes();
        assert_eq!(&bytes[..4], b"QVCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        let hl = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hl]).unwrap();
        let n: usize = model().params.iter().map(|p| p.value.len()).sum();
        assert_eq!(bytes.len() - 16 - hl, 4 * n);
        assert_eq!(header["tensors"][0]["dtype"], "f32");
        assert_eq!(header["tensors"][0]["offset"], 0);
        assert_eq!(header["quantizers"][4]["state"]["b_tilde"], 4.371);
    }

    #[test]
    fn malformed_inputs_have_distinct_errors() {
        let bytes = Checkpoint::new(model(), Stage::Float).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::UnsupportedVersion(9))));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(CheckpointError::PayloadLength { .. })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(CheckpointError::PayloadLength { .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..10]), Err(CheckpointError::Truncated { .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..40]), Err(CheckpointError::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[17] = b'!';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::Header(_))));
    }
}
