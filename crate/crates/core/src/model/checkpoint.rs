//! Checkpoint files.
//!
//! Little-endian header followed by `f64` parameter blocks in the fixed
//! order `W_e, b_e, W_f, b` and, when the metric rank is non-zero, the
//! stacked metric factors.
//!
//! | offset | size | field                                 |
//! |--------|------|---------------------------------------|
//! | 0      | 4    | magic `WSCK`                          |
//! | 4      | 4    | version (`u32`, = 1)                  |
//! | 8      | 4    | feature dimension `d`                 |
//! | 12     | 4    | class count `C`                       |
//! | 16     | 8    | clip bound κ (`f64`)                  |
//! | 24     | 1    | classifier input (0 embedded, 1 raw)  |
//! | 25     | 3    | reserved, zero                        |
//! | 28     | 4    | metric factor rank `r` (0 = none)     |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ClassifierInput, ModelParams};
use crate::numeric::Matrix;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"WSCK";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f64>,
    pub kappa: f64,
    pub classifier_input: ClassifierInput,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let mut buf = Vec::with_capacity(HEADER_LEN + 8 * p.num_params());
        buf.extend_from_slice(&CHECKPOINT_MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(p.dim() as u32).to_le_bytes());
        buf.extend_from_slice(&(p.num_classes() as u32).to_le_bytes());
        buf.extend_from_slice(&self.kappa.to_le_bytes());
        buf.push(match self.classifier_input {
            ClassifierInput::Embedded => 0,
            ClassifierInput::Raw => 1,
        });
        buf.extend_from_slice(&[0u8; 3]);
        buf.extend_from_slice(&(p.metric_rank() as u32).to_le_bytes());
        for (_, block) in p.blocks() {
            for x in block {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fmt = |offset: usize, msg: String| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            msg,
        };
        if bytes.len() < HEADER_LEN {
            return Err(fmt(
                bytes.len(),
                format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
            ));
        }
        if bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(fmt(0, "bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        if u32_at(4) != VERSION as usize {
            return Err(fmt(4, format!("unsupported version {}", u32_at(4))));
        }
        let d = u32_at(8);
        let c = u32_at(12);
        if d == 0 || c == 0 {
            return Err(fmt(8, format!("invalid dimensions d={d}, C={c}")));
        }
        let kappa = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
        if !(kappa > 0.0) {
            return Err(fmt(16, format!("invalid kappa {kappa}")));
        }
        let classifier_input = match bytes[24] {
            0 => ClassifierInput::Embedded,
            1 => ClassifierInput::Raw,
            other => return Err(fmt(24, format!("unknown classifier input tag {other}"))),
        };
        let rank = u32_at(28);
        let count = d * d + d + c * d + c + c * rank * d;
        let expected = HEADER_LEN + 8 * count;
        if bytes.len() != expected {
            return Err(fmt(
                bytes.len().min(expected),
                format!("expected {expected} bytes, file has {}", bytes.len()),
            ));
        }
        let values: Vec<f64> = bytes[HEADER_LEN..]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if let Some(pos) = values.iter().position(|x| !x.is_finite()) {
            return Err(fmt(HEADER_LEN + 8 * pos, "non-finite parameter".into()));
        }
        let mut params = ModelParams {
            embed_weight: Matrix::zeros(d, d),
            embed_bias: vec![0.0; d],
            class_weight: Matrix::zeros(c, d),
            class_bias: vec![0.0; c],
            metric_factors: (rank > 0).then(|| Matrix::zeros(c * rank, d)),
        };
        params.assign_flat(&values)?;
        Ok(Self {
            params,
            kappa,
            classifier_input,
        })
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
