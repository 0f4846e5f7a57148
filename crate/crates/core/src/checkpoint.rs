//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset 0   8 bytes   magic "DIFFLAB\0"
//! offset 8   u32       format version (currently 1)
//! offset 12  u64       header length H in bytes
//! offset 20  H bytes   UTF-8 JSON header (see `Header`)
//! then       f64 LE    parameter values, tensors in header order, row-major
//! ```
//!
//! The header records the denoiser config, parameterization, time stride,
//! noise schedule descriptor, run seed and every tensor's name and shape.
//! Loading fails unless the shapes match the config and the payload length
//! matches the header exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserConfig, DenoiserModel};
use crate::diffusion::Parameterization;
use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, ScheduleSpec};
use crate::tensor::{Parameter, Tensor};

pub const MAGIC: &[u8; 8] = b"DIFFLAB\0";
pub const FORMAT_VERSION: u32 = 1;

/// A trained model together with the schedule it samples on.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DenoiserModel,
    pub schedule: ScheduleSpec,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: DenoiserConfig,
    parameterization: Parameterization,
    time_stride: usize,
    schedule: ScheduleSpec,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(model: DenoiserModel, schedule: ScheduleSpec, seed: u64) -> Self {
        Self { model, schedule, seed }
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(&self.schedule)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.model.config.clone(),
            parameterization: self.model.parameterization,
            time_stride: self.model.time_stride,
            schedule: self.schedule.clone(),
            seed: self.seed,
            tensors: self
                .model
                .params
                .iter()
                .map(|p| TensorEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.model.num_weights());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.model.params {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
        if header.format_version != version {
            return Err(bad("header and preamble disagree on the format version"));
        }
        let mut payload = &body[hlen..];
        let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if payload.len() != expected * 8 {
            return Err(bad(format!(
                "payload holds {} bytes, header describes {}",
                payload.len(),
                expected * 8
            )));
        }
        let mut params = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let (chunk, rest) = payload.split_at(n * 8);
            payload = rest;
            let data = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            params.push(Parameter::new(entry.name, Tensor::new(entry.shape, data)?));
        }
        let model = DenoiserModel {
            config: header.config,
            params,
            parameterization: header.parameterization,
            time_stride: header.time_stride,
        };
        model.validate().map_err(|e| bad(e.to_string()))?;
        NoiseSchedule::build(&header.schedule).map_err(|e| bad(format!("schedule: {e}")))?;
        Ok(Self {
            model,
            schedule: header.schedule,
            seed: header.seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)
            .map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Fails unless the stored model accepts `input_dim` data and `condition_dim` conditions.
    pub fn expect_dims(&self, input_dim: usize, condition_dim: usize) -> Result<()> {
        let c = &self.model.config;
        if c.input_dim != input_dim || c.condition_dim != condition_dim {
            return Err(bad(format!(
                "checkpoint is for input_dim {} / condition_dim {}, requested {input_dim} / {condition_dim}",
                c.input_dim, c.condition_dim
            )));
        }
        Ok(())
    }
}
