//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic "SRISP001" | u64 header length | header JSON | f32 payload
//! ```
//!
//! The header lists every tensor as `{name, shape, offset, length}` with byte
//! offsets into the payload. Encoding is deterministic, so save → load → save
//! reproduces the file byte for byte.

use std::collections::HashSet;
use std::path::Path;

use revisp_core::selector::{Model, ParamStore};
use revisp_core::trainer::{Adam, Trainer};
use revisp_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::{sha256_hex, RunConfig};
use crate::error::{format_err, io_err, Error, Result};

pub const MAGIC: &[u8; 8] = b"SRISP001";
pub const CHECKPOINT_SCHEMA: u32 = 1;

const STUDENT: &str = "student/";
const TEACHER: &str = "teacher/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    /// Byte length; always `4 · numel`.
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub steps: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub schema: u32,
    pub epoch: u64,
    pub step: u64,
    pub optimizer: OptimizerHeader,
    pub config: RunConfig,
    pub config_hash: String,
    pub tensors: Vec<TensorEntry>,
}

/// Complete training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub step: usize,
    pub config: RunConfig,
    pub student: Model,
    pub teacher: Model,
    pub adam: Adam,
}

impl Checkpoint {
    /// Fresh state: teacher equals student, zero moments.
    pub fn new(config: RunConfig, student: Model) -> Self {
        Self {
            epoch: 0,
            step: 0,
            adam: Adam::new(&student.params),
            teacher: student.clone(),
            student,
            config,
        }
    }

    pub fn from_trainer(trainer: &Trainer, config: &RunConfig) -> Self {
        let mut config = config.clone();
        config.train = trainer.config.clone();
        Self {
            epoch: trainer.epoch,
            step: trainer.step,
            config,
            student: trainer.student.clone(),
            teacher: trainer.teacher.clone(),
            adam: trainer.adam.clone(),
        }
    }

    pub fn into_trainer(self) -> Trainer {
        Trainer::from_parts(
            self.config.train,
            self.student,
            self.teacher,
            Some(self.adam),
            self.epoch,
            self.step,
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let sections: [(&str, Vec<&Tensor>); 4] = [
            (STUDENT, self.student.params.tensors().iter().collect()),
            (TEACHER, self.teacher.params.tensors().iter().collect()),
            (ADAM_M, self.adam.m.iter().collect()),
            (ADAM_V, self.adam.v.iter().collect()),
        ];
        for (prefix, values) in sections {
            for (name, t) in self.student.params.names().iter().zip(values) {
                let offset = payload.len() as u64;
                for v in t.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
                tensors.push(TensorEntry {
                    name: format!("{prefix}{name}"),
                    shape: t.shape().to_vec(),
                    offset,
                    length: payload.len() as u64 - offset,
                });
            }
        }
        let header = Header {
            schema: CHECKPOINT_SCHEMA,
            epoch: self.epoch as u64,
            step: self.step as u64,
            optimizer: OptimizerHeader {
                steps: self.adam.steps,
                beta1: self.adam.beta1,
                beta2: self.adam.beta2,
                eps: self.adam.eps,
            },
            config: self.config.clone(),
            config_hash: self.config.hash(),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    /// Parses and validates `bytes`; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (header, payload) = read_header(bytes, path)?;
        let fail = |reason: String| format_err(path, reason);
        let tensor = |name: &str| -> Result<Tensor> {
            let e = header
                .tensors
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| fail(format!("missing tensor `{name}`")))?;
            let raw = &payload[e.offset as usize..(e.offset + e.length) as usize];
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Ok(Tensor::new(e.shape.clone(), data)?)
        };
        let student_names: Vec<String> = header
            .tensors
            .iter()
            .filter_map(|e| e.name.strip_prefix(STUDENT).map(str::to_owned))
            .collect();
        let section = |prefix: &str| -> Result<Vec<Tensor>> {
            student_names
                .iter()
                .map(|n| tensor(&format!("{prefix}{n}")))
                .collect()
        };
        let store = |tensors: Vec<Tensor>| -> Result<ParamStore> {
            let mut s = ParamStore::new();
            for (n, t) in student_names.iter().zip(tensors) {
                s.insert(n.clone(), t)?;
            }
            Ok(s)
        };
        let expected = 4 * student_names.len();
        if header.tensors.len() != expected {
            return Err(fail(format!(
                "expected {expected} tensors in four sections, found {}",
                header.tensors.len()
            )));
        }
        let model_cfg = header.config.train.model;
        let student = Model::from_params(model_cfg, store(section(STUDENT)?)?)?;
        let teacher = Model::from_params(model_cfg, store(section(TEACHER)?)?)?;
        let adam = Adam {
            beta1: header.optimizer.beta1,
            beta2: header.optimizer.beta2,
            eps: header.optimizer.eps,
            steps: header.optimizer.steps,
            m: section(ADAM_M)?,
            v: section(ADAM_V)?,
        };
        Ok(Self {
            epoch: header.epoch as usize,
            step: header.step as usize,
            config: header.config,
            student,
            teacher,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Validates the framing and directory and returns the header and payload.
pub fn read_header<'a>(bytes: &'a [u8], path: &Path) -> Result<(Header, &'a [u8])> {
    let fail = |reason: &str| format_err(path, reason);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(fail("not a checkpoint (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let end = 16u64
        .checked_add(len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| fail("header length exceeds the file"))? as usize;
    let header: Header =
        serde_json::from_slice(&bytes[16..end]).map_err(|e| format_err(path, e.to_string()))?;
    if header.schema != CHECKPOINT_SCHEMA {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            found: header.schema,
            expected: CHECKPOINT_SCHEMA,
        });
    }
    if header.config.hash() != header.config_hash {
        return Err(fail("config hash does not match the stored config"));
    }
    let payload = &bytes[end..];
    let mut names = HashSet::new();
    let mut spans = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        if !names.insert(e.name.as_str()) {
            return Err(format_err(path, format!("duplicate tensor `{}`", e.name)));
        }
        let numel: usize = e.shape.iter().product();
        if e.length != 4 * numel as u64 {
            return Err(format_err(
                path,
                format!("`{}`: length does not match shape", e.name),
            ));
        }
        match e.offset.checked_add(e.length) {
            Some(stop) if stop <= payload.len() as u64 => spans.push((e.offset, stop)),
            _ => return Err(format_err(path, format!("`{}`: out of bounds", e.name))),
        }
    }
    spans.sort_unstable();
    if spans.windows(2).any(|w| w[1].0 < w[0].1) {
        return Err(fail("tensor spans overlap"));
    }
    if spans.last().map_or(0, |s| s.1) != payload.len() as u64 {
        return Err(fail("payload has trailing bytes"));
    }
    Ok((header, payload))
}

/// SHA-256 of the checkpoint file, hex.
pub fn checkpoint_id(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(sha256_hex(&bytes))
}
