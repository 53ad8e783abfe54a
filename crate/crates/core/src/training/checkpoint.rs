//! Binary checkpoint format.
//!
//! ```text
//! magic      6 bytes  "DCLDM1"
//! version    u16
//! config     u64 byte length, then UTF-8 key=value lines
//! count      u64
//! per tensor u32 name length, UTF-8 name, u32 rank, rank × u64 extents,
//!            numel × f32 payload
//! ```
//!
//! All integers and floats are little-endian. Values are stored as f32, so
//! [`Checkpoint::insert`] rounds every tensor through f32 on the way in; a
//! checkpoint held in memory therefore equals its reloaded copy bitwise.
//! Iteration and optimizer step counters travel in the config blob under
//! the `checkpoint.` key prefix.

use std::collections::HashSet;
use std::path::Path;

use thiserror::Error;

use crate::error::{Error as CrateError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"DCLDM1";
pub const VERSION: u16 = 1;

const ITERATION_KEY: &str = "checkpoint.iteration";
const STEP_KEY: &str = "checkpoint.optimizer_step";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("tensor name `{0}` appears twice")]
    NameCollision(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub iteration: u64,
    pub optimizer_step: u64,
    tensors: Vec<(String, Tensor)>,
}

fn round_f32(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

impl Checkpoint {
    pub fn new(config_text: impl Into<String>, iteration: u64, optimizer_step: u64) -> Self {
        Self {
            config_text: config_text.into(),
            iteration,
            optimizer_step,
            tensors: Vec::new(),
        }
    }

    /// Add a tensor, rounded to f32 precision.
    pub fn insert(&mut self, name: &str, tensor: &Tensor) -> std::result::Result<(), CheckpointError> {
        if self.tensors.iter().any(|(n, _)| n == name) {
            return Err(CheckpointError::NameCollision(name.to_string()));
        }
        self.tensors.push((name.to_string(), round_f32(tensor)));
        Ok(())
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor)> + 'a {
        self.tensors
            .iter()
            .filter_map(move |(n, t)| n.strip_prefix(prefix).map(|rest| (rest, t)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blob = self.config_text.clone();
        if !blob.is_empty() && !blob.ends_with('\n') {
            blob.push('\n');
        }
        blob.push_str(&format!("{ITERATION_KEY}={}\n{STEP_KEY}={}\n", self.iteration, self.optimizer_step));
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        out.extend_from_slice(blob.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u16::from_le_bytes(r.array("version")?);
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let blob_len = r.len_u64("config length")?;
        let blob = std::str::from_utf8(r.take(blob_len, "config")?)
            .map_err(|_| CheckpointError::Malformed("config is not UTF-8".into()))?;
        let mut ckpt = Checkpoint::default();
        let mut config_lines = Vec::new();
        for line in blob.lines() {
            let parse = |v: &str| {
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| CheckpointError::Malformed(format!("bad counter line `{line}`")))
            };
            if let Some(v) = line.strip_prefix(ITERATION_KEY).and_then(|r| r.strip_prefix('=')) {
                ckpt.iteration = parse(v)?;
            } else if let Some(v) = line.strip_prefix(STEP_KEY).and_then(|r| r.strip_prefix('=')) {
                ckpt.optimizer_step = parse(v)?;
            } else {
                config_lines.push(line);
            }
        }
        ckpt.config_text = config_lines.iter().map(|l| format!("{l}\n")).collect();
        let count = r.len_u64("tensor count")?;
        let mut seen = HashSet::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(r.array("name length")?) as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(CheckpointError::NameCollision(name));
            }
            let rank = u32::from_le_bytes(r.array("rank")?) as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.len_u64("extent")?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some())
                .ok_or_else(|| CheckpointError::Malformed(format!("extents of `{name}` overflow")))?;
            let payload = r.take(numel * 4, "payload")?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            ckpt.tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(ckpt)
    }

    /// Write atomically via a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| CrateError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| CrateError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CrateError::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> std::result::Result<[u8; N], CheckpointError> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn len_u64(&mut self, what: &'static str) -> std::result::Result<usize, CheckpointError> {
        let v = u64::from_le_bytes(self.array(what)?);
        usize::try_from(v).map_err(|_| CheckpointError::Malformed(format!("{what} {v} too large")))
    }
}
