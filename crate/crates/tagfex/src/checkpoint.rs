//! Versioned single-file checkpoints.
//!
//! Layout: magic, `u32` version, `u64` header length, JSON header, every
//! parameter array as little-endian `f64` in header order, then the SHA-256
//! of all preceding bytes. All integers are little-endian.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tagfex_core::data::TaskDataset;
use tagfex_core::learner::{Learner, LearnerState};
use tagfex_core::Tensor;

use crate::artifacts::TaskRecord;
use crate::fsutil::write_atomic;

pub const MAGIC: &[u8; 8] = b"TGFXCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config_hash: String,
    /// Class set of every task in stream order.
    pub task_classes: Vec<Vec<usize>>,
    pub history: Vec<TaskRecord>,
    pub state: LearnerState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn capture(learner: &Learner, config_hash: &str, task_classes: Vec<Vec<usize>>, history: Vec<TaskRecord>) -> Self {
        Self {
            header: Header {
                config_hash: config_hash.into(),
                task_classes,
                history,
                state: learner.state(),
            },
            tensors: learner.store.iter().map(|(_, _, t)| t.clone()).collect(),
        }
    }

    pub fn restore(self, tasks: &[TaskDataset]) -> Result<(Learner, Vec<TaskRecord>)> {
        let history = self.header.history;
        Ok((Learner::from_state(self.header.state, self.tensors, tasks)?, history))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let floats: usize = self.tensors.iter().map(Tensor::len).sum();
        let mut out = Vec::with_capacity(8 + 4 + 8 + header.len() + 8 * floats + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        ensure!(bytes.len() >= 8 + 4 + 8 + 32, "checkpoint truncated");
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        ensure!(Sha256::digest(body).as_slice() == digest, "checkpoint checksum mismatch");
        ensure!(&body[..8] == MAGIC, "not a checkpoint file");
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            bail!("unsupported checkpoint version {version}");
        }
        let len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let rest = &body[20..];
        ensure!(rest.len() >= len, "checkpoint header truncated");
        let header: Header = serde_json::from_slice(&rest[..len]).context("checkpoint header")?;
        let mut payload = rest[len..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let expected: usize = header.state.params.iter().map(|m| m.shape.iter().product::<usize>()).sum();
        ensure!(rest.len() - len == 8 * expected, "checkpoint payload holds {} bytes, expected {}", rest.len() - len, 8 * expected);
        let tensors = header
            .state
            .params
            .iter()
            .map(|m| {
                let n = m.shape.iter().product();
                Tensor::new(&m.shape, payload.by_ref().take(n).collect()).map_err(anyhow::Error::from)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))
    }
}
