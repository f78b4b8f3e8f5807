//! SKF1 checkpoint files.
//!
//! Layout, all integers little-endian:
//! `"SKF1"`, 32-byte network config digest, `u64` header length, header
//! JSON, `u64` block count, then per tensor block `u32` name length, name,
//! `u32` rank, `u64` extents, raw `f64` values. A SHA-256 of everything
//! before it closes the file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::networks::{Critic, CriticKind, DiscriminatorState, NetworkConfig, Networks};

const MAGIC: &[u8; 4] = b"SKF1";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    network: NetworkConfig,
    critic: CriticKind,
    critic_state: Option<DiscriminatorState>,
    metadata: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: NetworkConfig,
    pub critic: CriticKind,
    pub critic_state: Option<DiscriminatorState>,
    /// Free-form training state (epoch, step, configs).
    pub metadata: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_networks(nets: &Networks, metadata: serde_json::Value) -> Checkpoint {
        let tensors = nets
            .named_parameters()
            .into_iter()
            .map(|(name, t)| NamedTensor { name, shape: t.shape().to_vec(), data: t.to_vec() })
            .collect();
        let critic_state = match &nets.critic {
            Critic::Progressive(d) => Some(d.state()),
            Critic::Mlp(_) => None,
        };
        Checkpoint { network: nets.config.clone(), critic: nets.critic_kind(), critic_state, metadata, tensors }
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        self.tensors.push(NamedTensor { name: name.into(), shape, data });
    }

    /// Builds networks of the stored architecture and loads every parameter.
    pub fn restore(&self) -> Result<Networks> {
        let mut nets = Networks::new(&self.network, self.critic, 0)?;
        self.load_into(&mut nets)?;
        Ok(nets)
    }

    /// Copies stored values into `nets`, which must have the same
    /// architecture. Every parameter must be present with its exact shape.
    pub fn load_into(&self, nets: &mut Networks) -> Result<()> {
        if nets.config != self.network || nets.critic_kind() != self.critic {
            return Err(Error::Checkpoint("architecture differs from the checkpoint".into()));
        }
        for (name, p) in nets.named_parameters() {
            let t = self.tensor(&name).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape != p.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape,
                    p.shape()
                )));
            }
            p.set_data(&t.data)?;
        }
        if let (Critic::Progressive(d), Some(state)) = (&mut nets.critic, self.critic_state) {
            d.set_state(state).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            network: self.network.clone(),
            critic: self.critic,
            critic_state: self.critic_state,
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.network.digest());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &e in &t.shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |msg: &str| Error::Checkpoint(format!("invalid SKF1 file: {msg}"));
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        if bytes.len() < 4 + 32 + 8 + 8 + 32 {
            return Err(bad("truncated"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let digest: [u8; 32] = r.take(32).ok_or_else(|| bad("truncated digest"))?.try_into().expect("32 bytes");
        let header_len = r.u64().ok_or_else(|| bad("truncated header length"))? as usize;
        let json = r.take(header_len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| bad(&format!("header: {e}")))?;
        if header.network.digest() != digest {
            return Err(bad("config digest does not match header"));
        }
        let count = r.u64().ok_or_else(|| bad("truncated block count"))?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u32().ok_or_else(|| bad("truncated block"))? as usize;
            let name = r.take(name_len).ok_or_else(|| bad("truncated name"))?;
            let name = String::from_utf8(name.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
            let rank = r.u32().ok_or_else(|| bad("truncated rank"))? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64().ok_or_else(|| bad("truncated extents"))? as usize);
            }
            let n = shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e)).ok_or_else(|| bad("extent overflow"))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| bad("extent overflow"))?).ok_or_else(|| bad("truncated data"))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        header.network.validate().map_err(|e| bad(&e.to_string()))?;
        Ok(Checkpoint {
            network: header.network,
            critic: header.critic,
            critic_state: header.critic_state,
            metadata: header.metadata,
            tensors,
        })
    }

    /// Writes the file and returns its digest.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let bytes = self.to_bytes();
        std::fs::write(path.as_ref(), &bytes).map_err(|e| Error::io(path.as_ref(), e))?;
        Ok(file_digest(&bytes))
    }

    /// Reads a file, returning the checkpoint and the file digest.
    pub fn load(path: impl AsRef<Path>) -> Result<(Checkpoint, String)> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Ok((Checkpoint::from_bytes(&bytes)?, file_digest(&bytes)))
    }
}

/// Hex SHA-256 of a checkpoint file's bytes.
pub fn file_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}
