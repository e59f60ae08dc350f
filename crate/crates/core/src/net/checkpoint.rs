//! Binary checkpoint: magic, version, JSON header, raw parameters.
//!
//! ```text
//! offset  size  content
//! 0       8     b"STADCKPT"
//! 8       4     format version, u32 little endian
//! 12      4     header length H in bytes, u32 little endian
//! 16      H     UTF-8 JSON header
//! 16+H    8*N   parameters, IEEE-754 f64 little endian, N = header.n_params
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mlp::{Activation, FieldNet, TimeEmbedding};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STADCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub steps: u64,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    layer_dims: Vec<usize>,
    activation: Activation,
    time_embedding: TimeEmbedding,
    context_dim: usize,
    n_params: usize,
    #[serde(default)]
    schedule: Option<serde_json::Value>,
    metadata: CheckpointMeta,
    #[serde(default)]
    extras: serde_json::Value,
}

/// A network plus the context needed to use it again.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: FieldNet,
    /// Serialized schedule the network was trained under.
    pub schedule: Option<serde_json::Value>,
    pub meta: CheckpointMeta,
    /// Free-form role-specific data (cutoff radius, normalization, ...).
    pub extras: serde_json::Value,
}

impl Checkpoint {
    pub fn new(net: FieldNet, meta: CheckpointMeta) -> Self {
        Self {
            net,
            schedule: None,
            meta,
            extras: serde_json::Value::Null,
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            layer_dims: self.net.layer_dims().to_vec(),
            activation: self.net.activation(),
            time_embedding: self.net.time_embedding(),
            context_dim: self.net.context_dim(),
            n_params: self.net.n_params(),
            schedule: self.schedule.clone(),
            metadata: CheckpointMeta {
                final_loss: self.meta.final_loss.filter(|v| v.is_finite()),
                ..self.meta.clone()
            },
            extras: self.extras.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        let mut block = Vec::with_capacity(8 * self.net.n_params());
        for p in self.net.params() {
            block.extend_from_slice(&p.to_le_bytes());
        }
        w.write_all(&block)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut fixed = [0u8; 16];
        r.read_exact(&mut fixed).map_err(|_| Error::Checkpoint("truncated preamble".into()))?;
        if &fixed[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(fixed[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u32::from_le_bytes(fixed[12..16].try_into().unwrap()) as usize;
        let mut json = vec![0u8; hlen];
        r.read_exact(&mut json).map_err(|_| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&json)?;
        let mut block = Vec::new();
        r.read_to_end(&mut block)?;
        if block.len() != 8 * header.n_params {
            return Err(Error::Checkpoint(format!(
                "parameter block has {} bytes, header declares {} parameters",
                block.len(),
                header.n_params
            )));
        }
        let params: Vec<f64> = block.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        let net = FieldNet::from_params(
            &header.layer_dims,
            header.activation,
            header.time_embedding,
            header.context_dim,
            params,
        )
        .map_err(|e| Error::Checkpoint(format!("header/parameter mismatch: {e}")))?;
        net.check_finite()?;
        Ok(Self {
            net,
            schedule: header.schedule,
            meta: header.metadata,
            extras: header.extras,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}
