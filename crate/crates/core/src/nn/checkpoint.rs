//! Model checkpoint files.
//!
//! Layout: the 8-byte magic `RISDMLCK`, a little-endian `u32` header length,
//! a JSON header, then every tensor of [`ModelParams::to_flat`] as
//! little-endian `f64`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{ArchConfig, ModelParams};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"RISDMLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config_hash: String,
    pub regions: usize,
    pub channel_dim: usize,
    pub q_shape: (usize, usize),
    pub arch: ArchConfig,
    pub values: usize,
}

/// SHA-256 of the parameter blob, hex encoded.
pub fn params_hash(params: &ModelParams) -> String {
    let mut h = Sha256::new();
    for v in params.to_flat() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn write_checkpoint<W: Write>(mut w: W, params: &ModelParams, config_hash: &str) -> Result<()> {
    let flat = params.to_flat();
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        config_hash: config_hash.to_string(),
        regions: params.arch.regions,
        channel_dim: params.arch.channel_dim,
        q_shape: params.arch.q_shape,
        arch: params.arch,
        values: flat.len(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let mut blob = Vec::with_capacity(flat.len() * 8);
    for v in flat {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&blob)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(CheckpointHeader, ModelParams)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::input("not a checkpoint file"));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::input(format!("unsupported checkpoint version {}", header.version)));
    }
    let mut params = ModelParams::init(header.arch, 0)?;
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    if blob.len() != header.values * 8 {
        return Err(Error::input("truncated checkpoint blob"));
    }
    let flat: Vec<f64> = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    params.load_flat(&flat)?;
    Ok((header, params))
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, config_hash: &str) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(f, params, config_hash)
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ModelParams)> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let p = ModelParams::init(ArchConfig::new((4, 2), 8, 2), 9).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p, "abc").unwrap();
        let (h, q) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(h.config_hash, "abc");
        assert_eq!(h.q_shape, (4, 2));
        assert_eq!(q, p);
        assert_eq!(params_hash(&q), params_hash(&p));
        buf[0] = b'X';
        assert!(read_checkpoint(buf.as_slice()).is_err());
    }
}
