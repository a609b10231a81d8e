//! Checkpoint file layout (all integers little-endian):
//!
//! ```text
//! magic  b"FSGCKPT\0"
//! u32    format version
//! u32    header length, then that many bytes of JSON metadata
//! u32    record count, then per record:
//!        u32 name length, name bytes (UTF-8), u32 rank, rank x u64 dims,
//!        product(dims) x f32 values
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ArchConfig, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FSGCKPT\0";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    Segnet,
    Dfnet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub kind: NetKind,
    pub arch: ArchConfig,
    pub seed: u64,
    /// Training phase that produced the weights, e.g. `clean_baseline`.
    pub phase: String,
    /// Stage marker consumed by later phases (`basic`, `final`).
    pub tag: Option<String>,
    pub iteration: u64,
    pub frozen: bool,
    /// Run configuration that produced the checkpoint.
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta, params: ParamSet) -> Self {
        Checkpoint { meta, params }
    }

    /// Content hash of the parameters, hex, 16 characters.
    pub fn id(&self) -> String {
        params_id(&self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.meta).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(self.params.num_scalars() * 4 + header.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = read_u32(&mut r)? as usize;
        let header = take(&mut r, hlen)?;
        let meta: CheckpointMeta =
            serde_json::from_slice(header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let count = read_u32(&mut r)?;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let nlen = read_u32(&mut r)? as usize;
            let name = std::str::from_utf8(take(&mut r, nlen)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let raw = take(&mut r, n.checked_mul(4).ok_or_else(|| Error::Format("shape overflow".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes in checkpoint", r.len())));
        }
        if !params.all_finite() {
            return Err(Error::NumericInput("checkpoint contains non-finite parameters".into()));
        }
        Ok(Checkpoint { meta, params })
    }

    /// Writes to a temporary sibling, then renames into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(reason) => Error::Integrity {
                path: path.into(),
                reason,
            },
            other => other,
        })
    }
}

pub fn params_id(params: &ParamSet) -> String {
    let digest = Sha256::digest(params.to_le_bytes());
    hex::encode(&digest[..8])
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Format("truncated checkpoint".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Format("truncated checkpoint".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{build_dfnet, NetKind};

    #[test]
    fn round_trip_is_lossless() {
        let arch = ArchConfig::default();
        let ck = Checkpoint::new(
            CheckpointMeta {
                kind: NetKind::Dfnet,
                arch: arch.clone(),
                seed: 3,
                phase: "pretrain_basic".into(),
                tag: Some("basic".into()),
                iteration: 17,
                frozen: false,
                config: serde_json::json!({"a": 1}),
            },
            build_dfnet(&arch, 3).unwrap(),
        );
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.id(), ck.id());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
