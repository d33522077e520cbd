//! Parameter checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"AIMECKPT"            8-byte magic
//! u32                    format version (1)
//! u64                    header length N
//! [u8; N]                UTF-8 JSON header
//! [f64 LE; …]            concatenated tensor payloads
//! ```
//!
//! The header lists every tensor with its name, shape and element offset
//! into the payload, plus the hash of the configuration that produced it
//! and free-form metadata.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{Error, Result};
use crate::params::Parameters;

const MAGIC: &[u8; 8] = b"AIMECKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config_hash: String,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_hash: String,
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Array>,
}

pub fn encode(params: &dyn Parameters, config_hash: &str, meta: serde_json::Value) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    let mut offset = 0;
    params.visit(&mut |name, a| {
        entries.push(Entry { name: name.to_string(), shape: a.shape().to_vec(), offset });
        offset += a.len();
        payload.extend_from_slice(&a.to_le_bytes());
    });
    let header = serde_json::to_vec(&Header {
        config_hash: config_hash.to_string(),
        meta,
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(20 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])?;
    let payload = &body[hlen..];
    if payload.len() % 8 != 0 {
        return Err(bad("payload is not a whole number of f64 values"));
    }
    let floats: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut tensors = BTreeMap::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let data = floats
            .get(e.offset..e.offset + n)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past the payload", e.name)))?;
        tensors.insert(e.name, Array::new(e.shape, data.to_vec())?);
    }
    Ok(Checkpoint { config_hash: header.config_hash, meta: header.meta, tensors })
}

pub fn save(
    path: &Path,
    params: &dyn Parameters,
    config_hash: &str,
    meta: serde_json::Value,
) -> Result<()> {
    fs::write(path, encode(params, config_hash, meta)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

impl Checkpoint {
    /// Overwrite every array of `params` from this checkpoint; names and
    /// shapes must match exactly.
    pub fn restore_into(&self, params: &mut dyn Parameters) -> Result<()> {
        let mut err = None;
        let mut seen = 0;
        params.visit_mut(&mut |name, a| {
            if err.is_some() {
                return;
            }
            match self.tensors.get(name) {
                Some(t) if t.shape() == a.shape() => {
                    a.data_mut().copy_from_slice(t.data());
                    seen += 1;
                }
                Some(t) => {
                    err = Some(Error::Checkpoint(format!(
                        "{name}: stored shape {:?}, expected {:?}",
                        t.shape(),
                        a.shape()
                    )))
                }
                None => err = Some(Error::Checkpoint(format!("{name} missing"))),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if seen != self.tensors.len() {
            return Err(Error::Checkpoint("checkpoint holds unexpected tensors".into()));
        }
        Ok(())
    }
}
