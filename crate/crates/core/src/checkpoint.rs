//! Versioned binary checkpoints for trainable parameter sets.
//!
//! Layout (little-endian): 8-byte magic, `u32` format version, `u32`
//! embedding dimension, `u32` metadata length followed by that many bytes
//! of JSON metadata, `u32` parameter count, then per parameter a `u16` name
//! length, the name, a `u32` rank, `rank` `u32` dims and the values as
//! `f64`.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

pub const FORMAT_VERSION: u32 = 1;

pub const USER_ENCODER_MAGIC: &[u8; 8] = b"CFRAGUSR";
pub const RETRIEVER_MAGIC: &[u8; 8] = b"CFRAGRET";
pub const RERANKER_MAGIC: &[u8; 8] = b"CFRAGRRK";

pub type ParamMap = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub dim: usize,
    pub meta: serde_json::Value,
    pub params: ParamMap,
}

pub fn encode(
    magic: &[u8; 8],
    dim: usize,
    meta: &serde_json::Value,
    store: &ParamStore,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    let meta = serde_json::to_vec(meta)?;
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(magic: &[u8; 8], mut input: impl Read) -> std::result::Result<Checkpoint, String> {
    let mut head = [0u8; 8];
    input
        .read_exact(&mut head)
        .map_err(|_| "truncated header")?;
    if &head != magic {
        return Err(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&head),
            String::from_utf8_lossy(magic)
        ));
    }
    let version = read_u32(&mut input)?;
    if version != FORMAT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let dim = read_u32(&mut input)? as usize;
    let meta_len = read_u32(&mut input)? as usize;
    let meta_bytes = read_bytes(&mut input, meta_len)?;
    let meta = serde_json::from_slice(&meta_bytes).map_err(|e| format!("metadata: {e}"))?;
    let count = read_u32(&mut input)?;
    let mut params = ParamMap::new();
    for _ in 0..count {
        let mut len = [0u8; 2];
        input
            .read_exact(&mut len)
            .map_err(|_| "truncated parameter")?;
        let name = String::from_utf8(read_bytes(&mut input, u16::from_le_bytes(len) as usize)?)
            .map_err(|_| "parameter name is not UTF-8")?;
        let rank = read_u32(&mut input)? as usize;
        if rank > 2 {
            return Err(format!("parameter `{name}` has rank {rank}"));
        }
        let shape = (0..rank)
            .map(|_| read_u32(&mut input).map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = read_bytes(&mut input, n * 8)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(format!("parameter `{name}` has non-finite values"));
        }
        params.insert(name, (shape, values));
    }
    Ok(Checkpoint { dim, meta, params })
}

fn read_u32(input: &mut impl Read) -> std::result::Result<u32, String> {
    let mut b = [0u8; 4];
    input
        .read_exact(&mut b)
        .map_err(|_| "truncated checkpoint")?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes(input: &mut impl Read, n: usize) -> std::result::Result<Vec<u8>, String> {
    let mut buf = vec![0u8; n];
    input
        .read_exact(&mut buf)
        .map_err(|_| "truncated checkpoint")?;
    Ok(buf)
}

pub fn save(
    path: impl AsRef<Path>,
    magic: &[u8; 8],
    dim: usize,
    meta: &serde_json::Value,
    store: &ParamStore,
) -> Result<()> {
    std::fs::write(path, encode(magic, dim, meta, store)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>, magic: &[u8; 8]) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    decode(magic, bytes.as_slice()).map_err(|message| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    })
}

/// Checks a loaded checkpoint against the configured dimension.
pub fn expect_dim(ck: &Checkpoint, dim: usize, path: &Path) -> Result<()> {
    if ck.dim != dim {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            message: format!(
                "checkpoint dimension {} does not match configured {dim}",
                ck.dim
            ),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn round_trip() {
        let mut store = ParamStore::new();
        store.add(
            "a",
            Tensor::matrix(2, 2, vec![1.0, -2.5, 3.25, 1e-300]).unwrap(),
        );
        store.add("b", Tensor::row(vec![0.1, 0.2, 0.3]));
        let meta = serde_json::json!({"alpha": 0.5});
        let bytes = encode(RETRIEVER_MAGIC, 2, &meta, &store).unwrap();
        let ck = decode(RETRIEVER_MAGIC, bytes.as_slice()).unwrap();
        assert_eq!(ck.dim, 2);
        assert_eq!(ck.meta, meta);
        assert_eq!(ck.params, store.to_map());
    }

    #[test]
    fn wrong_magic_rejected() {
        let store = ParamStore::new();
        let bytes = encode(RETRIEVER_MAGIC, 2, &serde_json::Value::Null, &store).unwrap();
        assert!(decode(RERANKER_MAGIC, bytes.as_slice()).is_err());
    }
}
