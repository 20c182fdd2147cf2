//! Binary embedding cache.
//!
//! Layout (little-endian): 8-byte magic `CFRAGEMB`, `u32` dimension,
//! `u32` entry count, then per entry a `u16` id length, the UTF-8 id bytes
//! and `dimension` `f32` values.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CACHE_MAGIC: &[u8; 8] = b"CFRAGEMB";

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingCache {
    pub dim: usize,
    pub entries: Vec<(String, Vec<f32>)>,
}

impl EmbeddingCache {
    pub fn new(dim: usize) -> Self {
        EmbeddingCache {
            dim,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, id: impl Into<String>, vector: &[f64]) {
        self.entries
            .push((id.into(), vector.iter().map(|x| *x as f32).collect()));
    }

    pub fn encode(&self, mut out: impl Write) -> Result<()> {
        out.write_all(CACHE_MAGIC)?;
        out.write_all(
            &u32::try_from(self.dim)
                .map_err(|_| fmt("dimension too large"))?
                .to_le_bytes(),
        )?;
        out.write_all(
            &u32::try_from(self.entries.len())
                .map_err(|_| fmt("too many entries"))?
                .to_le_bytes(),
        )?;
        for (id, v) in &self.entries {
            if v.len() != self.dim {
                return Err(Error::dim(format!(
                    "entry `{id}` has {} values, cache dimension {}",
                    v.len(),
                    self.dim
                )));
            }
            let len = u16::try_from(id.len())
                .map_err(|_| fmt(format!("id `{id}` longer than 65535 bytes")))?;
            out.write_all(&len.to_le_bytes())?;
            out.write_all(id.as_bytes())?;
            for x in v {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Decodes a cache, rejecting it when `expected_dim` is given and differs.
    pub fn decode(mut input: impl Read, expected_dim: Option<usize>) -> Result<Self> {
        let mut magic = [0u8; 8];
        input
            .read_exact(&mut magic)
            .map_err(|_| fmt("truncated header"))?;
        if &magic != CACHE_MAGIC {
            return Err(fmt("bad magic"));
        }
        let dim = read_u32(&mut input)? as usize;
        if let Some(exp) = expected_dim {
            if exp != dim {
                return Err(fmt(format!(
                    "cache dimension {dim} does not match configured {exp}"
                )));
            }
        }
        let count = read_u32(&mut input)? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let mut len = [0u8; 2];
            input
                .read_exact(&mut len)
                .map_err(|_| fmt("truncated entry"))?;
            let mut id = vec![0u8; u16::from_le_bytes(len) as usize];
            input.read_exact(&mut id).map_err(|_| fmt("truncated id"))?;
            let id = String::from_utf8(id).map_err(|_| fmt("id is not UTF-8"))?;
            let mut raw = vec![0u8; 4 * dim];
            input
                .read_exact(&mut raw)
                .map_err(|_| fmt("truncated vector"))?;
            let v = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push((id, v));
        }
        Ok(EmbeddingCache { dim, entries })
    }
}

fn fmt(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn read_u32(input: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    input
        .read_exact(&mut b)
        .map_err(|_| fmt("truncated header"))?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_embedding_cache(path: impl AsRef<Path>, cache: &EmbeddingCache) -> Result<()> {
    let mut buf = Vec::new();
    cache.encode(&mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_embedding_cache(
    path: impl AsRef<Path>,
    expected_dim: Option<usize>,
) -> Result<EmbeddingCache> {
    let bytes = std::fs::read(path)?;
    EmbeddingCache::decode(bytes.as_slice(), expected_dim)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EmbeddingCache {
        EmbeddingCache {
            dim: 3,
            entries: vec![
                ("a".into(), vec![0.1, -0.2, 0.3]),
                ("bb".into(), vec![f32::MIN_POSITIVE, 1.0, -0.0]),
                ("ççç".into(), vec![1e-30, 3.5, 7.25]),
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let mut buf = Vec::new();
        c.encode(&mut buf).unwrap();
        let back = EmbeddingCache::decode(buf.as_slice(), Some(3)).unwrap();
        assert_eq!(back.entries.len(), 3);
        for ((ia, va), (ib, vb)) in c.entries.iter().zip(&back.entries) {
            assert_eq!(ia, ib);
            let bits_a: Vec<u32> = va.iter().map(|x| x.to_bits()).collect();
            let bits_b: Vec<u32> = vb.iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn wrong_magic_rejected() {
        let mut buf = Vec::new();
        sample().encode(&mut buf).unwrap();
        buf[0] = b'X';
        assert!(matches!(
            EmbeddingCache::decode(buf.as_slice(), None),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut c = EmbeddingCache::new(768);
        c.push("doc", &vec![0.0; 768]);
        let mut buf = Vec::new();
        c.encode(&mut buf).unwrap();
        assert!(matches!(
            EmbeddingCache::decode(buf.as_slice(), Some(8)),
            Err(Error::Format(_))
        ));
        assert!(EmbeddingCache::decode(buf.as_slice(), Some(768)).is_ok());
    }

    #[test]
    fn truncated_file_rejected() {
        let mut buf = Vec::new();
        sample().encode(&mut buf).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(matches!(
            EmbeddingCache::decode(buf.as_slice(), None),
            Err(Error::Format(_))
        ));
    }
}
