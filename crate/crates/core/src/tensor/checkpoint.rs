//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! bytes 0..8    magic  b"TSQCKPT1"
//! bytes 8..16   u64    header length H
//! bytes 16..16+H       UTF-8 JSON header
//!                      {"metadata": <any JSON>,
//!                       "tensors": [{"name", "shape", "offset", "numel"}, ...]}
//! rest                 f32 payload; tensor i occupies
//!                      payload[offset*4 .. (offset+numel)*4]
//! ```
//!
//! Tensors are written in name order, so identical stores produce identical
//! bytes.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TSQCKPT1";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    numel: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    metadata: serde_json::Value,
    tensors: Vec<Entry>,
}

/// Parameters plus free-form JSON metadata (config, step, vocabulary...).
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub metadata: serde_json::Value,
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    params: &ParamStore,
    metadata: &serde_json::Value,
) -> Result<()> {
    let mut offset = 0;
    let tensors = params
        .iter()
        .map(|(name, t)| {
            let e = Entry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
                numel: t.numel(),
            };
            offset += t.numel();
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        metadata: metadata.clone(),
        tensors,
    })?;
    let mut buf = Vec::with_capacity(16 + header.len() + offset * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, t) in params.iter() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)
        .map_err(|e| Error::io("<checkpoint stream>", e))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::io("<checkpoint stream>", e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])?;
    let payload = &bytes[payload_start..];
    let mut params = ParamStore::new();
    for e in header.tensors {
        let (start, end) = (e.offset * 4, (e.offset + e.numel) * 4);
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` exceeds payload",
                e.name
            )));
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(e.name, Tensor::new(e.shape, data)?);
    }
    Ok(Checkpoint {
        params,
        metadata: header.metadata,
    })
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ParamStore,
    metadata: &serde_json::Value,
) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(std::io::BufWriter::new(file), params, metadata)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            a in proptest::collection::vec(any::<u32>(), 1..40),
            b in proptest::collection::vec(any::<u32>(), 1..10),
        ) {
            let mut p = ParamStore::new();
            p.insert("layer.a", Tensor::new(vec![a.len()], a.iter().map(|&x| f32::from_bits(x)).collect()).unwrap());
            p.insert("b", Tensor::new(vec![1, b.len()], b.iter().map(|&x| f32::from_bits(x)).collect()).unwrap());
            let meta = serde_json::json!({"step": 7, "config": {"width": 16}});
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &p, &meta).unwrap();
            let ck = read_checkpoint(&buf[..]).unwrap();
            prop_assert_eq!(&ck.metadata, &meta);
            for (name, t) in p.iter() {
                let got = ck.params.get(name).unwrap();
                prop_assert_eq!(got.shape(), t.shape());
                let bits: Vec<u32> = got.data().iter().map(|v| v.to_bits()).collect();
                let want: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits, want);
            }
            let mut again = Vec::new();
            write_checkpoint(&mut again, &ck.params, &ck.metadata).unwrap();
            prop_assert_eq!(again, buf);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_checkpoint(&b"not a checkpoint"[..]).is_err());
    }
}
