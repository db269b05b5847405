//! Binary container for checkpoints, datasets and adversarial dumps.
//!
//! Byte layout (all integers little-endian u64):
//!
//! ```text
//! magic      8 bytes  b"TTLABC01"
//! mlen       u64      manifest byte length
//! manifest   mlen     JSON envelope: {"schema", "kind", "records", "payload"}
//! records    repeated, in the order listed by the envelope:
//!   nlen     u64      record name byte length
//!   name     nlen     UTF-8
//!   rank     u64      number of dimensions
//!   dims     rank*u64
//!   count    u64      element count (must equal Π dims)
//!   data     count*8  f64 little-endian
//! ```
//!
//! The file ends exactly after the last record. Round-trips are bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TTLABC01";
const SCHEMA: &str = "ttlab-container@1";

#[derive(Serialize, Deserialize)]
struct Envelope<M> {
    schema: String,
    kind: String,
    records: Vec<String>,
    payload: M,
}

fn fmt_err(offset: u64, reason: impl Into<String>) -> Error {
    Error::Format { offset, reason: reason.into() }
}

/// Serializes `payload` plus named tensors into the container byte format.
pub fn to_bytes<M: Serialize>(
    kind: &str,
    payload: &M,
    records: &[(String, Tensor)],
) -> Result<Vec<u8>> {
    let envelope = Envelope {
        schema: SCHEMA.to_string(),
        kind: kind.to_string(),
        records: records.iter().map(|(n, _)| n.clone()).collect(),
        payload,
    };
    let manifest = serde_json::to_vec(&envelope)
        .map_err(|e| Error::Spec(format!("manifest serialization failed: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for (name, tensor) in records {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u64).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(tensor.len() as u64).to_le_bytes());
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(fmt_err(
                self.pos as u64,
                format!("truncated while reading {what} ({n} bytes needed)"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Parses container bytes, checking structure, record names and exact EOF.
pub fn from_bytes<M: DeserializeOwned>(
    bytes: &[u8],
    expected_kind: &str,
) -> Result<(M, Vec<(String, Tensor)>)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8, "magic")?;
    if magic != MAGIC {
        return Err(fmt_err(0, "bad magic"));
    }
    let mlen = r.u64("manifest length")? as usize;
    let mstart = r.pos as u64;
    let manifest = r.take(mlen, "manifest")?;
    let envelope: Envelope<M> = serde_json::from_slice(manifest)
        .map_err(|e| fmt_err(mstart, format!("manifest parse error: {e}")))?;
    if envelope.schema != SCHEMA {
        return Err(fmt_err(mstart, format!("unknown schema {:?}", envelope.schema)));
    }
    if envelope.kind != expected_kind {
        return Err(fmt_err(
            mstart,
            format!("kind {:?} where {:?} expected", envelope.kind, expected_kind),
        ));
    }
    let mut records = Vec::with_capacity(envelope.records.len());
    for declared in &envelope.records {
        let nlen = r.u64("record name length")? as usize;
        let name_pos = r.pos as u64;
        let name = std::str::from_utf8(r.take(nlen, "record name")?)
            .map_err(|_| fmt_err(name_pos, "record name is not UTF-8"))?
            .to_string();
        if &name != declared {
            return Err(fmt_err(
                name_pos,
                format!("record {name:?} where manifest declares {declared:?}"),
            ));
        }
        let rank = r.u64("record rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64("record dim")? as usize);
        }
        let count_pos = r.pos as u64;
        let count = r.u64("record element count")? as usize;
        let expected: usize = dims.iter().product();
        if count != expected {
            return Err(fmt_err(
                count_pos,
                format!("record {name:?} declares {count} elements for shape {dims:?}"),
            ));
        }
        let raw = r.take(count * 8, "record data")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push((name, Tensor::from_vec(&dims, data)?));
    }
    if r.pos != bytes.len() {
        return Err(fmt_err(
            r.pos as u64,
            format!("{} trailing bytes after last record", bytes.len() - r.pos),
        ));
    }
    Ok((envelope.payload, records))
}

pub fn save<M: Serialize>(
    path: &Path,
    kind: &str,
    payload: &M,
    records: &[(String, Tensor)],
) -> Result<()> {
    let bytes = to_bytes(kind, payload, records)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load<M: DeserializeOwned>(
    path: &Path,
    expected_kind: &str,
) -> Result<(M, Vec<(String, Tensor)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, expected_kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> (serde_json::Value, Vec<(String, Tensor)>) {
        let payload = json!({"name": "demo", "n": 3});
        let records = vec![
            ("a".to_string(), Tensor::from_vec(&[2, 2], vec![1.0, -2.5, 0.0, 1e-300]).unwrap()),
            ("b".to_string(), Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap()),
        ];
        (payload, records)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (payload, records) = sample();
        let bytes = to_bytes("test", &payload, &records).unwrap();
        let (p2, r2): (serde_json::Value, _) = from_bytes(&bytes, "test").unwrap();
        let bytes2 = to_bytes("test", &p2, &r2).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn truncation_is_a_format_error_with_offset() {
        let (payload, records) = sample();
        let bytes = to_bytes("test", &payload, &records).unwrap();
        let cut = &bytes[..bytes.len() - 5];
        match from_bytes::<serde_json::Value>(cut, "test") {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn declared_length_mismatch_is_rejected() {
        let (payload, records) = sample();
        let mut bytes = to_bytes("test", &payload, &records).unwrap();
        // corrupt the element count of record "a" (name len 1 + name 1 + rank + 2 dims)
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let count_pos = 16 + manifest_len + 8 + 1 + 8 + 16;
        bytes[count_pos..count_pos + 8].copy_from_slice(&7u64.to_le_bytes());
        assert!(matches!(
            from_bytes::<serde_json::Value>(&bytes, "test"),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let (payload, records) = sample();
        let bytes = to_bytes("test", &payload, &records).unwrap();
        assert!(from_bytes::<serde_json::Value>(&bytes, "other").is_err());
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let (payload, records) = sample();
        let mut bytes = to_bytes("test", &payload, &records).unwrap();
        bytes.push(0);
        assert!(matches!(
            from_bytes::<serde_json::Value>(&bytes, "test"),
            Err(Error::Format { .. })
        ));
    }
}
